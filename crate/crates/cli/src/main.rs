fn main() {
    std::process::exit(r2restore::dispatch(std::env::args_os()));
}
