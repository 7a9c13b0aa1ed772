//! Command-line front end: argument parsing, configuration merging and
//! exit-code policy. The subcommands live in [`commands`].

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{parse_config, Override, RunConfig};

/// Failure classes, one exit code each.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Io(_) => 4,
            CliError::Numeric(_) => 5,
        }
    }
}

impl From<r2restore_core::Error> for CliError {
    fn from(e: r2restore_core::Error) -> Self {
        use r2restore_core::Error as E;
        match e {
            E::Io { .. } | E::Format { .. } => CliError::Io(e.to_string()),
            E::NonFinite { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "r2restore", version, about = "Image restoration with residual attention networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write degraded copies of every image in a manifest.
    Degrade(Common),
    /// Train a model; checkpoints and the loss log go to --out.
    Train(Common),
    /// Restore images with a trained checkpoint.
    Restore {
        #[command(flatten)]
        common: Common,
        /// Images to restore (in addition to any manifest entries).
        inputs: Vec<PathBuf>,
    },
    /// Score a checkpoint (or the identity) on a corpus.
    Eval(Common),
    /// Finite-difference check of every primitive, block and a tiny model.
    Gradcheck(Common),
    /// Print the layer table and parameter count.
    Summary(Common),
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Degradation, e.g. "kind=awgn sigma=25 seed=7".
    #[arg(long)]
    spec: Option<String>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for model initialization and batch sampling.
    #[arg(long)]
    seed: Option<u64>,
    /// Total training iterations.
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    /// Average the eight dihedral transforms at inference.
    #[arg(long)]
    ensemble: bool,
    /// Single worker thread.
    #[arg(long)]
    deterministic: bool,
    /// Any configuration key, as KEY=VALUE (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn overrides(&self) -> Result<Vec<Override>, CliError> {
        let mut out = Vec::new();
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            out.push(Override { key: k.trim().into(), value: v.trim().into(), flag: format!("--set {k}") });
        }
        let mut push = |key: &str, value: String, flag: &str| {
            out.push(Override { key: key.into(), value, flag: flag.into() })
        };
        let path = |p: &PathBuf| p.display().to_string();
        if let Some(p) = &self.manifest {
            push("manifest", path(p), "--manifest");
        }
        if let Some(s) = &self.spec {
            push("degradation", s.clone(), "--spec");
        }
        if let Some(p) = &self.checkpoint {
            push("checkpoint", path(p), "--checkpoint");
        }
        if let Some(p) = &self.out {
            push("out", path(p), "--out");
        }
        if let Some(s) = self.seed {
            push("seed", s.to_string(), "--seed");
            push("train_seed", s.to_string(), "--seed");
        }
        if let Some(n) = self.iters {
            push("iterations", n.to_string(), "--iters");
        }
        if let Some(v) = self.lr {
            push("lr", format!("{v:?}"), "--lr");
        }
        if let Some(v) = self.batch {
            push("batch", v.to_string(), "--batch");
        }
        if let Some(v) = self.patch {
            push("patch", v.to_string(), "--patch");
        }
        if self.ensemble {
            push("ensemble", "true".into(), "--ensemble");
        }
        if self.deterministic {
            push("deterministic", "true".into(), "--deterministic");
        }
        Ok(out)
    }

    fn resolve(&self) -> Result<RunConfig, CliError> {
        parse_config(self.config.as_deref(), &self.overrides()?)
    }
}

/// Worker count from `R2RESTORE_THREADS`, forced to one when deterministic.
fn worker_threads(deterministic: bool) -> Result<Option<usize>, CliError> {
    if deterministic {
        return Ok(Some(1));
    }
    match std::env::var("R2RESTORE_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Config(format!("R2RESTORE_THREADS must be a positive integer, got '{v}'"))),
        },
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (common, inputs) = match &cli.command {
        Command::Restore { common, inputs } => (common, inputs.as_slice()),
        Command::Degrade(c) | Command::Train(c) | Command::Eval(c) | Command::Gradcheck(c) | Command::Summary(c) => {
            (c, &[][..])
        }
    };
    let cfg = common.resolve()?;
    let body = || match &cli.command {
        Command::Degrade(_) => commands::degrade(&cfg),
        Command::Train(_) => commands::train(&cfg),
        Command::Restore { .. } => commands::restore(&cfg, inputs),
        Command::Eval(_) => commands::eval(&cfg),
        Command::Gradcheck(_) => commands::gradcheck(&cfg),
        Command::Summary(_) => commands::summary(&cfg),
    };
    match worker_threads(cfg.deterministic)? {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Config(format!("cannot start {n} worker threads: {e}")))?;
            pool.install(body)
        }
        None => body(),
    }
}

/// Parse `argv` (including the program name), run the command and return
/// the process exit code. Diagnostics go to stderr, results to stdout.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
