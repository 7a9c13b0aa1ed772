use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use r2restore_core::data::write_image;
use r2restore_core::{Shape, Tensor};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_r2restore"));
    c.env("RUST_LOG", "warn").env_remove("R2RESTORE_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn pattern(h: usize, w: usize, k: usize) -> Tensor<f64> {
    Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        let v = ((x * (3 + k) + y * (5 + c) + k * 17) % 97) as f64 / 96.0;
        0.15 + 0.7 * v
    })
}

/// A small corpus plus its manifest; returns the manifest path.
fn corpus(dir: &Path, count: usize, size: usize) -> PathBuf {
    let mut text = String::new();
    for k in 0..count {
        let name = format!("c{k}.ppm");
        write_image(&pattern(size, size + 4, k), dir.join(&name)).unwrap();
        text.push_str(&format!("clean={name}\n"));
    }
    let m = dir.join("manifest.txt");
    std::fs::write(&m, text).unwrap();
    m
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.cfg");
    std::fs::write(
        &p,
        "# small network for quick runs\nwidth = 8\nnum_eam = 1\nreduction = 4\n\nbatch = 2\npatch = 12\nlog_every = 1\ncheckpoint_every = 3\ndegradation = kind=awgn sigma=25 seed=5\n",
    )
    .unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn summary_reports_parameter_count() {
    let o = run(&["summary"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.lines().any(|l| l == "params=1499347"), "{out}");
    assert!(out.contains("eam3.fa.up"), "{out}");

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("default_color.cfg");
    std::fs::write(&cfg, "# paper defaults\n").unwrap();
    let o = run(&["summary", "--config", s(&cfg)]);
    assert!(stdout(&o).contains("params=1499347"));
    let o = run(&["summary", "--set", "in_channels=1", "--set", "out_channels=1"]);
    assert!(stdout(&o).contains(&format!("params={}", 1_499_347 - 2_306)));
}

#[test]
fn exit_codes_by_failure_class() {
    let dir = tempfile::tempdir().unwrap();
    // usage
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["summary", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(&["degrade", "--spec", "kind=awgn sigma=25 seed=1"]).status.code(), Some(2));
    assert_eq!(run(&["summary", "--set", "width"]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));

    // configuration
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "reduction = 16\nwidth = 65\n").unwrap();
    let o = run(&["summary", "--config", s(&bad)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("bad.cfg:2") && stderr(&o).contains("width"), "{}", stderr(&o));
    std::fs::write(&bad, "colour = red\n").unwrap();
    let o = run(&["summary", "--config", s(&bad)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("colour"));
    assert_eq!(run(&["summary", "--spec", "kind=awgn sigma=-1 seed=0"]).status.code(), Some(3));
    let o = bin().args(["summary"]).env("R2RESTORE_THREADS", "zero").output().unwrap();
    assert_eq!(o.status.code(), Some(3));

    // input/output
    let missing = dir.path().join("nope.txt");
    let o = run(&["eval", "--manifest", s(&missing), "--spec", "kind=awgn sigma=25 seed=1"]);
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(run(&["summary", "--config", s(&missing)]).status.code(), Some(4));
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"R2NETCKP but not really").unwrap();
    assert_eq!(run(&["summary", "--checkpoint", s(&junk)]).status.code(), Some(4));

    // numeric
    let m = corpus(dir.path(), 2, 16);
    let cfg = tiny_config(dir.path());
    let o = run(&["train", "--config", s(&cfg), "--manifest", s(&m), "--out", s(&dir.path().join("boom")), "--iters", "5", "--lr", "1e37"]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
    assert!(dir.path().join("boom/last_good.ckpt").is_file());
}

#[test]
fn degrade_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path(), 3, 20);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["degrade", "--manifest", s(&m), "--spec", "kind=awgn sigma=25 seed=7", "--out", s(out)]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for k in 0..3 {
        let name = format!("c{k}.ppm");
        let (x, y) = (std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap());
        assert_eq!(x, y);
        assert_ne!(x, std::fs::read(dir.path().join(&name)).unwrap());
    }
    let echoed = std::fs::read_to_string(a.join("config.txt")).unwrap();
    assert!(echoed.contains("degradation = kind=awgn sigma=25 seed=7"));

    // the written manifest pairs files, so eval runs without a spec
    let o = run(&["eval", "--manifest", s(&a.join("manifest.txt"))]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let last = stdout(&o).lines().last().unwrap().to_string();
    let psnr: f64 = last.split_whitespace().next().unwrap().trim_start_matches("mean_psnr=").parse().unwrap();
    assert!((psnr - 20.17).abs() < 1.0, "{last}");

    // super-resolution crops the clean side to a multiple of the scale
    let sr = dir.path().join("sr");
    let o = run(&["degrade", "--manifest", s(&m), "--spec", "kind=bicubic scale=3 seed=0", "--out", s(&sr)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(sr.join("c0_clean.ppm").is_file());
}

#[test]
fn train_resume_restore_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path(), 3, 20);
    let cfg = tiny_config(dir.path());
    let (full, split) = (dir.path().join("full"), dir.path().join("split"));
    let train = |out: &Path, iters: &str, extra: &[&str]| {
        let mut args = vec!["train", "--config", s(&cfg), "--manifest", s(&m), "--out", s(out), "--iters", iters, "--seed", "4"];
        args.extend_from_slice(extra);
        let o = run(&args);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    };
    train(&full, "6", &[]);
    let log = std::fs::read_to_string(full.join("loss.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("iter,lr,loss,psnr_val"));
    assert_eq!(log.lines().count(), 7);
    for name in ["iter_00000003.ckpt", "iter_00000006.ckpt", "latest.ckpt", "final.ckpt", "config.txt"] {
        assert!(full.join(name).is_file(), "{name}");
    }

    // same seeds, same log; interrupted and resumed, same log again
    let again = dir.path().join("again");
    train(&again, "6", &[]);
    assert_eq!(std::fs::read_to_string(again.join("loss.csv")).unwrap(), log);
    train(&split, "4", &[]);
    let ckpt = split.join("final.ckpt");
    train(&split, "6", &["--checkpoint", s(&ckpt)]);
    assert_eq!(std::fs::read_to_string(split.join("loss.csv")).unwrap(), log);
    assert_eq!(std::fs::read(split.join("final.ckpt")).unwrap(), std::fs::read(full.join("final.ckpt")).unwrap());

    // changing the architecture of a checkpoint is refused
    let o = run(&["summary", "--checkpoint", s(&ckpt), "--set", "width=16", "--set", "reduction=4"]);
    assert_eq!(o.status.code(), Some(3));
    // flags may change
    let o = run(&["summary", "--checkpoint", s(&ckpt), "--set", "fa=off"]);
    assert_eq!(o.status.code(), Some(0));

    let final_ckpt = full.join("final.ckpt");
    let restored = dir.path().join("restored");
    let input = dir.path().join("c1.ppm");
    for extra in [&[][..], &["--ensemble"][..]] {
        let mut args = vec!["restore", "--checkpoint", s(&final_ckpt), "--out", s(&restored), s(&input)];
        args.extend_from_slice(extra);
        let o = run(&args);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert!(restored.join("c1.ppm").is_file() && restored.join("c1.png").is_file());
    }

    let scored = dir.path().join("scored");
    let o = run(&["eval", "--config", s(&cfg), "--manifest", s(&m), "--checkpoint", s(&final_ckpt), "--out", s(&scored)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(scored.join("eval.csv")).unwrap();
    assert_eq!(csv, stdout(&o));
    assert_eq!(csv.lines().count(), 2 + 3 + 1);
    assert!(csv.lines().last().unwrap().starts_with("mean_psnr="));
}

#[test]
fn gradcheck_passes() {
    let o = run(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let last = stdout(&o).lines().last().unwrap().to_string();
    let err: f64 = last.trim_start_matches("max_rel_err=").parse().unwrap();
    assert!(err < 1e-4);
}

#[test]
fn thread_cap_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path(), 2, 16);
    let cfg = tiny_config(dir.path());
    let mut logs = Vec::new();
    for (threads, extra) in [("1", None), ("3", None), ("2", Some("--deterministic"))] {
        let out = dir.path().join(format!("t{threads}"));
        let mut c = bin();
        c.args(["train", "--config", s(&cfg), "--manifest", s(&m), "--out", s(&out), "--iters", "3"]);
        c.args(extra).env("R2RESTORE_THREADS", threads);
        let o = c.output().unwrap();
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        logs.push(std::fs::read_to_string(out.join("loss.csv")).unwrap());
    }
    assert_eq!(logs[0], logs[1]);
    assert_eq!(logs[0], logs[2]);
}
