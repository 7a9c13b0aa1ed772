use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Once;

use r2restore_core::data::{read_image, write_image, Dataset, Manifest};
use r2restore_core::metrics::{evaluate, Identity, ModelRestorer, Restorer};
use r2restore_core::model::load_checkpoint;
use r2restore_core::train::{train as run_training, LossRecord, TrainOptions, TrainState};
use r2restore_core::verify::{gradient_suite, TOLERANCE};
use r2restore_core::{Model, ModelConfig};

use crate::config::RunConfig;
use crate::CliError;

static STOP: AtomicBool = AtomicBool::new(false);
static HANDLER: Once = Once::new();

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn require<'a, T>(value: &'a Option<T>, what: &str) -> Result<&'a T, CliError> {
    value.as_ref().ok_or_else(|| CliError::Usage(format!("missing {what}")))
}

/// Create the output directory and echo the resolved configuration into it.
fn prepare_out(cfg: &RunConfig) -> Result<Option<&Path>, CliError> {
    let Some(out) = cfg.out.as_deref() else {
        return Ok(None);
    };
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let path = out.join("config.txt");
    fs::write(&path, cfg.to_text()).map_err(|e| io_err(&path, e))?;
    Ok(Some(out))
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

/// Output names from input stems, made unique with a numeric suffix.
fn unique_stems<'a>(paths: impl IntoIterator<Item = &'a Path>) -> Vec<String> {
    let mut seen = HashSet::new();
    paths
        .into_iter()
        .map(|p| {
            let base = stem(p);
            let mut name = base.clone();
            let mut k = 1;
            while !seen.insert(name.clone()) {
                name = format!("{base}_{k}");
                k += 1;
            }
            name
        })
        .collect()
}

/// Checkpoint weights under the checkpoint's configuration, with any model
/// keys the user set explicitly laid on top. Changing the architecture is
/// an error; flags, λ and the seed may change.
fn apply_explicit(cfg: &RunConfig, stored: &ModelConfig) -> Result<ModelConfig, CliError> {
    let mut merged = stored.clone();
    for key in ModelConfig::KEYS {
        if cfg.explicit.contains_key(*key) {
            let line = cfg.model.to_text();
            let value = line
                .lines()
                .find_map(|l| l.strip_prefix(&format!("{key}=")))
                .unwrap_or_default()
                .to_string();
            merged.set(key, &value)?;
        }
    }
    Ok(merged)
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<Model<f32>, CliError> {
    let mut model: Model<f32> = load_checkpoint(path)?;
    let merged = apply_explicit(cfg, model.config())?;
    model.reconfigure(merged)?;
    Ok(model)
}

pub fn degrade(cfg: &RunConfig) -> Result<(), CliError> {
    let manifest_path = require(&cfg.manifest, "--manifest")?;
    let spec = *require(&cfg.degradation, "--spec")?;
    require(&cfg.out, "--out")?;
    let manifest = Manifest::load(manifest_path)?;
    let ds = Dataset::<f64>::load(&manifest, Some(spec), None)?;
    let out = prepare_out(cfg)?.expect("checked above");
    let names = unique_stems(manifest.entries.iter().map(|e| e.clean.as_path()));
    let mut listing = String::new();
    for (i, (entry, name)) in manifest.entries.iter().zip(&names).enumerate() {
        let target = ds.target(i)?;
        let degraded = ds.input(i)?;
        let file = format!("{name}.ppm");
        write_image(&degraded, out.join(&file))?;
        // a super-resolution pair needs a clean image divisible by the scale
        let clean = if target.shape() == ds.samples()[i].clean.shape() {
            fs::canonicalize(&entry.clean).map_err(|e| io_err(&entry.clean, e))?
        } else {
            let cropped = format!("{name}_clean.ppm");
            write_image(&target, out.join(&cropped))?;
            PathBuf::from(cropped)
        };
        listing.push_str(&format!("clean={} degraded={file}\n", clean.display()));
    }
    let listing_path = out.join("manifest.txt");
    fs::write(&listing_path, listing).map_err(|e| io_err(&listing_path, e))?;
    println!("wrote {} degraded image(s) and {}", names.len(), listing_path.display());
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let manifest_path = require(&cfg.manifest, "--manifest")?;
    require(&cfg.out, "--out")?;
    let manifest = Manifest::load(manifest_path)?;
    let tile = (cfg.tile > 0).then_some(cfg.tile);
    let ds = Dataset::<f32>::load(&manifest, cfg.degradation, tile)?;
    let val = match &cfg.val_manifest {
        Some(p) => Some(Dataset::<f32>::load(&Manifest::load(p)?, cfg.degradation, None)?),
        None => None,
    };

    let mut state = match &cfg.checkpoint {
        Some(path) => {
            let mut st = TrainState::<f32>::load(path)?;
            let merged = apply_explicit(cfg, st.model.config())?;
            st.model.reconfigure(merged)?;
            log::info!("resuming from {} at iteration {}", path.display(), st.model.iteration);
            st
        }
        None => TrainState::new(Model::build(cfg.model.clone())?),
    };
    let mut resolved = cfg.clone();
    resolved.model = state.model.config().clone();
    let out = prepare_out(&resolved)?.expect("checked above");

    // keep log lines from before the resume point, then append
    let log_path = out.join("loss.csv");
    let start = state.model.iteration;
    let mut kept = format!("{}\n", LossRecord::CSV_HEADER);
    if start > 0 {
        if let Ok(old) = fs::read_to_string(&log_path) {
            for line in old.lines().skip(1) {
                let iter = line.split(',').next().and_then(|v| v.parse::<u64>().ok());
                if iter.is_some_and(|it| it < start) {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
        }
    }
    fs::write(&log_path, &kept).map_err(|e| io_err(&log_path, e))?;
    let mut log_file = fs::OpenOptions::new().append(true).open(&log_path).map_err(|e| io_err(&log_path, e))?;

    STOP.store(false, Ordering::SeqCst);
    HANDLER.call_once(|| {
        if let Err(e) = ctrlc::set_handler(|| STOP.store(true, Ordering::SeqCst)) {
            log::warn!("cannot install interrupt handler: {e}");
        }
    });
    let mut write_failed = None;
    let opts = TrainOptions {
        checkpoint_dir: Some(out.to_path_buf()),
        stop: Some(&STOP),
        on_record: Some(Box::new(|r: &LossRecord| {
            if let Err(e) = writeln!(log_file, "{}", r.csv()) {
                write_failed.get_or_insert(e);
            }
            log::info!("iter {} lr {:e} loss {:.6}", r.iter + 1, r.lr, r.running);
        })),
        validation: val.as_ref(),
    };
    let report = run_training(&mut state, &ds, &cfg.train, opts);
    if let Some(e) = write_failed {
        return Err(io_err(&log_path, e));
    }
    let report = report?;
    let last = report.checkpoints.last().map(|p| p.display().to_string()).unwrap_or_default();
    if report.stopped {
        println!("interrupted at iteration {}; checkpoint {last}", state.model.iteration);
    } else {
        println!("trained to iteration {}; checkpoint {last}", state.model.iteration);
    }
    Ok(())
}

pub fn restore(cfg: &RunConfig, inputs: &[PathBuf]) -> Result<(), CliError> {
    let ckpt = require(&cfg.checkpoint, "--checkpoint")?;
    require(&cfg.out, "--out")?;
    let mut files: Vec<PathBuf> = inputs.to_vec();
    if let Some(m) = &cfg.manifest {
        files.extend(Manifest::load(m)?.entries.into_iter().map(|e| e.degraded.unwrap_or(e.clean)));
    }
    if files.is_empty() {
        return Err(CliError::Usage("no input images (pass paths or --manifest)".into()));
    }
    let model = load_model(cfg, ckpt)?;
    let mut resolved = cfg.clone();
    resolved.model = model.config().clone();
    let out = prepare_out(&resolved)?.expect("checked above");
    let names = unique_stems(files.iter().map(PathBuf::as_path));
    for (path, name) in files.iter().zip(&names) {
        let x = read_image::<f32>(path)?;
        let y = if cfg.ensemble { model.self_ensemble(&x)? } else { model.infer(&x)? };
        for ext in ["ppm", "png"] {
            write_image(&y, out.join(format!("{name}.{ext}")))?;
        }
        println!("{} -> {}", path.display(), out.join(format!("{name}.ppm")).display());
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    let manifest = Manifest::load(require(&cfg.manifest, "--manifest")?)?;
    let ds = Dataset::<f32>::load(&manifest, cfg.degradation, None)?;
    let model = cfg.checkpoint.as_deref().map(|p| load_model(cfg, p)).transpose()?;
    let restorer: Box<dyn Restorer<f32> + '_> = match &model {
        Some(m) => Box::new(ModelRestorer {
            model: m,
            ensemble: cfg.ensemble,
            id: cfg.checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        }),
        None => Box::new(Identity),
    };
    let mut resolved = cfg.clone();
    if let Some(m) = &model {
        resolved.model = m.config().clone();
    }
    let report = evaluate(restorer.as_ref(), &ds);
    let csv = report.to_csv();
    if let Some(out) = prepare_out(&resolved)? {
        let path = out.join("eval.csv");
        fs::write(&path, &csv).map_err(|e| io_err(&path, e))?;
    }
    print!("{csv}");
    let failed = report.rows.iter().filter(|r| r.error.is_some()).count();
    if failed == report.rows.len() && failed > 0 {
        return Err(CliError::Config(format!("all {failed} image(s) failed to evaluate")));
    }
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig) -> Result<(), CliError> {
    let cases = gradient_suite(cfg.model.seed)?;
    let mut worst: f64 = 0.0;
    for c in &cases {
        worst = worst.max(c.report.max_rel_err);
        println!(
            "{:<28} max_rel_err={:.3e} {}",
            c.name,
            c.report.max_rel_err,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    println!("max_rel_err={worst:.3e}");
    if cases.iter().all(|c| c.passed()) {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("gradient check above {TOLERANCE:e}")))
    }
}

pub fn summary(cfg: &RunConfig) -> Result<(), CliError> {
    let model = match &cfg.checkpoint {
        Some(p) => load_model(cfg, p)?,
        None => Model::<f32>::build(cfg.model.clone())?,
    };
    println!("{:<20} {:>5} {:>5} {:>6} {:>8} {:>10}", "layer", "in", "out", "kernel", "dilation", "params");
    for l in model.layers() {
        println!(
            "{:<20} {:>5} {:>5} {:>6} {:>8} {:>10}",
            l.name, l.c_in, l.c_out, l.kernel, l.dilation, l.params
        );
    }
    println!("config: {}", model.config().architecture_key());
    println!("params={}", model.param_count());
    Ok(())
}
