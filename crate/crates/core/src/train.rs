//! Adam optimization of the mean absolute error, with step-halving
//! learning rate, periodic checkpoints and exact resume.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{sample_patch_batch, Dataset};
use crate::degrade::derive_seed;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, ModelRestorer};
use crate::model::{Checkpoint, Model, Task};
use crate::tensor::{Scalar, Shape, Tape, Tensor};

/// Window of the running-mean loss.
pub const RUNNING_WINDOW: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub patch: usize,
    pub lr: f64,
    /// Halve the learning rate every this many iterations.
    pub halve_every: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub iterations: u64,
    /// Write a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: u64,
    /// Report a log line every this many iterations.
    pub log_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 32,
            patch: 80,
            lr: 1e-4,
            halve_every: 100_000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            iterations: 200_000,
            checkpoint_every: 10_000,
            log_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults for `task`: 48-pixel low-resolution patches for super-resolution.
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Restore => Self::default(),
            Task::SuperResolve(_) => TrainConfig {
                patch: 48,
                ..Self::default()
            },
        }
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.patch == 0 {
            return Err(Error::param("batch and patch must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::param(format!("lr must be positive, got {}", self.lr)));
        }
        if self.halve_every == 0 || self.log_every == 0 {
            return Err(Error::param("halve_every and log_every must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::param("Adam needs 0 <= beta < 1 and eps > 0"));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .parse()
                .map_err(|_| Error::param(format!("{key}: cannot parse '{value}'")))
        }
        match key {
            "batch" => self.batch = num(key, value)?,
            "patch" => self.patch = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "halve_every" => self.halve_every = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "eps" => self.eps = num(key, value)?,
            "iterations" => self.iterations = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "log_every" => self.log_every = num(key, value)?,
            "train_seed" => self.seed = num(key, value)?,
            _ => return Err(Error::param(format!("unknown training key '{key}'"))),
        }
        Ok(())
    }

    pub const KEYS: &'static [&'static str] = &[
        "batch",
        "patch",
        "lr",
        "halve_every",
        "beta1",
        "beta2",
        "eps",
        "iterations",
        "checkpoint_every",
        "log_every",
        "train_seed",
    ];

    pub fn to_text(&self) -> String {
        format!(
            "batch={}\npatch={}\nlr={:?}\nhalve_every={}\nbeta1={:?}\nbeta2={:?}\neps={:?}\niterations={}\ncheckpoint_every={}\nlog_every={}\ntrain_seed={}\n",
            self.batch,
            self.patch,
            self.lr,
            self.halve_every,
            self.beta1,
            self.beta2,
            self.eps,
            self.iterations,
            self.checkpoint_every,
            self.log_every,
            self.seed
        )
    }
}

/// `lr₀ · 0.5^⌊iter / H⌋`.
pub fn lr_at(iter: u64, cfg: &TrainConfig) -> f64 {
    let halvings = iter / cfg.halve_every.max(1);
    cfg.lr * 0.5f64.powf(halvings as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        TrainConfig::default().adam()
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(shapes: impl IntoIterator<Item = Shape>) -> Self {
        let m: Vec<Tensor<T>> = shapes.into_iter().map(Tensor::zeros).collect();
        AdamState {
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn for_model(model: &Model<T>) -> Self {
        Self::new(model.named_params().into_iter().map(|(_, p)| p.shape()))
    }
}

/// One Adam update. Nothing is modified unless every updated value is finite.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Arc<Tensor<T>>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    hyper: &AdamHyper,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::param(format!(
            "adam_step: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let s = p.shape();
        if g.shape() != s || state.m[i].shape() != s || state.v[i].shape() != s {
            return Err(Error::param(format!("adam_step: shape mismatch for parameter {i}")));
        }
    }
    if !(lr > 0.0) {
        return Err(Error::param(format!("adam_step: lr must be positive, got {lr}")));
    }
    let t = state.t + 1;
    let c1 = 1.0 - hyper.beta1.powf(t as f64);
    let c2 = 1.0 - hyper.beta2.powf(t as f64);
    let mut updates = Vec::with_capacity(params.len());
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let n = p.len();
        let (mut theta, mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for j in 0..n {
            let gj = g.data()[j].f64();
            let mj = hyper.beta1 * state.m[i].data()[j].f64() + (1.0 - hyper.beta1) * gj;
            let vj = hyper.beta2 * state.v[i].data()[j].f64() + (1.0 - hyper.beta2) * gj * gj;
            let step = lr * (mj / c1) / ((vj / c2).sqrt() + hyper.eps);
            let new = T::of(p.data()[j].f64() - step);
            if !new.is_finite() {
                return Err(Error::NonFinite { op: "adam_step" });
            }
            theta.push(new);
            m.push(T::of(mj));
            v.push(T::of(vj));
        }
        updates.push((theta, m, v));
    }
    for (i, (theta, m, v)) in updates.into_iter().enumerate() {
        Arc::make_mut(params[i]).data_mut().copy_from_slice(&theta);
        state.m[i].data_mut().copy_from_slice(&m);
        state.v[i].data_mut().copy_from_slice(&v);
    }
    state.t = t;
    Ok(())
}

/// Model, optimizer state and the recent losses: everything needed to
/// resume exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T: Scalar> {
    pub model: Model<T>,
    pub adam: AdamState<T>,
    /// Last [`RUNNING_WINDOW`] losses, oldest first.
    pub recent: VecDeque<f64>,
}

const ADAM_T: &str = "adam.t";
const RECENT: &str = "train.recent_loss";

/// Step counter as four 16-bit limbs, each exact in 32-bit floats.
fn encode_counter(t: u64) -> Tensor<f32> {
    Tensor::from_fn(Shape::new(1, 1, 1, 4), |_, _, _, i| ((t >> (16 * i)) & 0xffff) as f32)
}

fn decode_counter(t: &[f32]) -> u64 {
    t.iter().enumerate().map(|(i, v)| (*v as u64) << (16 * i)).sum()
}

/// Losses stored bit-exactly, one row of limbs per value.
fn encode_losses(xs: &VecDeque<f64>) -> Tensor<f32> {
    Tensor::from_fn(Shape::new(1, 1, xs.len(), 4), |_, _, r, i| {
        ((xs[r].to_bits() >> (16 * i)) & 0xffff) as f32
    })
}

fn decode_losses(t: &Tensor<f32>) -> VecDeque<f64> {
    t.data().chunks(4).map(|row| f64::from_bits(decode_counter(row))).collect()
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: Model<T>) -> Self {
        TrainState {
            adam: AdamState::for_model(&model),
            model,
            recent: VecDeque::with_capacity(RUNNING_WINDOW),
        }
    }

    /// Model tensors followed by `adam.m.*`, `adam.v.*` and the step counter.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = self.model.to_checkpoint();
        let names: Vec<String> = self.model.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, m) in names.iter().zip(&self.adam.m) {
            ckpt.tensors.push((format!("adam.m.{name}"), m.cast()));
        }
        for (name, v) in names.iter().zip(&self.adam.v) {
            ckpt.tensors.push((format!("adam.v.{name}"), v.cast()));
        }
        ckpt.tensors.push((ADAM_T.to_string(), encode_counter(self.adam.t)));
        if !self.recent.is_empty() {
            ckpt.tensors.push((RECENT.to_string(), encode_losses(&self.recent)));
        }
        ckpt
    }

    /// Restore a training state; a checkpoint without optimizer tensors
    /// starts with fresh moments.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let model = Model::from_checkpoint(ckpt)?;
        let Some(t) = ckpt.tensor(ADAM_T) else {
            return Ok(Self::new(model));
        };
        let mut adam = AdamState::for_model(&model);
        adam.t = decode_counter(t.data());
        for (i, (name, p)) in model.named_params().into_iter().enumerate() {
            for (prefix, slot) in [("adam.m", &mut adam.m[i]), ("adam.v", &mut adam.v[i])] {
                let key = format!("{prefix}.{name}");
                let src = ckpt
                    .tensor(&key)
                    .ok_or_else(|| Error::Incompatible(format!("checkpoint lacks '{key}'")))?;
                if src.shape() != p.shape() {
                    return Err(Error::Incompatible(format!("'{key}' has the wrong shape")));
                }
                *slot = src.cast();
            }
        }
        let recent = ckpt.tensor(RECENT).map(decode_losses).unwrap_or_default();
        Ok(TrainState { model, adam, recent })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    /// Iteration index (0-based) the loss was measured at.
    pub iter: u64,
    pub lr: f64,
    pub loss: f64,
    /// Mean of the last [`RUNNING_WINDOW`] losses.
    pub running: f64,
    pub psnr_val: Option<f64>,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str = "iter,lr,loss,psnr_val";

    /// CSV line with the running-mean loss.
    pub fn csv(&self) -> String {
        let psnr = self.psnr_val.map(|p| format!("{p:.4}")).unwrap_or_default();
        format!("{},{:e},{:.8},{}", self.iter, self.lr, self.running, psnr)
    }
}

/// Hooks and outputs for [`train`].
pub struct TrainOptions<'a, T: Scalar> {
    /// Directory for periodic checkpoints (`iter_XXXXXXXX.ckpt`, `latest.ckpt`, `final.ckpt`).
    pub checkpoint_dir: Option<PathBuf>,
    /// Checked once per iteration; when set, training stops after saving.
    pub stop: Option<&'a AtomicBool>,
    /// Called at every reporting point.
    pub on_record: Option<Box<dyn FnMut(&LossRecord) + 'a>>,
    /// Scored at reporting points when present.
    pub validation: Option<&'a Dataset<T>>,
}

impl<T: Scalar> Default for TrainOptions<'_, T> {
    fn default() -> Self {
        TrainOptions {
            checkpoint_dir: None,
            stop: None,
            on_record: None,
            validation: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// One record per iteration run.
    pub log: Vec<LossRecord>,
    pub stopped: bool,
    pub checkpoints: Vec<PathBuf>,
}

/// Loss and parameter gradients for one batch.
pub fn loss_and_grads<T: Scalar>(model: &Model<T>, input: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true)?;
    let x = tape.constant(input.clone())?;
    let y = bound.forward(&mut tape, &x)?;
    let gt = tape.constant(target.clone())?;
    let loss = tape.l1_loss(&y, &gt)?;
    let value = loss.value().data()[0].f64();
    let mut grads = tape.backward(&loss)?;
    let out = bound.vars().into_iter().map(|v| grads.take(v)).collect();
    Ok((value, out))
}

/// Batch loss without gradients.
pub fn batch_loss<T: Scalar>(model: &Model<T>, input: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    let y = model.infer(input)?;
    let diff: f64 = y.data().iter().zip(target.data()).map(|(a, b)| (a.f64() - b.f64()).abs()).sum();
    Ok(diff / y.len() as f64)
}

/// Seed of the batch drawn at iteration `iter`; independent of history, so
/// a resumed run draws the same batches.
pub fn batch_seed(cfg: &TrainConfig, iter: u64) -> u64 {
    derive_seed(cfg.seed, iter)
}

fn checkpoint_to(state: &TrainState<impl Scalar>, dir: &Path, name: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    state.save(&path)?;
    written.push(path);
    Ok(())
}

/// Run iterations `state.model.iteration .. cfg.iterations`.
///
/// A non-finite loss, gradient or update aborts the run; the state is left
/// at the last good iteration and, with a checkpoint directory, saved as
/// `last_good.ckpt`.
pub fn train<T: Scalar>(
    state: &mut TrainState<T>,
    ds: &Dataset<T>,
    cfg: &TrainConfig,
    mut opts: TrainOptions<'_, T>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let task_scale = state.model.config().task.scale();
    if ds.scale() != task_scale {
        return Err(Error::param(format!(
            "dataset scale {} does not match model task {}",
            ds.scale(),
            state.model.config().task
        )));
    }
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let skipped = ds.len() - ds.eligible(cfg.patch).len();
    if skipped > 0 {
        log::warn!("{skipped} image(s) smaller than the patch size are skipped");
    }
    let hyper = cfg.adam();
    let mut report = TrainReport {
        log: Vec::new(),
        stopped: false,
        checkpoints: Vec::new(),
    };
    let start = state.model.iteration;
    for iter in start..cfg.iterations {
        let step = (|| -> Result<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(batch_seed(cfg, iter));
            let batch = sample_patch_batch(ds, cfg.batch, cfg.patch, &mut rng)?;
            let (loss, grads) = loss_and_grads(&state.model, &batch.input, &batch.target)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite { op: "loss" });
            }
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite { op: "gradient" });
            }
            let lr = lr_at(iter, cfg);
            let mut params = state.model.params_mut();
            adam_step(&mut params, &grads, &mut state.adam, lr, &hyper)?;
            Ok(loss)
        })();
        let loss = match step {
            Ok(loss) => loss,
            Err(e) => {
                if let (Error::NonFinite { .. }, Some(dir)) = (&e, &opts.checkpoint_dir) {
                    checkpoint_to(state, dir, "last_good.ckpt", &mut report.checkpoints)?;
                }
                log::error!("training aborted at iteration {iter}: {e}");
                return Err(e);
            }
        };
        state.model.iteration = iter + 1;
        let window = &mut state.recent;
        if window.len() == RUNNING_WINDOW {
            window.pop_front();
        }
        window.push_back(loss);
        let mut record = LossRecord {
            iter,
            lr: lr_at(iter, cfg),
            loss,
            running: window.iter().sum::<f64>() / window.len() as f64,
            psnr_val: None,
        };
        let done = iter + 1 == cfg.iterations;
        let stop = opts.stop.is_some_and(|s| s.load(Ordering::SeqCst));
        if (iter + 1) % cfg.log_every == 0 || done || stop {
            if let Some(val) = opts.validation {
                let restorer = ModelRestorer {
                    model: &state.model,
                    ensemble: false,
                    id: String::new(),
                };
                record.psnr_val = Some(evaluate(&restorer, val).mean_psnr);
            }
            if let Some(cb) = opts.on_record.as_mut() {
                cb(&record);
            }
        }
        report.log.push(record);
        if let Some(dir) = &opts.checkpoint_dir {
            if cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 {
                checkpoint_to(state, dir, &format!("iter_{:08}.ckpt", iter + 1), &mut report.checkpoints)?;
                checkpoint_to(state, dir, "latest.ckpt", &mut report.checkpoints)?;
            }
        }
        if stop {
            report.stopped = true;
            break;
        }
    }
    if let Some(dir) = &opts.checkpoint_dir {
        let name = if report.stopped { "latest.ckpt" } else { "final.ckpt" };
        checkpoint_to(state, dir, name, &mut report.checkpoints)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 1e-4);
        assert_eq!(lr_at(99_999, &cfg), 1e-4);
        assert_eq!(lr_at(100_000, &cfg), 5e-5);
        assert_eq!(lr_at(200_000, &cfg), 2.5e-5);
    }

    #[test]
    fn first_step_is_lr() {
        let mut p = Arc::new(Tensor::<f64>::zeros(Shape::new(1, 1, 1, 3)));
        let g = Tensor::<f64>::full(Shape::new(1, 1, 1, 3), 1.0);
        let mut st = AdamState::new([p.shape()]);
        adam_step(&mut [&mut p], &[g], &mut st, 1e-4, &AdamHyper::default()).unwrap();
        for v in p.data() {
            assert!((v + 1e-4 / (1.0 + 1e-8)).abs() < 1e-18);
        }
        assert_eq!(st.t, 1);
    }

    #[test]
    fn mismatches_rejected() {
        let mut p = Arc::new(Tensor::<f64>::zeros(Shape::new(1, 1, 1, 3)));
        let g = Tensor::<f64>::zeros(Shape::new(1, 1, 1, 2));
        let mut st = AdamState::new([p.shape()]);
        let h = AdamHyper::default();
        assert!(adam_step(&mut [&mut p], &[g], &mut st, 1e-4, &h).is_err());
        assert!(adam_step(&mut [&mut p], &[], &mut st, 1e-4, &h).is_err());
    }

    #[test]
    fn nonfinite_update_leaves_state() {
        let mut p = Arc::new(Tensor::<f32>::full(Shape::new(1, 1, 1, 1), 3e38));
        let g = Tensor::<f32>::full(Shape::new(1, 1, 1, 1), -1.0);
        let mut st = AdamState::new([p.shape()]);
        let err = adam_step(&mut [&mut p], &[g], &mut st, 1e38, &AdamHyper::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        assert_eq!(p.data()[0], 3e38);
        assert_eq!(st.t, 0);
    }

    #[test]
    fn counter_encoding() {
        for t in [0, 1, 65_535, 65_536, 123_456_789_012, u64::MAX] {
            assert_eq!(decode_counter(encode_counter(t).data()), t);
        }
    }

    #[test]
    fn loss_window_encoding() {
        let xs: VecDeque<f64> = [0.1, 1e-300, 0.07314159, f64::MIN_POSITIVE].into_iter().collect();
        assert_eq!(decode_losses(&encode_losses(&xs)), xs);
    }

    #[test]
    fn config_keys() {
        let mut cfg = TrainConfig::default();
        for key in TrainConfig::KEYS {
            let line = cfg.to_text();
            let value = line
                .lines()
                .find_map(|l| l.strip_prefix(&format!("{key}=")))
                .unwrap()
                .to_string();
            cfg.set(key, &value).unwrap();
        }
        assert_eq!(cfg, TrainConfig::default());
        assert!(cfg.set("momentum", "0.9").is_err());
        assert_eq!(TrainConfig::for_task(Task::SuperResolve(2)).patch, 48);
    }
}
