//! Central finite-difference verification of tape gradients (64-bit only).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Entries checked per input tensor; smaller tensors are checked in full.
    pub samples_per_input: usize,
    pub seed: u64,
    /// Input draws attempted before giving up on a kink-free point.
    pub max_attempts: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            samples_per_input: 64,
            seed: 0,
            max_attempts: 32,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradEntry {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub entries: Vec<GradEntry>,
    /// Smallest distance of any activation/loss input to a kink at the checked point.
    pub kink_margin: f64,
    /// Probes skipped because `θ ± ε` landed on different linear pieces.
    pub crossings: usize,
    pub attempts: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        !self.entries.is_empty() && self.max_rel_err < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Value of `f` and the kink pattern of the evaluation.
fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let mut tape = Tape::inference();
    tape.track_kinks(true);
    let vars = inputs
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    Ok((out.value().data()[0], tape.kink_pattern()))
}

/// Compare tape gradients of the scalar map `f` with central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε` at the given inputs.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let mut tape = Tape::new();
    tape.track_kinks(true);
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(&loss)?;
    let kink_margin = tape.kink_margin();

    let (_, pattern) = evaluate(&f, inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut entries = Vec::new();
    let mut crossings = 0;
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(var);
        let len = inputs[i].len();
        // visit entries in random order until enough probes stay on one
        // linear piece; a difference across a kink says nothing about the
        // derivative on either side
        let order: Vec<usize> = if len <= opts.samples_per_input {
            (0..len).collect()
        } else {
            rand::seq::index::sample(&mut rng, len, len).into_vec()
        };
        let mut taken = 0;
        for index in order {
            if taken == opts.samples_per_input {
                break;
            }
            let base = inputs[i].data()[index];
            probe[i].data_mut()[index] = base + opts.eps;
            let (plus, p_plus) = evaluate(&f, &probe)?;
            probe[i].data_mut()[index] = base - opts.eps;
            let (minus, p_minus) = evaluate(&f, &probe)?;
            probe[i].data_mut()[index] = base;
            if p_plus != pattern || p_minus != pattern {
                crossings += 1;
                continue;
            }
            taken += 1;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic.data()[index];
            entries.push(GradEntry {
                input: i,
                index,
                analytic: a,
                numeric,
                rel_err: relative_error(a, numeric),
            });
        }
    }
    let max_rel_err = entries.iter().map(|e| e.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_err,
        entries,
        kink_margin,
        crossings,
        attempts: 1,
    })
}

/// Draw inputs from `make_inputs(attempt)` until no activation input lies
/// within `10·eps` of a kink, then run [`grad_check`] there. If no draw
/// qualifies the last one is used, and [`grad_check`] skips the individual
/// probes that straddle a kink.
pub fn grad_check_resampled<F, G>(f: F, mut make_inputs: G, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
    G: FnMut(u64) -> Vec<Tensor<f64>>,
{
    let threshold = 10.0 * opts.eps;
    let mut attempt = 0;
    loop {
        let inputs = make_inputs(opts.seed.wrapping_add(attempt as u64));
        attempt += 1;
        let mut tape = Tape::new();
        tape.track_kinks(true);
        let vars = inputs
            .iter()
            .map(|t| tape.leaf(t.clone(), true))
            .collect::<Result<Vec<_>>>()?;
        f(&mut tape, &vars)?;
        if tape.kink_margin() >= threshold || attempt >= opts.max_attempts {
            let mut report = grad_check(&f, &inputs, opts)?;
            report.attempts = attempt;
            return Ok(report);
        }
    }
}
