//! Finite-difference gradient suite over every differentiable primitive,
//! each composite block and small end-to-end models (64-bit).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{Model, ModelConfig, Task};
use crate::nn::{self, BlockKind, BlockParams, BoundBlock, BoundConv, Flags};
use crate::tensor::gradcheck::{grad_check_resampled, GradCheckOptions, GradCheckReport};
use crate::tensor::{Activation, Shape, Tape, Tensor, Var};

/// Relative-error threshold the suite is held to.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub name: String,
    pub report: GradCheckReport,
}

impl SuiteCase {
    pub fn passed(&self) -> bool {
        self.report.passed(TOLERANCE)
    }
}

fn uniform(shape: Shape, lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(lo..hi))
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Smooth scalar read-out with a non-uniform gradient.
fn readout(tape: &mut Tape<f64>, y: &Var<f64>) -> Result<Var<f64>> {
    let s = tape.sigmoid(y)?;
    tape.sum(&s)
}

/// Weights in `±√(6/fan_in)`. Larger than the training initialization,
/// which keeps gradients deep in a model well above rounding noise.
fn check_weights(shape: Shape, r: &mut ChaCha8Rng) -> Tensor<f64> {
    let bound = (6.0 / (shape.c * shape.h * shape.w) as f64).sqrt();
    uniform(shape, -bound, bound, r)
}

/// Block parameters with random weights and small random biases.
fn random_block(kind: BlockKind, width: usize, reduction: usize, r: &mut ChaCha8Rng) -> Result<Vec<Tensor<f64>>> {
    let p = BlockParams::<f64>::zeros(kind, width, reduction)?;
    Ok(p.convs
        .iter()
        .flat_map(|c| {
            let weight = check_weights(c.weight.shape(), r);
            let bias = uniform(c.bias.shape(), -0.05, 0.05, r);
            [weight, bias]
        })
        .collect())
}

fn bind_block(kind: BlockKind, width: usize, reduction: usize, vars: &[Var<f64>]) -> Result<BoundBlock<f64>> {
    let specs = nn::wiring(kind, width, reduction)?;
    let convs = specs
        .iter()
        .zip(vars.chunks(2))
        .map(|(s, wb)| BoundConv {
            weight: wb[0].clone(),
            bias: wb[1].clone(),
            dilation: s.dilation,
            padding: if s.kernel == 1 { 0 } else { s.dilation },
        })
        .collect();
    Ok(BoundBlock { kind, width, convs })
}

fn random_model(cfg: &ModelConfig, seed: u64, input: Shape, target: Shape) -> Result<Vec<Tensor<f64>>> {
    let model = Model::<f64>::zeros(cfg.clone())?;
    let mut r = rng(seed ^ 0x5eed);
    let mut out = vec![uniform(input, 0.0, 1.0, &mut r), uniform(target, 0.0, 1.0, &mut r)];
    for (name, p) in model.named_params() {
        if name.ends_with(".bias") {
            out.push(uniform(p.shape(), -0.05, 0.05, &mut r));
        } else {
            out.push(check_weights(p.shape(), &mut r));
        }
    }
    Ok(out)
}

/// Run every case; reports are returned even when a case fails.
pub fn gradient_suite(seed: u64) -> Result<Vec<SuiteCase>> {
    let opts = GradCheckOptions {
        seed,
        ..GradCheckOptions::default()
    };
    let model_opts = GradCheckOptions {
        max_attempts: 400,
        samples_per_input: 16,
        ..opts.clone()
    };
    let mut cases = Vec::new();
    let mut push = |name: String, report: GradCheckReport| cases.push(SuiteCase { name, report });

    for dilation in 1..=4 {
        let report = grad_check_resampled(
            |t, v| {
                let y = t.conv2d(&v[0], &v[1], &v[2], dilation, dilation)?;
                readout(t, &y)
            },
            |s| {
                let mut r = rng(s);
                vec![
                    uniform(Shape::new(2, 3, 9, 9), -1.0, 1.0, &mut r),
                    uniform(Shape::new(4, 3, 3, 3), -0.5, 0.5, &mut r),
                    uniform(Shape::new(1, 4, 1, 1), -0.5, 0.5, &mut r),
                ]
            },
            &opts,
        )?;
        push(format!("conv2d 3x3 dilation {dilation}"), report);
    }
    push(
        "conv2d 1x1".into(),
        grad_check_resampled(
            |t, v| {
                let y = t.conv2d(&v[0], &v[1], &v[2], 1, 0)?;
                readout(t, &y)
            },
            |s| {
                let mut r = rng(s);
                vec![
                    uniform(Shape::new(2, 4, 5, 6), -1.0, 1.0, &mut r),
                    uniform(Shape::new(3, 4, 1, 1), -0.5, 0.5, &mut r),
                    uniform(Shape::new(1, 3, 1, 1), -0.5, 0.5, &mut r),
                ]
            },
            &opts,
        )?,
    );
    for (label, act, lo, hi) in [
        ("relu", Activation::Relu, -1.0, 1.0),
        ("sigmoid", Activation::Sigmoid, -4.0, 4.0),
        ("softshrink", Activation::SoftShrink(0.5), -2.0, 2.0),
    ] {
        let report = grad_check_resampled(
            |t, v| {
                let y = t.activation(act, &v[0])?;
                readout(t, &y)
            },
            |s| vec![uniform(Shape::new(2, 3, 4, 4), lo, hi, &mut rng(s))],
            &opts,
        )?;
        push(label.into(), report);
    }
    push(
        "global_avg_pool".into(),
        grad_check_resampled(
            |t, v| {
                let y = t.global_avg_pool(&v[0])?;
                readout(t, &y)
            },
            |s| vec![uniform(Shape::new(2, 4, 7, 5), -2.0, 2.0, &mut rng(s))],
            &opts,
        )?,
    );
    push(
        "channel_scale".into(),
        grad_check_resampled(
            |t, v| {
                let y = t.channel_scale(&v[0], &v[1])?;
                readout(t, &y)
            },
            |s| {
                let mut r = rng(s);
                vec![
                    uniform(Shape::new(2, 3, 4, 5), -1.0, 1.0, &mut r),
                    uniform(Shape::new(2, 3, 1, 1), 0.0, 1.0, &mut r),
                ]
            },
            &opts,
        )?,
    );
    push(
        "add (shared operand)".into(),
        grad_check_resampled(
            |t, v| {
                let a = t.add(&v[0], &v[1])?;
                let y = t.add(&a, &v[0])?;
                readout(t, &y)
            },
            |s| {
                let mut r = rng(s);
                vec![
                    uniform(Shape::new(1, 2, 3, 3), -1.0, 1.0, &mut r),
                    uniform(Shape::new(1, 2, 3, 3), -1.0, 1.0, &mut r),
                ]
            },
            &opts,
        )?,
    );
    push(
        "concat_channels".into(),
        grad_check_resampled(
            |t, v| {
                let y = t.concat_channels(&v[0], &v[1])?;
                readout(t, &y)
            },
            |s| {
                let mut r = rng(s);
                vec![
                    uniform(Shape::new(2, 2, 3, 3), -1.0, 1.0, &mut r),
                    uniform(Shape::new(2, 3, 3, 3), -1.0, 1.0, &mut r),
                ]
            },
            &opts,
        )?,
    );
    push(
        "pixel_shuffle".into(),
        grad_check_resampled(
            |t, v| {
                let y = t.pixel_shuffle(&v[0], 2)?;
                readout(t, &y)
            },
            |s| vec![uniform(Shape::new(2, 8, 3, 3), -1.0, 1.0, &mut rng(s))],
            &opts,
        )?,
    );
    push(
        "l1_loss".into(),
        grad_check_resampled(
            |t, v| t.l1_loss(&v[0], &v[1]),
            |s| {
                let mut r = rng(s);
                vec![
                    uniform(Shape::new(2, 3, 4, 4), 0.0, 1.0, &mut r),
                    uniform(Shape::new(2, 3, 4, 4), 0.0, 1.0, &mut r),
                ]
            },
            &opts,
        )?,
    );

    let (width, reduction) = (8, 4);
    for kind in [BlockKind::Mru, BlockKind::Rb, BlockKind::Erb, BlockKind::Fa, BlockKind::Eam] {
        let report = grad_check_resampled(
            |t, v| {
                let p = bind_block(kind, width, reduction, &v[1..])?;
                let y = match kind {
                    BlockKind::Mru => nn::mru_forward(t, &v[0], &p)?,
                    BlockKind::Rb => nn::rb_forward(t, &v[0], &p, true)?,
                    BlockKind::Erb => nn::erb_forward(t, &v[0], &p, true)?,
                    BlockKind::Fa => nn::fa_forward(t, &v[0], &p, 0.5, true)?,
                    BlockKind::Eam => nn::eam_forward(t, &v[0], &p, Flags::ALL, 0.5)?,
                };
                readout(t, &y)
            },
            |s| {
                let mut r = rng(s);
                let mut inputs = vec![uniform(Shape::new(1, width, 8, 8), -1.0, 1.0, &mut r)];
                inputs.extend(random_block(kind, width, reduction, &mut r).expect("valid wiring"));
                inputs
            },
            &model_opts,
        )?;
        push(format!("block {kind}"), report);
    }

    let tiny = ModelConfig {
        width: 8,
        num_eam: 1,
        reduction: 4,
        ..ModelConfig::default()
    };
    let models = [
        ("model restore, all flags", tiny.clone(), 16),
        (
            "model restore, no flags",
            ModelConfig {
                flags: Flags::NONE,
                ..tiny.clone()
            },
            16,
        ),
        (
            "model sr x2",
            ModelConfig {
                task: Task::SuperResolve(2),
                ..tiny.clone()
            },
            8,
        ),
    ];
    for (label, cfg, size) in models {
        let template = Model::<f64>::zeros(cfg.clone())?;
        let s = cfg.task.scale();
        let input = Shape::new(1, cfg.in_channels, size, size);
        let target = Shape::new(1, cfg.out_channels, size * s, size * s);
        let report = grad_check_resampled(
            |t, v| {
                let bound = template.bind_vars(&v[2..])?;
                let y = bound.forward(t, &v[0])?;
                t.l1_loss(&y, &v[1])
            },
            |seed| random_model(&cfg, seed, input, target).expect("valid config"),
            &model_opts,
        )?;
        push(label.into(), report);
    }
    Ok(cases)
}
