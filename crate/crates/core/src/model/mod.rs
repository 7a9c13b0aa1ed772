//! The full restoration network.
//!
//! ```text
//! restore:  x ─ head ─ EAM₁ … EAMₘ ─ tail ─(+x)─ ŷ
//! SR ×s:    x ─ head ─ EAM₁ … EAMₘ ─(+f₀)─ conv(C→C·s²) ─ shuffle(s) ─ tail ─ ŷ
//! ```
//!
//! With the short-skip flag each EAM's input is added to its output.

mod checkpoint;
mod config;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, Checkpoint, MAGIC, VERSION};
pub use config::{fnv1a, ModelConfig, Task};

use crate::data::augment::{dihedral, inverse_variant, VARIANTS};
use crate::error::{Error, Result};
use crate::nn::{eam_forward, wiring, BlockKind, BlockParams, BoundBlock, BoundConv, Conv, ConvSpec};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// One row of the layer summary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerInfo {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    pub head: Conv<T>,
    pub eams: Vec<BlockParams<T>>,
    pub upsample: Option<Conv<T>>,
    pub tail: Conv<T>,
    /// Training iterations applied so far.
    pub iteration: u64,
}

fn head_spec(cfg: &ModelConfig) -> ConvSpec {
    ConvSpec::new("head", cfg.in_channels, cfg.width, 3, 1)
}

fn upsample_spec(cfg: &ModelConfig) -> Option<ConvSpec> {
    match cfg.task {
        Task::Restore => None,
        Task::SuperResolve(s) => Some(ConvSpec::new("upsample", cfg.width, cfg.width * s * s, 3, 1)),
    }
}

fn tail_spec(cfg: &ModelConfig) -> ConvSpec {
    ConvSpec::new("tail", cfg.width, cfg.out_channels, 3, 1)
}

/// Every convolution of a configuration in canonical order.
pub fn conv_specs(cfg: &ModelConfig) -> Result<Vec<ConvSpec>> {
    cfg.validate()?;
    let mut specs = vec![head_spec(cfg)];
    for m in 0..cfg.num_eam {
        for mut s in wiring(BlockKind::Eam, cfg.width, cfg.reduction)? {
            s.name = format!("eam{m}.{}", s.name);
            specs.push(s);
        }
    }
    specs.extend(upsample_spec(cfg));
    specs.push(tail_spec(cfg));
    Ok(specs)
}

/// Scalar parameter count implied by a configuration.
pub fn param_count_for(cfg: &ModelConfig) -> Result<usize> {
    Ok(conv_specs(cfg)?.iter().map(ConvSpec::param_count).sum())
}

impl<T: Scalar> Model<T> {
    /// Seeded initialization: uniform `±1/√fan_in` weights, zero biases,
    /// drawn in canonical layer order.
    pub fn build(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let head = Conv::init(&head_spec(&cfg), &mut rng);
        let eams = (0..cfg.num_eam)
            .map(|_| BlockParams::init(BlockKind::Eam, cfg.width, cfg.reduction, &mut rng))
            .collect::<Result<_>>()?;
        let upsample = upsample_spec(&cfg).map(|s| Conv::init(&s, &mut rng));
        let tail = Conv::init(&tail_spec(&cfg), &mut rng);
        Ok(Model {
            config: cfg,
            head,
            eams,
            upsample,
            tail,
            iteration: 0,
        })
    }

    /// All parameters zero.
    pub fn zeros(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Model {
            head: Conv::zeros(&head_spec(&cfg)),
            eams: (0..cfg.num_eam)
                .map(|_| BlockParams::zeros(BlockKind::Eam, cfg.width, cfg.reduction))
                .collect::<Result<_>>()?,
            upsample: upsample_spec(&cfg).map(|s| Conv::zeros(&s)),
            tail: Conv::zeros(&tail_spec(&cfg)),
            config: cfg,
            iteration: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Change ablation flags; parameter shapes are unaffected.
    pub fn set_flags(&mut self, flags: crate::nn::Flags) {
        self.config.flags = flags;
    }

    /// Swap in a configuration with the same architecture (flags, λ and
    /// seed may differ).
    pub fn reconfigure(&mut self, cfg: ModelConfig) -> Result<()> {
        cfg.validate()?;
        if cfg.architecture_hash() != self.config.architecture_hash() {
            return Err(Error::Incompatible(format!(
                "checkpoint architecture [{}] differs from requested [{}]",
                self.config.architecture_key(),
                cfg.architecture_key()
            )));
        }
        self.config = cfg;
        Ok(())
    }

    /// Convolutions with their canonical names.
    pub fn convs(&self) -> Vec<(String, &Conv<T>)> {
        let mut out = vec![("head".to_string(), &self.head)];
        for (m, eam) in self.eams.iter().enumerate() {
            for (name, conv) in eam.conv_names().into_iter().zip(&eam.convs) {
                out.push((format!("eam{m}.{name}"), conv));
            }
        }
        if let Some(up) = &self.upsample {
            out.push(("upsample".to_string(), up));
        }
        out.push(("tail".to_string(), &self.tail));
        out
    }

    fn convs_mut(&mut self) -> Vec<&mut Conv<T>> {
        let mut out = vec![&mut self.head];
        for eam in &mut self.eams {
            out.extend(eam.convs.iter_mut());
        }
        if let Some(up) = &mut self.upsample {
            out.push(up);
        }
        out.push(&mut self.tail);
        out
    }

    /// `(name, tensor)` for every weight and bias, canonical order.
    pub fn named_params(&self) -> Vec<(String, &Arc<Tensor<T>>)> {
        self.convs()
            .into_iter()
            .flat_map(|(name, c)| [(format!("{name}.weight"), &c.weight), (format!("{name}.bias"), &c.bias)])
            .collect()
    }

    /// Mutable parameter tensors in the same order as [`Model::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Arc<Tensor<T>>> {
        self.convs_mut()
            .into_iter()
            .flat_map(|c| [&mut c.weight, &mut c.bias])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.convs().iter().map(|(_, c)| c.param_count()).sum()
    }

    pub fn layers(&self) -> Vec<LayerInfo> {
        self.convs()
            .into_iter()
            .map(|(name, c)| {
                let s = c.weight.shape();
                LayerInfo {
                    name,
                    c_in: s.c,
                    c_out: s.n,
                    kernel: s.h,
                    dilation: c.dilation,
                    params: c.param_count(),
                }
            })
            .collect()
    }

    /// Register every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Result<BoundModel<T>> {
        Ok(BoundModel {
            config: self.config.clone(),
            head: self.head.bind(tape, requires_grad)?,
            eams: self
                .eams
                .iter()
                .map(|e| e.bind(tape, requires_grad))
                .collect::<Result<_>>()?,
            upsample: self
                .upsample
                .as_ref()
                .map(|u| u.bind(tape, requires_grad))
                .transpose()?,
            tail: self.tail.bind(tape, requires_grad)?,
        })
    }

    /// Bind using caller-supplied variables in [`Model::named_params`] order
    /// instead of this model's own tensors; only the structure is taken from `self`.
    pub fn bind_vars(&self, vars: &[Var<T>]) -> Result<BoundModel<T>> {
        let named = self.named_params();
        if vars.len() != named.len() {
            return Err(Error::param(format!("expected {} parameter variables, got {}", named.len(), vars.len())));
        }
        for (v, (name, p)) in vars.iter().zip(&named) {
            if v.shape() != p.shape() {
                return Err(Error::param(format!("{name}: expected {}, got {}", p.shape(), v.shape())));
            }
        }
        let mut it = vars.iter().cloned();
        let mut next = |c: &Conv<T>| BoundConv {
            weight: it.next().expect("length checked"),
            bias: it.next().expect("length checked"),
            dilation: c.dilation,
            padding: c.padding(),
        };
        let head = next(&self.head);
        let eams = self
            .eams
            .iter()
            .map(|e| BoundBlock {
                kind: e.kind,
                width: e.width,
                convs: e.convs.iter().map(&mut next).collect(),
            })
            .collect();
        let upsample = self.upsample.as_ref().map(&mut next);
        let tail = next(&self.tail);
        Ok(BoundModel {
            config: self.config.clone(),
            head,
            eams,
            upsample,
            tail,
        })
    }

    /// Forward pass without gradient tracking.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let bound = self.bind(&mut tape, false)?;
        let xv = tape.constant(x.clone())?;
        Ok(bound.forward(&mut tape, &xv)?.into_tensor())
    }

    /// Mean of the outputs over the eight dihedral transforms of the input,
    /// each mapped back before averaging.
    pub fn self_ensemble(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut acc: Option<Tensor<T>> = None;
        for k in 0..VARIANTS {
            let y = self.infer(&dihedral(x, k))?;
            let back = dihedral(&y, inverse_variant(k));
            match acc.as_mut() {
                Some(a) => a.add_assign(&back)?,
                None => acc = Some(back),
            }
        }
        let mut out = acc.expect("eight variants");
        out.scale(T::of(1.0 / VARIANTS as f64));
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            head: self.head.cast(),
            eams: self.eams.iter().map(BlockParams::cast).collect(),
            upsample: self.upsample.as_ref().map(Conv::cast),
            tail: self.tail.cast(),
            iteration: self.iteration,
        }
    }
}

/// Model parameters registered on a tape.
pub struct BoundModel<T> {
    config: ModelConfig,
    pub head: BoundConv<T>,
    pub eams: Vec<BoundBlock<T>>,
    pub upsample: Option<BoundConv<T>>,
    pub tail: BoundConv<T>,
}

impl<T: Scalar> BoundModel<T> {
    /// Parameter variables in the order of [`Model::named_params`].
    pub fn vars(&self) -> Vec<&Var<T>> {
        let mut out = vec![&self.head.weight, &self.head.bias];
        for e in &self.eams {
            out.extend(e.vars());
        }
        if let Some(u) = &self.upsample {
            out.extend([&u.weight, &u.bias]);
        }
        out.extend([&self.tail.weight, &self.tail.bias]);
        out
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let cfg = &self.config;
        if x.shape().c != cfg.in_channels {
            return Err(Error::param(format!(
                "model expects {} input channels, got {}",
                cfg.in_channels,
                x.shape().c
            )));
        }
        let f0 = self.head.apply(tape, x)?;
        let mut f = f0.clone();
        for eam in &self.eams {
            let out = eam_forward(tape, &f, eam, cfg.flags, cfg.lambda)?;
            f = if cfg.flags.ssc { tape.add(&out, &f)? } else { out };
        }
        match (cfg.task, &self.upsample) {
            (Task::Restore, _) => {
                let residual = self.tail.apply(tape, &f)?;
                if cfg.flags.lsc {
                    tape.add(x, &residual)
                } else {
                    Ok(residual)
                }
            }
            (Task::SuperResolve(s), Some(up)) => {
                if cfg.flags.lsc {
                    f = tape.add(&f, &f0)?;
                }
                let expanded = up.apply(tape, &f)?;
                let shuffled = tape.pixel_shuffle(&expanded, s)?;
                self.tail.apply(tape, &shuffled)
            }
            (Task::SuperResolve(_), None) => Err(Error::State("super-resolution model without upsampler".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Flags;
    use crate::tensor::Shape;
    use rand::Rng;

    fn tiny(task: Task) -> ModelConfig {
        ModelConfig {
            width: 8,
            num_eam: 1,
            reduction: 4,
            task,
            seed: 3,
            ..ModelConfig::default()
        }
    }

    fn random(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn paper_configuration_counts() {
        assert_eq!(param_count_for(&ModelConfig::default()).unwrap(), 1_499_347);
        let gray = param_count_for(&ModelConfig::gray()).unwrap();
        // head loses 2·64·9 weights, tail loses 2·64·9 weights and 2 biases
        assert_eq!(1_499_347 - gray, 1_152 + 1_154);
        let two = ModelConfig {
            num_eam: 2,
            ..ModelConfig::default()
        };
        assert_eq!(param_count_for(&two).unwrap(), 1_499_347 - 2 * 373_956);
        assert_eq!(param_count_for(&two).unwrap(), 751_435);
        // upsampler: 64·256·9 + 256
        assert_eq!(
            param_count_for(&ModelConfig::super_resolution(2)).unwrap(),
            1_499_347 + 147_712
        );
    }

    #[test]
    fn built_model_agrees_with_config_count() {
        let m = Model::<f32>::build(ModelConfig::default()).unwrap();
        assert_eq!(m.param_count(), 1_499_347);
        assert_eq!(m.named_params().len(), 2 * (2 + 4 * 12));
        let layers = m.layers();
        assert_eq!(layers.iter().map(|l| l.params).sum::<usize>(), 1_499_347);
        assert_eq!(layers[0].name, "head");
        assert_eq!(layers[2].name, "eam0.mru.a2");
        assert_eq!(layers[2].dilation, 2);
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = Model::<f32>::build(tiny(Task::Restore)).unwrap();
        let b = Model::<f32>::build(tiny(Task::Restore)).unwrap();
        assert_eq!(a, b);
        let c = Model::<f32>::build(ModelConfig {
            seed: 4,
            ..tiny(Task::Restore)
        })
        .unwrap();
        assert_ne!(a, c);
        assert!(a.tail.bias.data().iter().all(|&v| v == 0.0));
        let bound = (6.0f32 / 72.0).sqrt();
        assert!(a.eams[0].convs[0].weight.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn shapes_for_every_flag_combination() {
        let x = random(Shape::new(1, 3, 12, 12), 1);
        for task in [Task::Restore, Task::SuperResolve(2), Task::SuperResolve(3)] {
            let mut m = Model::<f64>::build(tiny(task)).unwrap();
            let s = task.scale();
            for flags in Flags::all_combinations() {
                m.set_flags(flags);
                let y = m.infer(&x).unwrap();
                assert_eq!(y.shape(), Shape::new(1, 3, 12 * s, 12 * s));
            }
        }
    }

    #[test]
    fn long_skip_identity_with_zero_residual_path() {
        let mut m = Model::<f64>::build(tiny(Task::Restore)).unwrap();
        let zeroed = Model::<f64>::zeros(m.config().clone()).unwrap();
        m.eams = zeroed.eams;
        m.tail = zeroed.tail;
        let x = random(Shape::new(2, 3, 10, 10), 2);
        assert_eq!(m.infer(&x).unwrap(), x);
    }

    #[test]
    fn self_ensemble_equals_explicit_average() {
        let m = Model::<f64>::build(tiny(Task::Restore)).unwrap();
        let x = random(Shape::new(1, 3, 8, 8), 5);
        let y = m.self_ensemble(&x).unwrap();
        let mut expected = Tensor::zeros(x.shape());
        for k in 0..8 {
            let out = m.infer(&dihedral(&x, k)).unwrap();
            expected.add_assign(&dihedral(&out, inverse_variant(k))).unwrap();
        }
        expected.scale(0.125);
        assert!(y.max_abs_diff(&expected).unwrap() < 1e-14);
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let m = Model::<f64>::build(tiny(Task::Restore)).unwrap();
        assert!(m.infer(&Tensor::zeros(Shape::new(1, 1, 8, 8))).is_err());
    }
}
