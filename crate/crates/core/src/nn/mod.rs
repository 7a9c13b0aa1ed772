//! Building blocks of the enhancement attention module (EAM).
//!
//! Every block is a fixed list of convolutions (its wiring table, see
//! [`wiring`]). Parameters live in [`BlockParams`]; a forward pass binds
//! them to a tape as a [`BoundBlock`] and runs one of the `*_forward`
//! functions.
//!
//! | block | convolutions |
//! |-------|--------------|
//! | MRU   | branch A: 3×3 d1 → 3×3 d2, branch B: 3×3 d3 → 3×3 d4, merge 3×3 (2C→C) |
//! | RB    | 3×3 → 3×3 |
//! | ERB   | 3×3 → 3×3 → 1×1 |
//! | FA    | 1×1 (C→C/r) → 1×1 (C/r→C) |
//! | EAM   | MRU ‖ RB ‖ ERB ‖ FA |

use std::fmt;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tape, Tensor, Var};

/// Skip-connection and attention switches used for ablations.
///
/// * `lsc`: long skip, adds the network input to the reconstruction.
/// * `ssc`: short skip, adds each EAM's input to its output in the cascade.
/// * `lc`: local connections, the residual additions inside RB/ERB and the
///   EAM-input addition.
/// * `fa`: the feature-attention gate (off means a gate of 1).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Flags {
    pub lsc: bool,
    pub ssc: bool,
    pub lc: bool,
    pub fa: bool,
}

impl Flags {
    pub const ALL: Flags = Flags {
        lsc: true,
        ssc: true,
        lc: true,
        fa: true,
    };

    pub const NONE: Flags = Flags {
        lsc: false,
        ssc: false,
        lc: false,
        fa: false,
    };

    /// All 16 combinations, bit 0 = lsc … bit 3 = fa.
    pub fn all_combinations() -> impl Iterator<Item = Flags> {
        (0u8..16).map(|b| Flags {
            lsc: b & 1 != 0,
            ssc: b & 2 != 0,
            lc: b & 4 != 0,
            fa: b & 8 != 0,
        })
    }
}

impl Default for Flags {
    fn default() -> Self {
        Flags::ALL
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Mru,
    Rb,
    Erb,
    Fa,
    Eam,
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockKind::Mru => "MRU",
            BlockKind::Rb => "RB",
            BlockKind::Erb => "ERB",
            BlockKind::Fa => "FA",
            BlockKind::Eam => "EAM",
        })
    }
}

/// Static description of one convolution in a wiring table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize, kernel: usize, dilation: usize) -> Self {
        ConvSpec {
            name: name.into(),
            c_in,
            c_out,
            kernel,
            dilation,
        }
    }

    pub fn param_count(&self) -> usize {
        self.c_out * self.c_in * self.kernel * self.kernel + self.c_out
    }
}

const MRU_LEN: usize = 5;
const RB_LEN: usize = 2;
const ERB_LEN: usize = 3;
const FA_LEN: usize = 2;

/// Convolutions of a block kind at channel width `width`.
pub fn wiring(kind: BlockKind, width: usize, reduction: usize) -> Result<Vec<ConvSpec>> {
    if width == 0 {
        return Err(Error::param("block width must be positive"));
    }
    let c = width;
    Ok(match kind {
        BlockKind::Mru => vec![
            ConvSpec::new("mru.a1", c, c, 3, 1),
            ConvSpec::new("mru.a2", c, c, 3, 2),
            ConvSpec::new("mru.b1", c, c, 3, 3),
            ConvSpec::new("mru.b2", c, c, 3, 4),
            ConvSpec::new("mru.merge", 2 * c, c, 3, 1),
        ],
        BlockKind::Rb => vec![
            ConvSpec::new("rb.conv1", c, c, 3, 1),
            ConvSpec::new("rb.conv2", c, c, 3, 1),
        ],
        BlockKind::Erb => vec![
            ConvSpec::new("erb.conv1", c, c, 3, 1),
            ConvSpec::new("erb.conv2", c, c, 3, 1),
            ConvSpec::new("erb.conv3", c, c, 1, 1),
        ],
        BlockKind::Fa => {
            if reduction == 0 || c % reduction != 0 {
                return Err(Error::param(format!(
                    "width {c} is not divisible by attention reduction {reduction}"
                )));
            }
            vec![
                ConvSpec::new("fa.down", c, c / reduction, 1, 1),
                ConvSpec::new("fa.up", c / reduction, c, 1, 1),
            ]
        }
        BlockKind::Eam => {
            let mut all = wiring(BlockKind::Mru, c, reduction)?;
            all.extend(wiring(BlockKind::Rb, c, reduction)?);
            all.extend(wiring(BlockKind::Erb, c, reduction)?);
            all.extend(wiring(BlockKind::Fa, c, reduction)?);
            all
        }
    })
}

/// Weight `(c_out, c_in, k, k)` and bias `(1, c_out, 1, 1)` of one convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T> {
    pub weight: Arc<Tensor<T>>,
    pub bias: Arc<Tensor<T>>,
    pub dilation: usize,
}

impl<T: Scalar> Conv<T> {
    pub fn zeros(spec: &ConvSpec) -> Self {
        Conv {
            weight: Arc::new(Tensor::zeros(Shape::new(spec.c_out, spec.c_in, spec.kernel, spec.kernel))),
            bias: Arc::new(Tensor::zeros(Shape::new(1, spec.c_out, 1, 1))),
            dilation: spec.dilation,
        }
    }

    /// Uniform weights in `±1/√fan_in`, zero bias.
    pub fn init(spec: &ConvSpec, rng: &mut impl Rng) -> Self {
        let fan_in = (spec.c_in * spec.kernel * spec.kernel) as f64;
        let bound = (1.0 / fan_in).sqrt();
        let shape = Shape::new(spec.c_out, spec.c_in, spec.kernel, spec.kernel);
        let weight = Tensor::from_fn(shape, |_, _, _, _| T::of(rng.random_range(-bound..bound)));
        Conv {
            weight: Arc::new(weight),
            bias: Arc::new(Tensor::zeros(Shape::new(1, spec.c_out, 1, 1))),
            dilation: spec.dilation,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape().h
    }

    /// Padding that keeps the spatial size: the dilation for 3×3, none for 1×1.
    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel() - 1) / 2
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Result<BoundConv<T>> {
        Ok(BoundConv {
            weight: tape.leaf_shared(self.weight.clone(), requires_grad)?,
            bias: tape.leaf_shared(self.bias.clone(), requires_grad)?,
            dilation: self.dilation,
            padding: self.padding(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> Conv<U> {
        Conv {
            weight: Arc::new(self.weight.cast()),
            bias: Arc::new(self.bias.cast()),
            dilation: self.dilation,
        }
    }
}

/// A convolution whose parameters are registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundConv<T> {
    pub weight: Var<T>,
    pub bias: Var<T>,
    pub dilation: usize,
    pub padding: usize,
}

impl<T: Scalar> BoundConv<T> {
    pub fn apply(&self, tape: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        tape.conv2d(x, &self.weight, &self.bias, self.dilation, self.padding)
    }
}

/// Parameters of one block instance.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub kind: BlockKind,
    pub width: usize,
    pub reduction: usize,
    pub convs: Vec<Conv<T>>,
}

impl<T: Scalar> BlockParams<T> {
    pub fn zeros(kind: BlockKind, width: usize, reduction: usize) -> Result<Self> {
        let convs = wiring(kind, width, reduction)?.iter().map(Conv::zeros).collect();
        Ok(BlockParams {
            kind,
            width,
            reduction,
            convs,
        })
    }

    pub fn init(kind: BlockKind, width: usize, reduction: usize, rng: &mut impl Rng) -> Result<Self> {
        let convs = wiring(kind, width, reduction)?
            .iter()
            .map(|s| Conv::init(s, rng))
            .collect();
        Ok(BlockParams {
            kind,
            width,
            reduction,
            convs,
        })
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(Conv::param_count).sum()
    }

    /// Conv names in wiring order (e.g. `mru.a1`).
    pub fn conv_names(&self) -> Vec<String> {
        wiring(self.kind, self.width, self.reduction)
            .map(|w| w.into_iter().map(|s| s.name).collect())
            .unwrap_or_default()
    }

    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Result<BoundBlock<T>> {
        Ok(BoundBlock {
            kind: self.kind,
            width: self.width,
            convs: self
                .convs
                .iter()
                .map(|c| c.bind(tape, requires_grad))
                .collect::<Result<_>>()?,
        })
    }

    pub fn cast<U: Scalar>(&self) -> BlockParams<U> {
        BlockParams {
            kind: self.kind,
            width: self.width,
            reduction: self.reduction,
            convs: self.convs.iter().map(Conv::cast).collect(),
        }
    }
}

/// Block parameters registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundBlock<T> {
    pub kind: BlockKind,
    pub width: usize,
    pub convs: Vec<BoundConv<T>>,
}

impl<T: Scalar> BoundBlock<T> {
    /// Weight and bias variables in wiring order.
    pub fn vars(&self) -> impl Iterator<Item = &Var<T>> {
        self.convs.iter().flat_map(|c| [&c.weight, &c.bias])
    }

    fn expect(&self, kind: BlockKind, x: &Var<T>) -> Result<()> {
        if self.kind != kind {
            return Err(Error::param(format!("expected {kind} parameters, got {}", self.kind)));
        }
        check_width(x, self.width)
    }
}

fn check_width<T: Scalar>(x: &Var<T>, width: usize) -> Result<()> {
    if x.shape().c != width {
        return Err(Error::param(format!(
            "block of width {width} applied to {} channels",
            x.shape().c
        )));
    }
    Ok(())
}

fn conv_relu<T: Scalar>(tape: &mut Tape<T>, conv: &BoundConv<T>, x: &Var<T>) -> Result<Var<T>> {
    let y = conv.apply(tape, x)?;
    tape.relu(&y)
}

fn mru<T: Scalar>(tape: &mut Tape<T>, x: &Var<T>, c: &[BoundConv<T>]) -> Result<Var<T>> {
    let a = conv_relu(tape, &c[0], x)?;
    let a = conv_relu(tape, &c[1], &a)?;
    let b = conv_relu(tape, &c[2], x)?;
    let b = conv_relu(tape, &c[3], &b)?;
    let merged = tape.concat_channels(&a, &b)?;
    conv_relu(tape, &c[4], &merged)
}

fn rb<T: Scalar>(tape: &mut Tape<T>, x: &Var<T>, c: &[BoundConv<T>], local: bool) -> Result<Var<T>> {
    let y = conv_relu(tape, &c[0], x)?;
    let y = c[1].apply(tape, &y)?;
    if local {
        tape.add(x, &y)
    } else {
        Ok(y)
    }
}

fn erb<T: Scalar>(tape: &mut Tape<T>, x: &Var<T>, c: &[BoundConv<T>], local: bool) -> Result<Var<T>> {
    let y = conv_relu(tape, &c[0], x)?;
    let y = conv_relu(tape, &c[1], &y)?;
    let y = c[2].apply(tape, &y)?;
    if local {
        tape.add(x, &y)
    } else {
        Ok(y)
    }
}

fn fa<T: Scalar>(tape: &mut Tape<T>, f: &Var<T>, c: &[BoundConv<T>], lambda: f64, enabled: bool) -> Result<Var<T>> {
    if !enabled {
        return Ok(f.clone());
    }
    let gate = attention_gate(tape, f, c, lambda)?;
    tape.channel_scale(f, &gate)
}

/// `r_c = sigmoid(up(softshrink(down(mean_hw(f)))))`, shape `(n, C, 1, 1)`.
fn attention_gate<T: Scalar>(tape: &mut Tape<T>, f: &Var<T>, c: &[BoundConv<T>], lambda: f64) -> Result<Var<T>> {
    let pooled = tape.global_avg_pool(f)?;
    let reduced = c[0].apply(tape, &pooled)?;
    let shrunk = tape.softshrink(&reduced, lambda)?;
    let restored = c[1].apply(tape, &shrunk)?;
    tape.sigmoid(&restored)
}

/// Merge-and-run unit: two dilated branches, concatenated and fused.
pub fn mru_forward<T: Scalar>(tape: &mut Tape<T>, x: &Var<T>, p: &BoundBlock<T>) -> Result<Var<T>> {
    p.expect(BlockKind::Mru, x)?;
    mru(tape, x, &p.convs)
}

/// Residual block `x + conv(relu(conv(x)))`; the addition is dropped when `local` is off.
pub fn rb_forward<T: Scalar>(tape: &mut Tape<T>, x: &Var<T>, p: &BoundBlock<T>, local: bool) -> Result<Var<T>> {
    p.expect(BlockKind::Rb, x)?;
    rb(tape, x, &p.convs, local)
}

/// Enhanced residual block `x + conv1×1(relu(conv(relu(conv(x)))))`.
pub fn erb_forward<T: Scalar>(tape: &mut Tape<T>, x: &Var<T>, p: &BoundBlock<T>, local: bool) -> Result<Var<T>> {
    p.expect(BlockKind::Erb, x)?;
    erb(tape, x, &p.convs, local)
}

/// Channel feature attention: rescale each channel of `f` by its gate in (0, 1).
pub fn fa_forward<T: Scalar>(
    tape: &mut Tape<T>,
    f: &Var<T>,
    p: &BoundBlock<T>,
    lambda: f64,
    enabled: bool,
) -> Result<Var<T>> {
    p.expect(BlockKind::Fa, f)?;
    fa(tape, f, &p.convs, lambda, enabled)
}

/// The per-channel gate alone, for inspection.
pub fn fa_gate<T: Scalar>(tape: &mut Tape<T>, f: &Var<T>, p: &BoundBlock<T>, lambda: f64) -> Result<Var<T>> {
    p.expect(BlockKind::Fa, f)?;
    attention_gate(tape, f, &p.convs, lambda)
}

/// Enhancement attention module `x + fa(erb(rb(mru(x))))`.
pub fn eam_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: &Var<T>,
    p: &BoundBlock<T>,
    flags: Flags,
    lambda: f64,
) -> Result<Var<T>> {
    p.expect(BlockKind::Eam, x)?;
    let (m, rest) = p.convs.split_at(MRU_LEN);
    let (r, rest) = rest.split_at(RB_LEN);
    let (e, a) = rest.split_at(ERB_LEN);
    debug_assert_eq!(a.len(), FA_LEN);
    let y = mru(tape, x, m)?;
    let y = rb(tape, &y, r, flags.lc)?;
    let y = erb(tape, &y, e, flags.lc)?;
    let y = fa(tape, &y, a, lambda, flags.fa)?;
    if flags.lc {
        tape.add(x, &y)
    } else {
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_input(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    fn block(kind: BlockKind, width: usize, reduction: usize, seed: u64) -> BlockParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        BlockParams::init(kind, width, reduction, &mut rng).unwrap()
    }

    #[test]
    fn paper_width_parameter_counts() {
        let count = |k| BlockParams::<f32>::zeros(k, 64, 16).unwrap().param_count();
        assert_eq!(count(BlockKind::Mru), 221_504);
        assert_eq!(count(BlockKind::Rb), 73_856);
        assert_eq!(count(BlockKind::Erb), 36_928 + 36_928 + 4_160);
        assert_eq!(count(BlockKind::Erb), 78_016);
        assert_eq!(count(BlockKind::Fa), 260 + 320);
        assert_eq!(count(BlockKind::Eam), 373_956);
    }

    #[test]
    fn zero_parameters() {
        let x = random_input(Shape::new(1, 8, 6, 6), 1);
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone()).unwrap();
        let bind = |k, tape: &mut Tape<f64>| BlockParams::zeros(k, 8, 4).unwrap().bind(tape, false).unwrap();

        let p = bind(BlockKind::Mru, &mut tape);
        let y = mru_forward(&mut tape, &xv, &p).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));

        for kind in [BlockKind::Rb, BlockKind::Erb] {
            let p = bind(kind, &mut tape);
            let y = if kind == BlockKind::Rb {
                rb_forward(&mut tape, &xv, &p, true)
            } else {
                erb_forward(&mut tape, &xv, &p, true)
            }
            .unwrap();
            assert_eq!(y.value(), &x);
        }

        let p = bind(BlockKind::Fa, &mut tape);
        let gate = fa_gate(&mut tape, &xv, &p, 0.5).unwrap();
        assert!(gate.value().data().iter().all(|&v| v == 0.5));
        let y = fa_forward(&mut tape, &xv, &p, 0.5, true).unwrap();
        assert_eq!(y.value(), &x.map(|v| 0.5 * v));

        let p = bind(BlockKind::Eam, &mut tape);
        let y = eam_forward(&mut tape, &xv, &p, Flags::ALL, 0.5).unwrap();
        assert_eq!(y.value(), &x);
    }

    #[test]
    fn blocks_preserve_shape() {
        let x = random_input(Shape::new(2, 8, 9, 7), 2);
        let mut tape = Tape::inference();
        let xv = tape.constant(x).unwrap();
        let p = block(BlockKind::Eam, 8, 4, 3).bind(&mut tape, false).unwrap();
        for flags in Flags::all_combinations() {
            let y = eam_forward(&mut tape, &xv, &p, flags, 0.5).unwrap();
            assert_eq!(y.shape(), xv.shape());
        }
    }

    #[test]
    fn mru_matches_primitive_composition() {
        let x = random_input(Shape::new(1, 4, 12, 12), 4);
        let params = block(BlockKind::Mru, 4, 1, 5);
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone()).unwrap();
        let p = params.bind(&mut tape, false).unwrap();
        let y = mru_forward(&mut tape, &xv, &p).unwrap();

        use crate::tensor::conv::conv2d;
        let relu = |t: Tensor<f64>| t.map(|v| v.max(0.0));
        let c = &params.convs;
        let step = |x: &Tensor<f64>, i: usize| relu(conv2d(x, &c[i].weight, &c[i].bias, c[i].dilation, c[i].dilation).unwrap());
        let a = step(&step(&x, 0), 1);
        let b = step(&step(&x, 2), 3);
        let mut cat = Vec::new();
        cat.extend_from_slice(a.data());
        cat.extend_from_slice(b.data());
        let cat = Tensor::from_vec(Shape::new(1, 8, 12, 12), cat).unwrap();
        let expected = step(&cat, 4);
        assert_eq!(y.value(), &expected);
    }

    #[test]
    fn erb_matches_primitive_composition() {
        let x = random_input(Shape::new(2, 4, 8, 8), 6);
        let params = block(BlockKind::Erb, 4, 1, 7);
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone()).unwrap();
        let p = params.bind(&mut tape, false).unwrap();
        let y = erb_forward(&mut tape, &xv, &p, true).unwrap();

        use crate::tensor::conv::conv2d;
        let c = &params.convs;
        let h = conv2d(&x, &c[0].weight, &c[0].bias, 1, 1).unwrap().map(|v| v.max(0.0));
        let h = conv2d(&h, &c[1].weight, &c[1].bias, 1, 1).unwrap().map(|v| v.max(0.0));
        let mut h = conv2d(&h, &c[2].weight, &c[2].bias, 1, 0).unwrap();
        h.add_assign(&x).unwrap();
        assert_eq!(y.value(), &h);
    }

    #[test]
    fn fa_gate_is_spatially_invariant_and_contracting() {
        let x = random_input(Shape::new(1, 8, 5, 5), 8);
        // reverse the spatial order of every plane
        let mut permuted = x.clone();
        for c in 0..8 {
            for i in 0..5 {
                for j in 0..5 {
                    permuted.set(0, c, i, j, x.at(0, c, 4 - i, 4 - j));
                }
            }
        }
        let params = block(BlockKind::Fa, 8, 4, 9);
        let mut tape = Tape::inference();
        let p = params.bind(&mut tape, false).unwrap();
        let a = tape.constant(x.clone()).unwrap();
        let b = tape.constant(permuted).unwrap();
        let ga = fa_gate(&mut tape, &a, &p, 0.5).unwrap();
        let gb = fa_gate(&mut tape, &b, &p, 0.5).unwrap();
        assert!(ga.value().max_abs_diff(gb.value()).unwrap() < 1e-15);
        assert!(ga.value().data().iter().all(|&r| r > 0.0 && r < 1.0));
        let y = fa_forward(&mut tape, &a, &p, 0.5, true).unwrap();
        for (o, i) in y.value().data().iter().zip(x.data()) {
            assert!(o.abs() < i.abs() || *i == 0.0);
        }
    }

    #[test]
    fn fa_flag_off_is_plain_cascade() {
        let x = random_input(Shape::new(1, 8, 6, 6), 10);
        let params = block(BlockKind::Eam, 8, 4, 11);
        let mut tape = Tape::inference();
        let xv = tape.constant(x).unwrap();
        let p = params.bind(&mut tape, false).unwrap();
        let flags = Flags { fa: false, ..Flags::ALL };
        let y = eam_forward(&mut tape, &xv, &p, flags, 0.5).unwrap();

        let sub = |kind: BlockKind, range: std::ops::Range<usize>| BlockParams {
            kind,
            width: 8,
            reduction: 4,
            convs: params.convs[range].to_vec(),
        };
        let m = sub(BlockKind::Mru, 0..5).bind(&mut tape, false).unwrap();
        let r = sub(BlockKind::Rb, 5..7).bind(&mut tape, false).unwrap();
        let e = sub(BlockKind::Erb, 7..10).bind(&mut tape, false).unwrap();
        let h = mru_forward(&mut tape, &xv, &m).unwrap();
        let h = rb_forward(&mut tape, &h, &r, true).unwrap();
        let h = erb_forward(&mut tape, &h, &e, true).unwrap();
        let expected = tape.add(&xv, &h).unwrap();
        assert_eq!(y.value(), expected.value());
    }

    #[test]
    fn rejects_mismatches() {
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(Tensor::zeros(Shape::new(1, 6, 4, 4))).unwrap();
        let p = BlockParams::zeros(BlockKind::Rb, 8, 4).unwrap().bind(&mut tape, false).unwrap();
        assert!(rb_forward(&mut tape, &x, &p, true).is_err());
        assert!(mru_forward(&mut tape, &x, &p).is_err());
        assert!(BlockParams::<f64>::zeros(BlockKind::Fa, 65, 16).is_err());
    }
}
