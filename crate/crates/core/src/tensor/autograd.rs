use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::conv;
use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

static NEXT_GENERATION: AtomicU64 = AtomicU64::new(1);
/// FNV-1a offset basis, the starting value of a kink pattern.
const KINK_PATTERN_SEED: u64 = 0xcbf2_9ce4_8422_2325;

fn fresh_generation() -> u64 {
    NEXT_GENERATION.fetch_add(1, Ordering::Relaxed)
}

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    Sigmoid,
    /// `v ↦ sign(v)·max(|v| − λ, 0)`.
    SoftShrink(f64),
}

/// Handle to a value produced on a [`Tape`].
///
/// Values are shared and immutable. A variable only owns a tape node when
/// gradients have to flow through it.
#[derive(Clone, Debug)]
pub struct Var<T> {
    node: Option<usize>,
    generation: u64,
    value: Arc<Tensor<T>>,
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn into_tensor(self) -> Tensor<T> {
        Arc::try_unwrap(self.value).unwrap_or_else(|shared| (*shared).clone())
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Option<usize>,
        w: Option<usize>,
        b: Option<usize>,
        xv: Arc<Tensor<T>>,
        wv: Arc<Tensor<T>>,
        dilation: usize,
        padding: usize,
    },
    Activation {
        x: usize,
        kind: Activation,
        // input for relu/softshrink, output for sigmoid
        saved: Arc<Tensor<T>>,
    },
    GlobalAvgPool {
        x: usize,
        input: Shape,
    },
    ChannelScale {
        f: Option<usize>,
        r: Option<usize>,
        fv: Arc<Tensor<T>>,
        rv: Arc<Tensor<T>>,
    },
    Add {
        a: Option<usize>,
        b: Option<usize>,
    },
    Concat {
        a: Option<usize>,
        b: Option<usize>,
        a_channels: usize,
    },
    PixelShuffle {
        x: usize,
        scale: usize,
    },
    L1 {
        pred: Option<usize>,
        gt: Option<usize>,
        pv: Arc<Tensor<T>>,
        gv: Arc<Tensor<T>>,
    },
    Sum {
        x: usize,
        input: Shape,
    },
}

struct Node<T> {
    op: Op<T>,
    shape: Shape,
}

/// Reverse-mode gradient tape.
///
/// Operations on variables that require gradients are recorded in
/// execution order; [`Tape::backward`] replays them in reverse. A tape in
/// inference mode records nothing and intermediates are freed as soon as
/// their variables drop.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    generation: u64,
    recording: bool,
    track_kinks: bool,
    kink_margin: f64,
    kink_pattern: u64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by tape node.
pub struct Gradients<T> {
    generation: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `var`, if the loss depends on it.
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        if var.generation != self.generation {
            return None;
        }
        var.node.and_then(|i| self.grads.get(i)?.as_ref())
    }

    /// Like [`Gradients::get`], but unreachable variables get a zero tensor.
    pub fn wrt(&self, var: &Var<T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }

    pub fn take(&mut self, var: &Var<T>) -> Tensor<T> {
        let taken = if var.generation == self.generation {
            var.node.and_then(|i| self.grads.get_mut(i)?.take())
        } else {
            None
        };
        taken.unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, grad: Tensor<T>) -> Result<()> {
    match slot {
        Some(existing) => existing.add_assign(&grad),
        None => {
            *slot = Some(grad);
            Ok(())
        }
    }
}

fn same_shape(op: &str, a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(Error::param(format!("{op}: shape mismatch {a} vs {b}")));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    /// A recording tape.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            generation: fresh_generation(),
            recording: true,
            track_kinks: false,
            kink_margin: f64::INFINITY,
            kink_pattern: KINK_PATTERN_SEED,
        }
    }

    /// A tape that never records; every variable is a constant.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop all recorded nodes. Variables created before the call become stale.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.generation = fresh_generation();
        self.kink_margin = f64::INFINITY;
        self.kink_pattern = KINK_PATTERN_SEED;
    }

    /// Track the smallest distance of any activation or loss input to a
    /// non-differentiable point (0 for relu and L1, ±λ for soft-shrinkage).
    pub fn track_kinks(&mut self, on: bool) {
        self.track_kinks = on;
    }

    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    /// Hash of which linear piece every tracked input fell on. Two
    /// evaluations with the same pattern lie in one smooth region.
    pub fn kink_pattern(&self) -> u64 {
        self.kink_pattern
    }

    fn note_kinks(&mut self, values: &[T], kink: f64) {
        if !self.track_kinks {
            return;
        }
        for v in values {
            let v = v.f64();
            let (d, piece) = if kink == 0.0 {
                (v.abs(), (v > 0.0) as u64)
            } else {
                ((v - kink).abs().min((v + kink).abs()), (v > -kink) as u64 + (v > kink) as u64)
            };
            self.kink_margin = self.kink_margin.min(d);
            self.kink_pattern = (self.kink_pattern ^ piece).wrapping_mul(0x0100_0000_01b3);
        }
    }

    fn check_var(&self, v: &Var<T>) -> Result<()> {
        if v.node.is_some() && v.generation != self.generation {
            return Err(Error::State(
                "variable belongs to a different or cleared tape".into(),
            ));
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor<T>, op: impl FnOnce() -> Op<T>, tracked: bool) -> Var<T> {
        let node = if tracked && self.recording {
            self.nodes.push(Node {
                op: op(),
                shape: value.shape(),
            });
            Some(self.nodes.len() - 1)
        } else {
            None
        };
        Var {
            node,
            generation: self.generation,
            value: Arc::new(value),
        }
    }

    /// Register an input tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var<T>> {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    /// Register a shared tensor without copying it.
    pub fn leaf_shared(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Result<Var<T>> {
        value.ensure_finite("leaf")?;
        let node = if requires_grad && self.recording {
            self.nodes.push(Node {
                op: Op::Leaf,
                shape: value.shape(),
            });
            Some(self.nodes.len() - 1)
        } else {
            None
        };
        Ok(Var {
            node,
            generation: self.generation,
            value,
        })
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var<T>> {
        self.leaf(value, false)
    }

    pub fn conv2d(
        &mut self,
        x: &Var<T>,
        weight: &Var<T>,
        bias: &Var<T>,
        dilation: usize,
        padding: usize,
    ) -> Result<Var<T>> {
        for v in [x, weight, bias] {
            self.check_var(v)?;
        }
        let out = conv::conv2d(&x.value, &weight.value, &bias.value, dilation, padding)?;
        out.ensure_finite("conv2d")?;
        let tracked = x.node.is_some() || weight.node.is_some() || bias.node.is_some();
        Ok(self.push(
            out,
            || Op::Conv2d {
                x: x.node,
                w: weight.node,
                b: bias.node,
                xv: x.value.clone(),
                wv: weight.value.clone(),
                dilation,
                padding,
            },
            tracked,
        ))
    }

    pub fn activation(&mut self, kind: Activation, x: &Var<T>) -> Result<Var<T>> {
        self.check_var(x)?;
        x.value.ensure_finite("activation input")?;
        let out = match kind {
            Activation::Relu => {
                self.note_kinks(x.value.data(), 0.0);
                x.value.map(|v| if v > T::zero() { v } else { T::zero() })
            }
            Activation::Sigmoid => x.value.map(|v| T::one() / (T::one() + (-v).exp())),
            Activation::SoftShrink(lambda) => {
                if !(lambda > 0.0) {
                    return Err(Error::param(format!(
                        "soft-shrinkage threshold must be positive, got {lambda}"
                    )));
                }
                self.note_kinks(x.value.data(), lambda);
                let l = T::of(lambda);
                x.value.map(|v| {
                    if v > l {
                        v - l
                    } else if v < -l {
                        v + l
                    } else {
                        T::zero()
                    }
                })
            }
        };
        out.ensure_finite("activation")?;
        let Some(xi) = x.node else {
            return Ok(self.push(out, || Op::Leaf, false));
        };
        let saved = match kind {
            Activation::Sigmoid => None,
            _ => Some(x.value.clone()),
        };
        let out = Arc::new(out);
        let saved = saved.unwrap_or_else(|| out.clone());
        if self.recording {
            self.nodes.push(Node {
                op: Op::Activation { x: xi, kind, saved },
                shape: out.shape(),
            });
        }
        Ok(Var {
            node: self.recording.then(|| self.nodes.len() - 1),
            generation: self.generation,
            value: out,
        })
    }

    pub fn relu(&mut self, x: &Var<T>) -> Result<Var<T>> {
        self.activation(Activation::Relu, x)
    }

    pub fn sigmoid(&mut self, x: &Var<T>) -> Result<Var<T>> {
        self.activation(Activation::Sigmoid, x)
    }

    pub fn softshrink(&mut self, x: &Var<T>, lambda: f64) -> Result<Var<T>> {
        self.activation(Activation::SoftShrink(lambda), x)
    }

    /// Mean over the spatial extent: `(n,c,h,w) → (n,c,1,1)`.
    pub fn global_avg_pool(&mut self, x: &Var<T>) -> Result<Var<T>> {
        self.check_var(x)?;
        let s = x.shape();
        if s.plane() == 0 {
            return Err(Error::param("global average pool over an empty plane"));
        }
        let inv = T::of(1.0 / s.plane() as f64);
        let data: Vec<T> = x
            .value
            .data()
            .chunks_exact(s.plane())
            .map(|p| p.iter().fold(T::zero(), |a, &v| a + v) * inv)
            .collect();
        let out = Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data)?;
        out.ensure_finite("global_avg_pool")?;
        let xi = x.node;
        Ok(self.push(
            out,
            || Op::GlobalAvgPool {
                x: xi.unwrap_or(usize::MAX),
                input: s,
            },
            xi.is_some(),
        ))
    }

    /// `out[n,c,i,j] = r[n,c] · f[n,c,i,j]`.
    pub fn channel_scale(&mut self, f: &Var<T>, r: &Var<T>) -> Result<Var<T>> {
        self.check_var(f)?;
        self.check_var(r)?;
        let fs = f.shape();
        let rs = r.shape();
        if rs != Shape::new(fs.n, fs.c, 1, 1) {
            return Err(Error::param(format!(
                "channel_scale: factors {rs} do not match features {fs}"
            )));
        }
        let mut out = (*f.value).clone();
        for (plane, &k) in out
            .data_mut()
            .chunks_exact_mut(fs.plane().max(1))
            .zip(r.value.data())
        {
            for v in plane {
                *v = *v * k;
            }
        }
        out.ensure_finite("channel_scale")?;
        let tracked = f.node.is_some() || r.node.is_some();
        Ok(self.push(
            out,
            || Op::ChannelScale {
                f: f.node,
                r: r.node,
                fv: f.value.clone(),
                rv: r.value.clone(),
            },
            tracked,
        ))
    }

    pub fn add(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.check_var(a)?;
        self.check_var(b)?;
        same_shape("add", a.shape(), b.shape())?;
        let mut out = (*a.value).clone();
        out.add_assign(&b.value)?;
        out.ensure_finite("add")?;
        let tracked = a.node.is_some() || b.node.is_some();
        Ok(self.push(
            out,
            || Op::Add {
                a: a.node,
                b: b.node,
            },
            tracked,
        ))
    }

    /// Stack channels, `a` first.
    pub fn concat_channels(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.check_var(a)?;
        self.check_var(b)?;
        let (sa, sb) = (a.shape(), b.shape());
        if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
            return Err(Error::param(format!("concat: {sa} and {sb} differ")));
        }
        let shape = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..sa.n {
            data.extend_from_slice(a.value.item(n));
            data.extend_from_slice(b.value.item(n));
        }
        let out = Tensor::from_vec(shape, data)?;
        let tracked = a.node.is_some() || b.node.is_some();
        Ok(self.push(
            out,
            || Op::Concat {
                a: a.node,
                b: b.node,
                a_channels: sa.c,
            },
            tracked,
        ))
    }

    /// Depth-to-space: `(n, c·s², h, w) → (n, c, h·s, w·s)`.
    pub fn pixel_shuffle(&mut self, x: &Var<T>, scale: usize) -> Result<Var<T>> {
        self.check_var(x)?;
        let out = pixel_shuffle(&x.value, scale)?;
        let xi = x.node;
        Ok(self.push(
            out,
            || Op::PixelShuffle {
                x: xi.unwrap_or(usize::MAX),
                scale,
            },
            xi.is_some(),
        ))
    }

    /// Mean absolute error over every element; returns a `(1,1,1,1)` value.
    pub fn l1_loss(&mut self, pred: &Var<T>, gt: &Var<T>) -> Result<Var<T>> {
        self.check_var(pred)?;
        self.check_var(gt)?;
        same_shape("l1_loss", pred.shape(), gt.shape())?;
        let count = pred.shape().len();
        if count == 0 {
            return Err(Error::param("l1_loss over an empty tensor"));
        }
        if self.track_kinks {
            let diffs: Vec<T> = pred
                .value
                .data()
                .iter()
                .zip(gt.value.data())
                .map(|(&p, &g)| p - g)
                .collect();
            self.note_kinks(&diffs, 0.0);
        }
        let total: f64 = pred
            .value
            .data()
            .iter()
            .zip(gt.value.data())
            .map(|(&p, &g)| (p - g).abs().f64())
            .sum();
        let out = Tensor::scalar(T::of(total / count as f64));
        out.ensure_finite("l1_loss")?;
        let tracked = pred.node.is_some() || gt.node.is_some();
        Ok(self.push(
            out,
            || Op::L1 {
                pred: pred.node,
                gt: gt.node,
                pv: pred.value.clone(),
                gv: gt.value.clone(),
            },
            tracked,
        ))
    }

    /// Sum of all elements as a `(1,1,1,1)` value.
    pub fn sum(&mut self, x: &Var<T>) -> Result<Var<T>> {
        self.check_var(x)?;
        let out = Tensor::scalar(x.value.sum());
        out.ensure_finite("sum")?;
        let xi = x.node;
        let input = x.shape();
        Ok(self.push(
            out,
            || Op::Sum {
                x: xi.unwrap_or(usize::MAX),
                input,
            },
            xi.is_some(),
        ))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        if !self.recording {
            return Err(Error::State("backward on a tape that is not recording".into()));
        }
        let Some(root) = loss.node else {
            return Err(Error::State(
                "loss does not depend on any variable that requires gradients".into(),
            ));
        };
        if loss.generation != self.generation || root >= self.nodes.len() {
            return Err(Error::State("loss belongs to a different or cleared tape".into()));
        }
        if loss.shape() != Shape::scalar() {
            return Err(Error::param(format!(
                "backward needs a scalar loss, got {}",
                loss.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::scalar(T::one()));

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    xv,
                    wv,
                    dilation,
                    padding,
                } => {
                    let cg = conv::conv2d_backward(xv, wv, &g, *dilation, *padding, x.is_some())?;
                    if let Some(x) = x {
                        accumulate(&mut grads[*x], cg.input.expect("requested input gradient"))?;
                    }
                    if let Some(w) = w {
                        accumulate(&mut grads[*w], cg.weight)?;
                    }
                    if let Some(b) = b {
                        let bias = cg.bias.reshape(self.nodes[*b].shape)?;
                        accumulate(&mut grads[*b], bias)?;
                    }
                }
                Op::Activation { x, kind, saved } => {
                    let mut dx = g;
                    match kind {
                        Activation::Relu => {
                            for (d, &v) in dx.data_mut().iter_mut().zip(saved.data()) {
                                if v <= T::zero() {
                                    *d = T::zero();
                                }
                            }
                        }
                        Activation::Sigmoid => {
                            for (d, &s) in dx.data_mut().iter_mut().zip(saved.data()) {
                                *d = *d * s * (T::one() - s);
                            }
                        }
                        Activation::SoftShrink(lambda) => {
                            let l = T::of(*lambda);
                            for (d, &v) in dx.data_mut().iter_mut().zip(saved.data()) {
                                if v.abs() <= l {
                                    *d = T::zero();
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[*x], dx)?;
                }
                Op::GlobalAvgPool { x, input } => {
                    let inv = T::of(1.0 / input.plane() as f64);
                    let mut dx = Tensor::zeros(*input);
                    for (plane, &gv) in dx.data_mut().chunks_exact_mut(input.plane()).zip(g.data()) {
                        plane.fill(gv * inv);
                    }
                    accumulate(&mut grads[*x], dx)?;
                }
                Op::ChannelScale { f, r, fv, rv } => {
                    let plane = fv.shape().plane().max(1);
                    if let Some(r) = r {
                        let data: Vec<T> = g
                            .data()
                            .chunks_exact(plane)
                            .zip(fv.data().chunks_exact(plane))
                            .map(|(gp, fp)| {
                                gp.iter().zip(fp).fold(T::zero(), |a, (&x, &y)| a + x * y)
                            })
                            .collect();
                        accumulate(&mut grads[*r], Tensor::from_vec(rv.shape(), data)?)?;
                    }
                    if let Some(f) = f {
                        let mut df = g;
                        for (p, &k) in df.data_mut().chunks_exact_mut(plane).zip(rv.data()) {
                            for v in p {
                                *v = *v * k;
                            }
                        }
                        accumulate(&mut grads[*f], df)?;
                    }
                }
                Op::Add { a, b } => match (a, b) {
                    (Some(a), Some(b)) => {
                        accumulate(&mut grads[*a], g.clone())?;
                        accumulate(&mut grads[*b], g)?;
                    }
                    (Some(i), None) | (None, Some(i)) => accumulate(&mut grads[*i], g)?,
                    (None, None) => {}
                },
                Op::Concat { a, b, a_channels } => {
                    let s = g.shape();
                    let plane = s.plane();
                    let ca = *a_channels;
                    let cb = s.c - ca;
                    if let Some(a) = a {
                        let mut data = Vec::with_capacity(s.n * ca * plane);
                        for n in 0..s.n {
                            data.extend_from_slice(&g.item(n)[..ca * plane]);
                        }
                        accumulate(&mut grads[*a], Tensor::from_vec(Shape::new(s.n, ca, s.h, s.w), data)?)?;
                    }
                    if let Some(b) = b {
                        let mut data = Vec::with_capacity(s.n * cb * plane);
                        for n in 0..s.n {
                            data.extend_from_slice(&g.item(n)[ca * plane..]);
                        }
                        accumulate(&mut grads[*b], Tensor::from_vec(Shape::new(s.n, cb, s.h, s.w), data)?)?;
                    }
                }
                Op::PixelShuffle { x, scale } => {
                    accumulate(&mut grads[*x], pixel_unshuffle(&g, *scale)?)?;
                }
                Op::L1 { pred, gt, pv, gv } => {
                    let upstream = g.data()[0];
                    let scale = upstream * T::of(1.0 / pv.len() as f64);
                    let dp: Vec<T> = pv
                        .data()
                        .iter()
                        .zip(gv.data())
                        .map(|(&p, &q)| {
                            if p > q {
                                scale
                            } else if p < q {
                                -scale
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    let dp = Tensor::from_vec(pv.shape(), dp)?;
                    if let Some(gt) = gt {
                        accumulate(&mut grads[*gt], dp.map(|v| -v))?;
                    }
                    if let Some(pred) = pred {
                        accumulate(&mut grads[*pred], dp)?;
                    }
                }
                Op::Sum { x, input } => {
                    accumulate(&mut grads[*x], Tensor::full(*input, g.data()[0]))?;
                }
            }
        }
        Ok(Gradients {
            generation: self.generation,
            grads,
        })
    }
}

/// Depth-to-space rearrangement; `out[n,c,i·s+a,j·s+b] = x[n, c·s²+a·s+b, i, j]`.
pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, scale: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if scale < 2 {
        return Err(Error::param(format!("pixel shuffle scale must be >= 2, got {scale}")));
    }
    let ss = scale * scale;
    if s.c % ss != 0 {
        return Err(Error::param(format!(
            "{} channels not divisible by scale² = {ss}",
            s.c
        )));
    }
    let out_shape = Shape::new(s.n, s.c / ss, s.h * scale, s.w * scale);
    let mut out = Tensor::zeros(out_shape);
    for n in 0..s.n {
        for c in 0..out_shape.c {
            for a in 0..scale {
                for b in 0..scale {
                    let src_c = c * ss + a * scale + b;
                    for i in 0..s.h {
                        for j in 0..s.w {
                            out.set(n, c, i * scale + a, j * scale + b, x.at(n, src_c, i, j));
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Space-to-depth, the exact inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Scalar>(x: &Tensor<T>, scale: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if scale < 2 || s.h % scale != 0 || s.w % scale != 0 {
        return Err(Error::param(format!(
            "cannot unshuffle {s} by scale {scale}"
        )));
    }
    let ss = scale * scale;
    let out_shape = Shape::new(s.n, s.c * ss, s.h / scale, s.w / scale);
    let mut out = Tensor::zeros(out_shape);
    for n in 0..s.n {
        for c in 0..s.c {
            for a in 0..scale {
                for b in 0..scale {
                    let dst_c = c * ss + a * scale + b;
                    for i in 0..out_shape.h {
                        for j in 0..out_shape.w {
                            out.set(n, dst_c, i, j, x.at(n, c, i * scale + a, j * scale + b));
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}
