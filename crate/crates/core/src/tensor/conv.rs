//! Stride-1 dilated 2-D convolution.
//!
//! The fast path unfolds the input into column blocks (im2col) and hands
//! them to a GEMM kernel. Work is split into `(batch item, column chunk)`
//! tasks with a fixed chunk size and every reduction happens in a fixed
//! order, so results do not depend on the number of worker threads.
//! [`conv2d_direct`] is the plain nested-loop definition.

use rayon::prelude::*;

use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Output positions handled by one im2col/GEMM task.
const CHUNK: usize = 1024;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    c_in: usize,
    c_out: usize,
    k: usize,
    dilation: usize,
    padding: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    /// 1×1 kernels without padding read the input directly as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.padding == 0
    }
}

/// Spatial output extent of a stride-1 convolution, or `None` if it collapses.
pub fn output_extent(input: usize, k: usize, dilation: usize, padding: usize) -> Option<usize> {
    let span = dilation * (k - 1);
    (input + 2 * padding).checked_sub(span).filter(|&v| v > 0)
}

fn geometry(
    x: Shape,
    weight: Shape,
    bias_len: usize,
    dilation: usize,
    padding: usize,
) -> Result<Geometry> {
    if weight.h != weight.w {
        return Err(Error::Unsupported(format!(
            "non-square kernel {}x{}",
            weight.h, weight.w
        )));
    }
    let k = weight.h;
    if k % 2 == 0 {
        return Err(Error::Unsupported(format!("even kernel size {k}")));
    }
    if dilation == 0 {
        return Err(Error::param("dilation must be at least 1"));
    }
    if x.c != weight.c {
        return Err(Error::param(format!(
            "input has {} channels but kernel expects {}",
            x.c, weight.c
        )));
    }
    if bias_len != weight.n {
        return Err(Error::param(format!(
            "bias has {bias_len} entries for {} output channels",
            weight.n
        )));
    }
    let ho = output_extent(x.h, k, dilation, padding);
    let wo = output_extent(x.w, k, dilation, padding);
    let (Some(ho), Some(wo)) = (ho, wo) else {
        return Err(Error::param(format!(
            "input {x} too small for {k}x{k} kernel at dilation {dilation}"
        )));
    };
    Ok(Geometry {
        c_in: weight.c,
        c_out: weight.n,
        k,
        dilation,
        padding,
        h: x.h,
        w: x.w,
        ho,
        wo,
    })
}

/// Visit every row segment of output positions `[j0, j0+len)` that maps to
/// one input row for kernel tap `(ky, kx)`.
///
/// The callback receives `(col offset, segment length, input row or None,
/// first valid column in segment, valid count, input column of first valid)`.
#[inline]
fn for_each_segment(
    g: &Geometry,
    ky: usize,
    kx: usize,
    j0: usize,
    len: usize,
    mut f: impl FnMut(usize, usize, Option<usize>, usize, usize, usize),
) {
    let dy = (ky * g.dilation) as isize - g.padding as isize;
    let dx = (kx * g.dilation) as isize - g.padding as isize;
    let end = j0 + len;
    let mut j = j0;
    while j < end {
        let oy = j / g.wo;
        let ox0 = j % g.wo;
        let seg = (g.wo - ox0).min(end - j);
        let iy = oy as isize + dy;
        let col = j - j0;
        if iy < 0 || iy >= g.h as isize {
            f(col, seg, None, 0, 0, 0);
        } else {
            // valid ox satisfy 0 <= ox + dx < w
            let lo = (ox0 as isize).max(-dx);
            let hi = ((ox0 + seg) as isize).min(g.w as isize - dx);
            if hi <= lo {
                f(col, seg, Some(iy as usize), 0, 0, 0);
            } else {
                let first = (lo - ox0 as isize) as usize;
                let count = (hi - lo) as usize;
                f(col, seg, Some(iy as usize), first, count, (lo + dx) as usize);
            }
        }
        j += seg;
    }
}

fn im2col<T: Scalar>(x: &[T], g: &Geometry, j0: usize, len: usize, cols: &mut [T]) {
    let plane = g.h * g.w;
    for ci in 0..g.c_in {
        let src = &x[ci * plane..(ci + 1) * plane];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let row = &mut cols[r * len..(r + 1) * len];
                for_each_segment(g, ky, kx, j0, len, |col, seg, iy, first, count, ix| {
                    let dst = &mut row[col..col + seg];
                    match iy {
                        None => dst.fill(T::zero()),
                        Some(iy) => {
                            dst[..first].fill(T::zero());
                            let s = iy * g.w + ix;
                            dst[first..first + count].copy_from_slice(&src[s..s + count]);
                            dst[first + count..].fill(T::zero());
                        }
                    }
                });
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], g: &Geometry, j0: usize, len: usize, dx: &mut [T]) {
    let plane = g.h * g.w;
    for ci in 0..g.c_in {
        let dst = &mut dx[ci * plane..(ci + 1) * plane];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let row = &cols[r * len..(r + 1) * len];
                for_each_segment(g, ky, kx, j0, len, |col, _seg, iy, first, count, ix| {
                    if let Some(iy) = iy {
                        let s = iy * g.w + ix;
                        let src = &row[col + first..col + first + count];
                        for (d, &v) in dst[s..s + count].iter_mut().zip(src) {
                            *d = *d + v;
                        }
                    }
                });
            }
        }
    }
}

fn chunks(total: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..total)
        .step_by(CHUNK)
        .map(move |j0| (j0, CHUNK.min(total - j0)))
}

/// Fast convolution: `y[n,o] = b[o] + Σ_i w[o,i] ⋆ x[n,i]` with zero padding.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    dilation: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = geometry(x.shape(), weight.shape(), bias.len(), dilation, padding)?;
    let xs = x.shape();
    let out_plane = g.out_plane();
    let kk = g.patch_len();
    let tasks: Vec<(usize, usize, usize)> = (0..xs.n)
        .flat_map(|n| chunks(out_plane).map(move |(j0, len)| (n, j0, len)))
        .collect();

    let blocks: Vec<Vec<T>> = tasks
        .par_iter()
        .map(|&(n, j0, len)| {
            let xin = x.item(n);
            let mut y = vec![T::zero(); g.c_out * len];
            if g.is_pointwise() {
                T::gemm(
                    g.c_out,
                    kk,
                    len,
                    weight.data(),
                    (kk as isize, 1),
                    &xin[j0..],
                    ((g.h * g.w) as isize, 1),
                    T::zero(),
                    &mut y,
                    (len as isize, 1),
                );
            } else {
                let mut cols = vec![T::zero(); kk * len];
                im2col(xin, &g, j0, len, &mut cols);
                T::gemm(
                    g.c_out,
                    kk,
                    len,
                    weight.data(),
                    (kk as isize, 1),
                    &cols,
                    (len as isize, 1),
                    T::zero(),
                    &mut y,
                    (len as isize, 1),
                );
            }
            for (o, row) in y.chunks_exact_mut(len).enumerate() {
                let b = bias.data()[o];
                for v in row {
                    *v = *v + b;
                }
            }
            y
        })
        .collect();

    let out_shape = Shape::new(xs.n, g.c_out, g.ho, g.wo);
    let mut out = Tensor::zeros(out_shape);
    let data = out.data_mut();
    for (&(n, j0, len), y) in tasks.iter().zip(&blocks) {
        for o in 0..g.c_out {
            let dst = out_shape.index(n, o, 0, 0) + j0;
            data[dst..dst + len].copy_from_slice(&y[o * len..(o + 1) * len]);
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to its input, weight and bias.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    dilation: usize,
    padding: usize,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let g = geometry(x.shape(), weight.shape(), weight.shape().n, dilation, padding)?;
    let xs = x.shape();
    let expected = Shape::new(xs.n, g.c_out, g.ho, g.wo);
    if grad_out.shape() != expected {
        return Err(Error::param(format!(
            "upstream gradient {} does not match conv output {expected}",
            grad_out.shape()
        )));
    }
    let kk = g.patch_len();
    let out_plane = g.out_plane();

    let per_item: Vec<(Vec<T>, Vec<T>, Option<Vec<T>>)> = (0..xs.n)
        .into_par_iter()
        .map(|n| {
            let xin = x.item(n);
            let dy = grad_out.item(n);
            let mut dw = vec![T::zero(); g.c_out * kk];
            let db: Vec<T> = dy
                .chunks_exact(out_plane)
                .map(|row| row.iter().fold(T::zero(), |a, &v| a + v))
                .collect();
            let mut dx = need_input.then(|| vec![T::zero(); xs.item()]);
            let mut cols = if g.is_pointwise() {
                Vec::new()
            } else {
                vec![T::zero(); kk * CHUNK.min(out_plane)]
            };
            let mut dcols = vec![T::zero(); kk * CHUNK.min(out_plane)];
            for (j0, len) in chunks(out_plane) {
                let dy_chunk = &dy[j0..];
                let (src, src_strides): (&[T], (isize, isize)) = if g.is_pointwise() {
                    (&xin[j0..], ((g.h * g.w) as isize, 1))
                } else {
                    let cols = &mut cols[..kk * len];
                    im2col(xin, &g, j0, len, cols);
                    (cols, (len as isize, 1))
                };
                // dW += dY · colsᵀ
                T::gemm(
                    g.c_out,
                    len,
                    kk,
                    dy_chunk,
                    (out_plane as isize, 1),
                    src,
                    (src_strides.1, src_strides.0),
                    T::one(),
                    &mut dw,
                    (kk as isize, 1),
                );
                if let Some(dx) = dx.as_mut() {
                    let dcols = &mut dcols[..kk * len];
                    // dcols = Wᵀ · dY
                    T::gemm(
                        kk,
                        g.c_out,
                        len,
                        weight.data(),
                        (1, kk as isize),
                        dy_chunk,
                        (out_plane as isize, 1),
                        T::zero(),
                        dcols,
                        (len as isize, 1),
                    );
                    if g.is_pointwise() {
                        for ci in 0..g.c_in {
                            let dst = &mut dx[ci * out_plane + j0..ci * out_plane + j0 + len];
                            for (d, &v) in dst.iter_mut().zip(&dcols[ci * len..(ci + 1) * len]) {
                                *d = *d + v;
                            }
                        }
                    } else {
                        col2im_add(dcols, &g, j0, len, dx);
                    }
                }
            }
            (dw, db, dx)
        })
        .collect();

    let mut dw = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros(Shape::new(1, g.c_out, 1, 1));
    let mut dx = need_input.then(|| Tensor::zeros(xs));
    for (n, (w_part, b_part, x_part)) in per_item.into_iter().enumerate() {
        for (a, b) in dw.data_mut().iter_mut().zip(w_part) {
            *a = *a + b;
        }
        for (a, b) in db.data_mut().iter_mut().zip(b_part) {
            *a = *a + b;
        }
        if let (Some(dx), Some(part)) = (dx.as_mut(), x_part) {
            dx.item_mut(n).copy_from_slice(&part);
        }
    }
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

/// Direct nested-loop convolution, the definition the fast path must match.
pub fn conv2d_direct<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    dilation: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = geometry(x.shape(), weight.shape(), bias.len(), dilation, padding)?;
    let xs = x.shape();
    let mut out = Tensor::zeros(Shape::new(xs.n, g.c_out, g.ho, g.wo));
    for n in 0..xs.n {
        for o in 0..g.c_out {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = bias.data()[o];
                    for i in 0..g.c_in {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = (oy + ky * dilation) as isize - padding as isize;
                                let ix = (ox + kx * dilation) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                                    continue;
                                }
                                acc = acc
                                    + weight.at(o, i, ky, kx) * x.at(n, i, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(n, o, oy, ox, acc);
                }
            }
        }
    }
    Ok(out)
}
