//! The eight dihedral transforms of a square (four rotations, optionally
//! preceded by a horizontal flip).
//!
//! Variant `k` means: flip horizontally if `k >= 4`, then rotate
//! counter-clockwise by `90° · (k % 4)`.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

pub const VARIANTS: usize = 8;

/// Variant `k'` with `dihedral(dihedral(x, k), k') == x`.
pub fn inverse_variant(k: usize) -> usize {
    let k = k % VARIANTS;
    if k >= 4 {
        // flips composed with rotations are reflections, hence involutions
        k
    } else {
        (4 - k) % 4
    }
}

/// Variant equal to applying `first` and then `second`.
pub fn compose(first: usize, second: usize) -> usize {
    let (f1, r1) = (first % VARIANTS >= 4, first % 4);
    let (f2, r2) = (second % VARIANTS >= 4, second % 4);
    // R^r2 H^f2 R^r1 H^f1; moving H past R^r1 turns it into R^-r1
    let r = if f2 { r2 + 4 - r1 } else { r2 + r1 } % 4;
    r + if f1 ^ f2 { 4 } else { 0 }
}

/// Apply a dihedral transform to every plane. Non-square planes are
/// allowed; odd rotations swap height and width.
pub fn dihedral<T: Scalar>(x: &Tensor<T>, k: usize) -> Tensor<T> {
    let s = x.shape();
    let k = k % VARIANTS;
    let flip = k >= 4;
    let rot = k % 4;
    let (oh, ow) = if rot % 2 == 1 { (s.w, s.h) } else { (s.h, s.w) };
    let out_shape = Shape::new(s.n, s.c, oh, ow);
    Tensor::from_fn(out_shape, |n, c, i, j| {
        // source coordinates of output (i, j) under a counter-clockwise rotation
        let (y, xx) = match rot {
            0 => (i, j),
            1 => (j, s.w - 1 - i),
            2 => (s.h - 1 - i, s.w - 1 - j),
            _ => (s.h - 1 - j, i),
        };
        let xx = if flip { s.w - 1 - xx } else { xx };
        x.at(n, c, y, xx)
    })
}

/// Training augmentation; rotations require square patches.
pub fn augment<T: Scalar>(patch: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    if k >= VARIANTS {
        return Err(Error::param(format!("augmentation variant {k} out of 0..8")));
    }
    let s = patch.shape();
    if k % 2 == 1 && s.h != s.w {
        return Err(Error::param(format!(
            "variant {k} rotates a non-square {}x{} patch",
            s.h, s.w
        )));
    }
    Ok(dihedral(patch, k))
}
