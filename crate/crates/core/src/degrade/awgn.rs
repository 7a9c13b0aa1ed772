//! Additive white Gaussian noise from a counter-based generator: sample `i`
//! depends only on `(seed, i)`, so noise fields are reproducible regardless
//! of the order or thread in which they are produced.

use std::f64::consts::TAU;

use crate::tensor::{Scalar, Tensor};

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// 64 random bits for `(key, counter)`.
#[inline]
pub fn counter_bits(key: u64, counter: u64) -> u64 {
    mix(mix(key ^ 0x6a09_e667_f3bc_c909) ^ counter.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Derive an independent seed for sub-stream `index`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    counter_bits(seed, index ^ 0xd1b5_4a32_d192_ed03)
}

/// Standard normal sample number `index` of stream `seed` (Box–Muller, cosine branch).
pub fn standard_normal(seed: u64, index: u64) -> f64 {
    let a = counter_bits(seed, 2 * index);
    let b = counter_bits(seed, 2 * index + 1);
    // u1 in (0, 1], u2 in [0, 1)
    let u1 = ((a >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
    let u2 = (b >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
}

/// `img + n` with `n ~ N(0, (σ/255)²)`; `sigma255` is on the 0–255 scale.
/// The result is not clipped.
pub fn awgn<T: Scalar>(img: &Tensor<T>, sigma255: f64, seed: u64) -> Tensor<T> {
    let std = sigma255 / 255.0;
    let mut out = img.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = T::of(v.f64() + std * standard_normal(seed, i as u64));
    }
    out
}
