//! Lossy half of a baseline JPEG encoder: 8×8 orthonormal DCT on
//! level-shifted 0–255 samples, quantize, dequantize, inverse DCT. No
//! entropy coding, no chroma subsampling; each channel uses the luminance
//! table. Pixel values are neither rounded nor clipped afterwards.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Standard luminance quantization table (ITU T.81 Annex K), row-major.
pub const LUMA_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Luminance table scaled for quality `q` in `1..=100`.
pub fn quality_table(q: u32) -> Result<[f64; 64]> {
    if !(1..=100).contains(&q) {
        return Err(Error::param(format!("JPEG quality must be in 1..=100, got {q}")));
    }
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut t = [0.0; 64];
    for (dst, &base) in t.iter_mut().zip(LUMA_TABLE.iter()) {
        *dst = ((base as u32 * scale + 50) / 100).clamp(1, 255) as f64;
    }
    Ok(t)
}

/// `basis[u][x] = α(u)·cos((2x+1)uπ/16)`; orthonormal, so the inverse is the transpose.
fn basis() -> &'static [[f64; 8]; 8] {
    static B: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    B.get_or_init(|| {
        let mut b = [[0.0; 8]; 8];
        for (u, row) in b.iter_mut().enumerate() {
            let alpha = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
            for (x, v) in row.iter_mut().enumerate() {
                *v = alpha * ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0).cos();
            }
        }
        b
    })
}

/// Forward 2-D DCT of one block.
pub fn dct8x8(block: &[f64; 64]) -> [f64; 64] {
    let b = basis();
    let mut tmp = [0.0; 64];
    for u in 0..8 {
        for x in 0..8 {
            tmp[u * 8 + x] = (0..8).map(|y| b[u][y] * block[y * 8 + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for u in 0..8 {
        for v in 0..8 {
            out[u * 8 + v] = (0..8).map(|x| tmp[u * 8 + x] * b[v][x]).sum();
        }
    }
    out
}

/// Inverse 2-D DCT of one block.
pub fn idct8x8(coef: &[f64; 64]) -> [f64; 64] {
    let b = basis();
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for v in 0..8 {
            tmp[y * 8 + v] = (0..8).map(|u| b[u][y] * coef[u * 8 + v]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            out[y * 8 + x] = (0..8).map(|v| tmp[y * 8 + v] * b[v][x]).sum();
        }
    }
    out
}

/// Quantize/dequantize one coefficient block in place.
fn quantize(coef: &mut [f64; 64], table: &[f64; 64]) {
    for (c, q) in coef.iter_mut().zip(table.iter()) {
        *c = (*c / q).round() * q;
    }
}

/// Simulated JPEG at quality `q`.
pub fn jpeg_compress_sim<T: Scalar>(img: &Tensor<T>, quality: u32) -> Result<Tensor<T>> {
    let table = quality_table(quality)?;
    Ok(jpeg_with_table(img, Some(&table)))
}

/// Run the transform path with an arbitrary quantization table; `None`
/// skips quantization entirely. Edges are padded to a multiple of 8 by
/// replication and cropped afterwards.
pub fn jpeg_with_table<T: Scalar>(img: &Tensor<T>, table: Option<&[f64; 64]>) -> Tensor<T> {
    let s = img.shape();
    let mut out = img.clone();
    let (bh, bw) = (s.h.div_ceil(8), s.w.div_ceil(8));
    for n in 0..s.n {
        for c in 0..s.c {
            for by in 0..bh {
                for bx in 0..bw {
                    let mut block = [0.0; 64];
                    for y in 0..8 {
                        for x in 0..8 {
                            let sy = (by * 8 + y).min(s.h - 1);
                            let sx = (bx * 8 + x).min(s.w - 1);
                            block[y * 8 + x] = img.at(n, c, sy, sx).f64() * 255.0 - 128.0;
                        }
                    }
                    let mut coef = dct8x8(&block);
                    if let Some(table) = table {
                        quantize(&mut coef, table);
                    }
                    let rec = idct8x8(&coef);
                    for y in 0..8 {
                        for x in 0..8 {
                            let (oy, ox) = (by * 8 + y, bx * 8 + x);
                            if oy < s.h && ox < s.w {
                                out.set(n, c, oy, ox, T::of((rec[y * 8 + x] + 128.0) / 255.0));
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Mean absolute step across 8-pixel block boundaries minus the mean
/// absolute step between interior neighbours, both directions pooled.
/// Positive values indicate visible blocking.
pub fn blockiness<T: Scalar>(img: &Tensor<T>) -> f64 {
    let s = img.shape();
    let (mut edge, mut ne) = (0.0, 0usize);
    let (mut inner, mut ni) = (0.0, 0usize);
    let mut tally = |d: f64, boundary: bool| {
        if boundary {
            edge += d;
            ne += 1;
        } else {
            inner += d;
            ni += 1;
        }
    };
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for x in 1..s.w {
                    tally((img.at(n, c, y, x).f64() - img.at(n, c, y, x - 1).f64()).abs(), x % 8 == 0);
                }
            }
            for y in 1..s.h {
                for x in 0..s.w {
                    tally((img.at(n, c, y, x).f64() - img.at(n, c, y - 1, x).f64()).abs(), y % 8 == 0);
                }
            }
        }
    }
    edge / ne.max(1) as f64 - inner / ni.max(1) as f64
}
