//! Separable cubic-convolution resampling (a = −0.5) with half-sample
//! symmetric borders. Downscaling stretches the kernel by the scale factor
//! (antialiasing); every row of weights is normalized to sum to one.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

const A: f64 = -0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Down,
    Up,
}

/// Keys' cubic convolution kernel.
pub fn cubic(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * x * x * x - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

/// Half-sample symmetric reflection into `0..n`.
fn reflect(mut j: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if j < 0 {
            j = -j - 1;
        } else if j >= n {
            j = 2 * n - 1 - j;
        } else {
            return j as usize;
        }
    }
}

/// Taps `(source index, weight)` for each output sample along one axis.
pub fn contributions(in_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = out_len as f64 / in_len as f64;
    // kernel stretch for antialiasing when shrinking
    let stretch = if scale < 1.0 { 1.0 / scale } else { 1.0 };
    let support = 2.0 * stretch;
    (0..out_len)
        .map(|o| {
            let center = (o as f64 + 0.5) / scale - 0.5;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            for j in lo..=hi {
                let w = cubic((center - j as f64) / stretch);
                if w != 0.0 {
                    let idx = reflect(j, in_len);
                    match taps.iter_mut().find(|(i, _)| *i == idx) {
                        Some(t) => t.1 += w,
                        None => taps.push((idx, w)),
                    }
                }
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

/// Resize by an integer factor; downscaling requires divisible dimensions.
pub fn bicubic_resize<T: Scalar>(img: &Tensor<T>, scale: usize, direction: Direction) -> Result<Tensor<T>> {
    if scale < 1 {
        return Err(Error::param("scale must be at least 1"));
    }
    let s = img.shape();
    let (oh, ow) = match direction {
        Direction::Down => {
            if s.h % scale != 0 || s.w % scale != 0 {
                return Err(Error::param(format!(
                    "{}x{} is not divisible by scale {scale}",
                    s.h, s.w
                )));
            }
            (s.h / scale, s.w / scale)
        }
        Direction::Up => (s.h * scale, s.w * scale),
    };
    resize_to(img, oh, ow)
}

/// Resize to an arbitrary target size.
pub fn resize_to<T: Scalar>(img: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let s = img.shape();
    if s.h == 0 || s.w == 0 || oh == 0 || ow == 0 {
        return Err(Error::param("cannot resize an empty image"));
    }
    let cols = contributions(s.w, ow);
    let rows = contributions(s.h, oh);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
    let mut tmp = vec![0.0f64; s.h * ow];
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for (x, taps) in cols.iter().enumerate() {
                    tmp[y * ow + x] = taps.iter().map(|&(j, w)| w * img.at(n, c, y, j).f64()).sum();
                }
            }
            for (y, taps) in rows.iter().enumerate() {
                for x in 0..ow {
                    let v: f64 = taps.iter().map(|&(j, w)| w * tmp[j * ow + x]).sum();
                    out.set(n, c, y, x, T::of(v));
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_shape() {
        assert_eq!(cubic(0.0), 1.0);
        assert_eq!(cubic(1.0), 0.0);
        assert_eq!(cubic(2.0), 0.0);
        assert!((cubic(0.5) - 0.5625).abs() < 1e-15);
        assert!((cubic(1.5) + 0.0625).abs() < 1e-15);
    }

    #[test]
    fn reflection() {
        assert_eq!(reflect(-1, 4), 0);
        assert_eq!(reflect(-2, 4), 1);
        assert_eq!(reflect(4, 4), 3);
        assert_eq!(reflect(5, 4), 2);
        assert_eq!(reflect(-7, 2), 1);
    }

    #[test]
    fn constants_survive_any_scale() {
        let img = Tensor::<f64>::full(Shape::new(1, 3, 12, 12), 0.37);
        for s in [2, 3, 4] {
            for dir in [Direction::Down, Direction::Up] {
                let out = bicubic_resize(&img, s, dir).unwrap();
                assert!(out.data().iter().all(|v| (v - 0.37).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn divisibility_is_checked() {
        let img = Tensor::<f64>::zeros(Shape::new(1, 1, 10, 9));
        assert!(bicubic_resize(&img, 2, Direction::Down).is_err());
        assert!(bicubic_resize(&img, 3, Direction::Up).is_ok());
    }
}
