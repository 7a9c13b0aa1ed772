//! Image quality metrics and corpus evaluation.

use std::fmt::Write as _;
use std::time::Instant;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Scalar, Shape, Tensor};

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Shape> {
    if a.shape() != b.shape() {
        return Err(Error::param(format!("shape mismatch: {} vs {}", a.shape(), b.shape())));
    }
    Ok(a.shape())
}

/// Mean squared error over every element.
pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x.f64() - y.f64()).powi(2)).sum();
    Ok(sum / a.len().max(1) as f64)
}

/// `10·log10(peak²/MSE)`, capped at [`PSNR_CAP`].
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP))
}

/// ITU-R BT.601 luma on the [0, 1] scale, studio range (16–235 of 255).
pub fn luminance<T: Scalar>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let s = img.shape();
    match s.c {
        1 => Ok(img.clone()),
        3 => Ok(Tensor::from_fn(Shape::new(s.n, 1, s.h, s.w), |n, _, y, x| {
            let (r, g, b) = (img.at(n, 0, y, x).f64(), img.at(n, 1, y, x).f64(), img.at(n, 2, y, x).f64());
            T::of((16.0 + 65.481 * r + 128.553 * g + 24.966 * b) / 255.0)
        })),
        c => Err(Error::param(format!("luminance needs 1 or 3 channels, got {c}"))),
    }
}

/// Remove `border` pixels on every side.
pub fn shave<T: Scalar>(img: &Tensor<T>, border: usize) -> Result<Tensor<T>> {
    let s = img.shape();
    if s.h <= 2 * border || s.w <= 2 * border {
        return Err(Error::param(format!("{s} is too small to shave {border} pixels")));
    }
    img.crop(border, border, s.h - 2 * border, s.w - 2 * border)
}

/// PSNR on the luminance channel after shaving `border` pixels.
pub fn psnr_y<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, border: usize) -> Result<f64> {
    same_shape(a, b)?;
    psnr(&shave(&luminance(a)?, border)?, &shave(&luminance(b)?, border)?, 1.0)
}

/// Normalized 1-D Gaussian taps.
fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut g: [f64; SSIM_WINDOW] = std::array::from_fn(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let total: f64 = g.iter().sum();
    for v in &mut g {
        *v /= total;
    }
    g
}

/// Separable valid-mode Gaussian filtering of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = g.iter().enumerate().map(|(k, t)| t * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = g.iter().enumerate().map(|(k, t)| t * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM with an 11×11 Gaussian window (σ = 1.5), evaluated only where
/// the window lies inside the image; channels are scored separately and averaged.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    let s = same_shape(a, b)?;
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::param(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {s}")));
    }
    let g = gaussian_taps();
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let plane = s.h * s.w;
    let mut total = 0.0;
    for p in 0..s.n * s.c {
        let x: Vec<f64> = a.data()[p * plane..(p + 1) * plane].iter().map(|v| v.f64()).collect();
        let y: Vec<f64> = b.data()[p * plane..(p + 1) * plane].iter().map(|v| v.f64()).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(u, v)| u * v).collect();
        let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|q| filter_valid(q, s.h, s.w, &g));
        let mut sum = 0.0;
        for i in 0..mx.len() {
            let (mu_x, mu_y) = (mx[i], my[i]);
            let var_x = sxx[i] - mu_x * mu_x;
            let var_y = syy[i] - mu_y * mu_y;
            let cov = sxy[i] - mu_x * mu_y;
            sum += ((2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2))
                / ((mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2));
        }
        total += sum / mx.len() as f64;
    }
    Ok(total / (s.n * s.c) as f64)
}

/// Anything that maps a degraded image to a restored one.
pub trait Restorer<T: Scalar>: Sync {
    fn restore(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
    /// Short identifier written into reports.
    fn id(&self) -> String;
}

/// Returns its input unchanged.
pub struct Identity;

impl<T: Scalar> Restorer<T> for Identity {
    fn restore(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.clone())
    }

    fn id(&self) -> String {
        "identity".into()
    }
}

/// A model, optionally wrapped in the eight-fold geometric ensemble.
pub struct ModelRestorer<'a, T: Scalar> {
    pub model: &'a Model<T>,
    pub ensemble: bool,
    pub id: String,
}

impl<T: Scalar> Restorer<T> for ModelRestorer<'_, T> {
    fn restore(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if self.ensemble {
            self.model.self_ensemble(x)
        } else {
            self.model.infer(x)
        }
    }

    fn id(&self) -> String {
        if self.ensemble {
            format!("{}+ensemble", self.id)
        } else {
            self.id.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub name: String,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub seconds: f64,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Means over rows that produced a value.
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub degradation: String,
    pub model_id: String,
}

impl EvalReport {
    pub fn summary_line(&self) -> String {
        format!("mean_psnr={:.4} mean_ssim={:.6}", self.mean_psnr, self.mean_ssim)
    }

    /// CSV rows followed by the summary line.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# model={} degradation={}", self.model_id, self.degradation);
        out.push_str("index,name,psnr,ssim,seconds,error\n");
        let opt = |v: Option<f64>, digits: usize| v.map(|v| format!("{v:.digits$}")).unwrap_or_default();
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(
                out,
                "{i},{},{},{},{:.3},{}",
                r.name.replace(',', "_"),
                opt(r.psnr, 4),
                opt(r.ssim, 6),
                r.seconds,
                r.error.as_deref().unwrap_or("").replace([',', '\n'], " ")
            );
        }
        out.push_str(&self.summary_line());
        out.push('\n');
        out
    }
}

/// Restore every image in `ds` and score it against the clean target.
/// Super-resolution is scored on luminance with a border of `scale` pixels
/// removed; restoration on all channels. Failures become rows with an error.
pub fn evaluate<T: Scalar>(restorer: &dyn Restorer<T>, ds: &Dataset<T>) -> EvalReport {
    let scale = ds.scale();
    let rows: Vec<EvalRow> = (0..ds.len())
        .map(|i| {
            let start = Instant::now();
            let scored = (|| -> Result<(f64, f64)> {
                let target = ds.target(i)?;
                let out = restorer.restore(&ds.input(i)?)?;
                if out.shape() != target.shape() {
                    return Err(Error::param(format!(
                        "output {} does not match target {}",
                        out.shape(),
                        target.shape()
                    )));
                }
                if scale > 1 {
                    Ok((psnr_y(&out, &target, scale)?, ssim(&shave(&out, scale)?, &shave(&target, scale)?, 1.0)?))
                } else {
                    Ok((psnr(&out, &target, 1.0)?, ssim(&out, &target, 1.0)?))
                }
            })();
            let seconds = start.elapsed().as_secs_f64();
            let name = ds.samples()[i].name.clone();
            match scored {
                Ok((p, s)) => EvalRow { name, psnr: Some(p), ssim: Some(s), seconds, error: None },
                Err(e) => EvalRow { name, psnr: None, ssim: None, seconds, error: Some(e.to_string()) },
            }
        })
        .collect();
    let mean = |f: fn(&EvalRow) -> Option<f64>| {
        let vals: Vec<f64> = rows.iter().filter_map(f).collect();
        if vals.is_empty() {
            f64::NAN
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    let degradation = match ds.pairing() {
        crate::data::Pairing::OnTheFly(spec) => spec.to_string(),
        crate::data::Pairing::PairedFiles { scale } => format!("paired scale={scale}"),
    };
    EvalReport {
        mean_psnr: mean(|r| r.psnr),
        mean_ssim: mean(|r| r.ssim),
        rows,
        degradation,
        model_id: restorer.id(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_closed_forms() {
        let a = Tensor::<f64>::full(Shape::new(1, 3, 4, 4), 100.0);
        let b = Tensor::<f64>::full(Shape::new(1, 3, 4, 4), 116.0);
        let expected = 10.0 * (255.0f64 * 255.0 / 256.0).log10();
        assert!((psnr(&a, &b, 255.0).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 24.048).abs() < 1e-3);
        assert_eq!(psnr(&a, &a, 255.0).unwrap(), PSNR_CAP);
        let z = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2));
        let o = Tensor::<f64>::full(Shape::new(1, 1, 2, 2), 1.0);
        assert!(psnr(&z, &o, 1.0).unwrap().abs() < 1e-12);
        assert!(psnr(&z, &a, 1.0).is_err());
    }

    #[test]
    fn gaussian_window() {
        let g = gaussian_taps();
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(g[0], g[10]);
        assert!(g[5] > g[4]);
    }

    #[test]
    fn ssim_basics() {
        let a = Tensor::<f64>::from_fn(Shape::new(1, 1, 16, 16), |_, _, y, x| ((y * 5 + x * 3) % 7) as f64 / 7.0);
        assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
        let inv = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &inv, 1.0).unwrap() < 1.0);
        let small = Tensor::<f64>::zeros(Shape::new(1, 1, 10, 16));
        assert!(ssim(&small, &small, 1.0).is_err());
    }

    #[test]
    fn luminance_of_white_and_black() {
        let w = Tensor::<f64>::full(Shape::new(1, 3, 1, 1), 1.0);
        assert!((luminance(&w).unwrap().at(0, 0, 0, 0) - 235.0 / 255.0).abs() < 1e-12);
        let k = Tensor::<f64>::zeros(Shape::new(1, 3, 1, 1));
        assert!((luminance(&k).unwrap().at(0, 0, 0, 0) - 16.0 / 255.0).abs() < 1e-12);
    }
}
