//! Synthetic corruptions: additive Gaussian noise, bicubic downscaling and a
//! JPEG transform simulator.

mod awgn;
mod bicubic;
mod jpeg;

use std::fmt;
use std::str::FromStr;

pub use awgn::{awgn, counter_bits, derive_seed, standard_normal};
pub use bicubic::{bicubic_resize, contributions, cubic, resize_to, Direction};
pub use jpeg::{blockiness, dct8x8, idct8x8, jpeg_compress_sim, jpeg_with_table, quality_table, LUMA_TABLE};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DegradationKind {
    /// Noise level on the 0–255 scale.
    Awgn { sigma: f64 },
    BicubicDown { scale: usize },
    Jpeg { quality: u32 },
}

/// A corruption and the seed that makes it reproducible.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn awgn(sigma: f64, seed: u64) -> Self {
        DegradationSpec {
            kind: DegradationKind::Awgn { sigma },
            seed,
        }
    }

    pub fn bicubic(scale: usize) -> Self {
        DegradationSpec {
            kind: DegradationKind::BicubicDown { scale },
            seed: 0,
        }
    }

    pub fn jpeg(quality: u32) -> Self {
        DegradationSpec {
            kind: DegradationKind::Jpeg { quality },
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            DegradationKind::Awgn { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                Err(Error::param(format!("sigma must be positive, got {sigma}")))
            }
            DegradationKind::BicubicDown { scale } if !(2..=4).contains(&scale) => {
                Err(Error::param(format!("bicubic scale must be 2, 3 or 4, got {scale}")))
            }
            DegradationKind::Jpeg { quality } if !(1..=100).contains(&quality) => {
                Err(Error::param(format!("JPEG quality must be in 1..=100, got {quality}")))
            }
            _ => Ok(()),
        }
    }

    /// Spatial reduction factor between target and degraded input.
    pub fn scale(&self) -> usize {
        match self.kind {
            DegradationKind::BicubicDown { scale } => scale,
            _ => 1,
        }
    }

    /// Degrade with this spec's own seed.
    pub fn apply<T: Scalar>(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply_seeded(img, self.seed)
    }

    /// Degrade with an explicit seed (only noise consumes it).
    pub fn apply_seeded<T: Scalar>(&self, img: &Tensor<T>, seed: u64) -> Result<Tensor<T>> {
        self.validate()?;
        match self.kind {
            DegradationKind::Awgn { sigma } => Ok(awgn(img, sigma, seed)),
            DegradationKind::BicubicDown { scale } => bicubic_resize(img, scale, Direction::Down),
            DegradationKind::Jpeg { quality } => jpeg_compress_sim(img, quality),
        }
    }

    /// Seed used for item `index` of a corpus.
    pub fn item_seed(&self, index: u64) -> u64 {
        derive_seed(self.seed, index)
    }
}

impl fmt::Display for DegradationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            DegradationKind::Awgn { sigma } => write!(f, "kind=awgn sigma={sigma}")?,
            DegradationKind::BicubicDown { scale } => write!(f, "kind=bicubic scale={scale}")?,
            DegradationKind::Jpeg { quality } => write!(f, "kind=jpeg quality={quality}")?,
        }
        write!(f, " seed={}", self.seed)
    }
}

impl FromStr for DegradationSpec {
    type Err = Error;

    /// Parse `kind=awgn sigma=25 seed=7`; tokens are whitespace separated
    /// and may appear in any order.
    fn from_str(s: &str) -> Result<Self> {
        let mut kind = None;
        let mut sigma = None;
        let mut scale = None;
        let mut quality = None;
        let mut seed = 0u64;
        fn num<V: FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .parse()
                .map_err(|_| Error::param(format!("degradation {key}: cannot parse '{value}'")))
        }
        for token in s.split_whitespace() {
            let (key, value) = token
                .split_once('=')
                .ok_or_else(|| Error::param(format!("degradation: expected key=value, got '{token}'")))?;
            match key {
                "kind" => kind = Some(value.to_string()),
                "sigma" => sigma = Some(num::<f64>(key, value)?),
                "scale" => scale = Some(num::<usize>(key, value)?),
                "quality" => quality = Some(num::<u32>(key, value)?),
                "seed" => seed = num(key, value)?,
                _ => return Err(Error::param(format!("degradation: unknown key '{key}'"))),
            }
        }
        let missing = |k: &str| Error::param(format!("degradation: missing {k}"));
        let kind = match kind.as_deref() {
            Some("awgn") => DegradationKind::Awgn {
                sigma: sigma.ok_or_else(|| missing("sigma"))?,
            },
            Some("bicubic") | Some("bicubic_down") => DegradationKind::BicubicDown {
                scale: scale.ok_or_else(|| missing("scale"))?,
            },
            Some("jpeg") => DegradationKind::Jpeg {
                quality: quality.ok_or_else(|| missing("quality"))?,
            },
            Some(other) => return Err(Error::param(format!("degradation: unknown kind '{other}'"))),
            None => return Err(missing("kind")),
        };
        let spec = DegradationSpec { kind, seed };
        spec.validate()?;
        Ok(spec)
    }
}
