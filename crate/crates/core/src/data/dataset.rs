use rand::Rng;

use super::augment::{dihedral, VARIANTS};
use super::image_io::read_image;
use super::manifest::Manifest;
use crate::degrade::DegradationSpec;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Tile edge used when ingesting large training images.
pub const TILE: usize = 512;

/// How degraded inputs are obtained.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Pairing {
    /// Corrupt clean images on demand.
    OnTheFly(DegradationSpec),
    /// Degraded images come from files; `scale` is the clean/degraded size ratio.
    PairedFiles { scale: usize },
}

impl Pairing {
    pub fn scale(&self) -> usize {
        match self {
            Pairing::OnTheFly(spec) => spec.scale(),
            Pairing::PairedFiles { scale } => *scale,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sample<T: Scalar> {
    pub name: String,
    pub clean: Tensor<T>,
    pub degraded: Option<Tensor<T>>,
}

/// Images held in memory, read-only once built.
#[derive(Clone, Debug)]
pub struct Dataset<T: Scalar> {
    samples: Vec<Sample<T>>,
    pairing: Pairing,
}

fn size_ratio(clean: (usize, usize), degraded: (usize, usize)) -> Option<usize> {
    (1..=4).find(|&s| clean == (degraded.0 * s, degraded.1 * s))
}

impl<T: Scalar> Dataset<T> {
    /// Validate and wrap samples. Paired samples must all share one size ratio.
    pub fn new(samples: Vec<Sample<T>>, pairing: Pairing) -> Result<Self> {
        for s in &samples {
            let cs = s.clean.shape();
            if cs.n != 1 {
                return Err(Error::param(format!("{}: expected a single image, got {cs}", s.name)));
            }
            match (&pairing, &s.degraded) {
                (Pairing::OnTheFly(spec), _) => spec.validate()?,
                (Pairing::PairedFiles { scale }, Some(d)) => {
                    let ds = d.shape();
                    if ds.c != cs.c || size_ratio((cs.h, cs.w), (ds.h, ds.w)) != Some(*scale) {
                        return Err(Error::param(format!(
                            "{}: degraded {ds} does not match clean {cs} at scale {scale}",
                            s.name
                        )));
                    }
                }
                (Pairing::PairedFiles { .. }, None) => {
                    return Err(Error::param(format!("{}: no degraded image", s.name)));
                }
            }
        }
        Ok(Dataset { samples, pairing })
    }

    /// Read every image in `manifest`. With `spec` the degraded paths are
    /// ignored and corruption happens on the fly; without it every entry must
    /// be paired. `tile` splits images larger than that edge into tiles.
    pub fn load(manifest: &Manifest, spec: Option<DegradationSpec>, tile: Option<usize>) -> Result<Self> {
        let mut samples = Vec::new();
        let mut scale = None;
        for entry in &manifest.entries {
            let name = entry
                .clean
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let clean = read_image::<T>(&entry.clean)?;
            let degraded = match (&spec, &entry.degraded) {
                (Some(_), _) => None,
                (None, Some(path)) => {
                    let d = read_image::<T>(path)?;
                    let (cs, ds) = (clean.shape(), d.shape());
                    let s = size_ratio((cs.h, cs.w), (ds.h, ds.w)).ok_or_else(|| {
                        Error::param(format!("{name}: degraded {ds} does not match clean {cs}"))
                    })?;
                    if *scale.get_or_insert(s) != s {
                        return Err(Error::param(format!("{name}: inconsistent clean/degraded size ratio")));
                    }
                    Some(d)
                }
                (None, None) => {
                    return Err(Error::param(format!(
                        "{name}: no degraded image and no degradation spec"
                    )))
                }
            };
            samples.push(Sample { name, clean, degraded });
        }
        let pairing = match spec {
            Some(spec) => Pairing::OnTheFly(spec),
            None => Pairing::PairedFiles { scale: scale.unwrap_or(1) },
        };
        if let Some(edge) = tile {
            samples = tile_samples(samples, pairing.scale(), edge)?;
        }
        Self::new(samples, pairing)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample<T>] {
        &self.samples
    }

    pub fn pairing(&self) -> Pairing {
        self.pairing
    }

    pub fn scale(&self) -> usize {
        self.pairing.scale()
    }

    /// Indices of samples big enough for `patch`×`patch` inputs.
    pub fn eligible(&self, patch: usize) -> Vec<usize> {
        let s = self.scale();
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, x)| {
                let cs = x.clean.shape();
                cs.h >= patch * s && cs.w >= patch * s
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// Ground truth for sample `i`, cropped to a multiple of the scale.
    pub fn target(&self, i: usize) -> Result<Tensor<T>> {
        let clean = &self.samples[i].clean;
        let s = self.scale();
        let cs = clean.shape();
        clean.crop(0, 0, cs.h - cs.h % s, cs.w - cs.w % s)
    }

    /// Network input for sample `i`; on-the-fly noise is seeded by the index.
    pub fn input(&self, i: usize) -> Result<Tensor<T>> {
        match (&self.pairing, &self.samples[i].degraded) {
            (Pairing::OnTheFly(spec), _) => spec.apply_seeded(&self.target(i)?, spec.item_seed(i as u64)),
            (Pairing::PairedFiles { .. }, Some(d)) => Ok(d.clone()),
            (Pairing::PairedFiles { .. }, None) => Err(Error::param("paired sample without degraded image")),
        }
    }
}

/// Split images into tiles of at most `edge` (rounded down to a multiple
/// of `scale`) on the clean side.
fn tile_samples<T: Scalar>(samples: Vec<Sample<T>>, scale: usize, edge: usize) -> Result<Vec<Sample<T>>> {
    let edge = edge - edge % scale;
    if edge == 0 {
        return Err(Error::param("tile edge is smaller than the scale factor"));
    }
    let mut out = Vec::new();
    for s in samples {
        let cs = s.clean.shape();
        if cs.h <= edge && cs.w <= edge {
            out.push(s);
            continue;
        }
        for (ty, top) in (0..cs.h).step_by(edge).enumerate() {
            for (tx, left) in (0..cs.w).step_by(edge).enumerate() {
                let th = edge.min(cs.h - top);
                let tw = edge.min(cs.w - left);
                let th = th - th % scale;
                let tw = tw - tw % scale;
                if th == 0 || tw == 0 {
                    continue;
                }
                let degraded = match &s.degraded {
                    Some(d) => Some(d.crop(top / scale, left / scale, th / scale, tw / scale)?),
                    None => None,
                };
                out.push(Sample {
                    name: format!("{}@{ty}.{tx}", s.name),
                    clean: s.clean.crop(top, left, th, tw)?,
                    degraded,
                });
            }
        }
    }
    Ok(out)
}

/// One training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch<T: Scalar> {
    /// `(N, C, p, p)`, degraded, not clipped.
    pub input: Tensor<T>,
    /// `(N, C, p·s, p·s)` clean.
    pub target: Tensor<T>,
    pub sources: Vec<usize>,
    pub variants: Vec<usize>,
}

/// Draw `batch` patches: uniform image, uniform offset, uniform dihedral
/// variant. On-the-fly corruption is applied to the augmented clean patch.
pub fn sample_patch_batch<T: Scalar>(
    ds: &Dataset<T>,
    batch: usize,
    patch: usize,
    rng: &mut impl Rng,
) -> Result<PatchBatch<T>> {
    if ds.is_empty() {
        return Err(Error::param("dataset is empty"));
    }
    if batch == 0 || patch == 0 {
        return Err(Error::param("batch and patch size must be positive"));
    }
    let eligible = ds.eligible(patch);
    if eligible.is_empty() {
        return Err(Error::param(format!("no image is large enough for {patch}x{patch} patches")));
    }
    let s = ds.scale();
    let mut inputs = Vec::with_capacity(batch);
    let mut targets = Vec::with_capacity(batch);
    let mut sources = Vec::with_capacity(batch);
    let mut variants = Vec::with_capacity(batch);
    for _ in 0..batch {
        let idx = eligible[rng.random_range(0..eligible.len())];
        let sample = &ds.samples[idx];
        let cs = sample.clean.shape();
        let (ih, iw) = (cs.h / s, cs.w / s);
        let top = rng.random_range(0..=ih - patch);
        let left = rng.random_range(0..=iw - patch);
        let k = rng.random_range(0..VARIANTS);
        let seed: u64 = rng.random();
        let target = dihedral(&sample.clean.crop(top * s, left * s, patch * s, patch * s)?, k);
        let input = match (&ds.pairing, &sample.degraded) {
            (Pairing::OnTheFly(spec), _) => spec.apply_seeded(&target, seed)?,
            (Pairing::PairedFiles { .. }, Some(d)) => dihedral(&d.crop(top, left, patch, patch)?, k),
            (Pairing::PairedFiles { .. }, None) => return Err(Error::param("paired sample without degraded image")),
        };
        inputs.push(input);
        targets.push(target);
        sources.push(idx);
        variants.push(k);
    }
    Ok(PatchBatch {
        input: Tensor::stack(&inputs)?,
        target: Tensor::stack(&targets)?,
        sources,
        variants,
    })
}
