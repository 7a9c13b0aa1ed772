//! Image files, manifests, in-memory datasets and patch sampling.

pub mod augment;
mod dataset;
pub mod image_io;
mod manifest;

pub use augment::{augment, compose, dihedral, inverse_variant, VARIANTS};
pub use dataset::{sample_patch_batch, Dataset, Pairing, PatchBatch, Sample, TILE};
pub use image_io::{read_image, write_image};
pub use manifest::{Manifest, ManifestEntry};
