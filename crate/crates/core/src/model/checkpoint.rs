//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! "R2NETCKP"                      8 bytes
//! version                         u32
//! architecture hash               u64   (FNV-1a of ModelConfig::architecture_key)
//! config length, config text      u32, UTF-8 key=value lines
//! iteration                       u64
//! tensor count                    u32
//! per tensor: name length, name,  u32, UTF-8
//!             rank, dims          u32, rank × u64
//!             data                f32 × prod(dims)
//! checksum                        u64   (FNV-1a of every preceding byte)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use super::config::{fnv1a, ModelConfig};
use super::Model;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

pub const MAGIC: &[u8; 8] = b"R2NETCKP";
pub const VERSION: u32 = 1;

/// Decoded checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub iteration: u64,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.pos as u64, format!("unexpected end of data reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn text(&mut self, n: usize, what: &str) -> Result<&'a str> {
        let at = self.pos as u64;
        std::str::from_utf8(self.take(n, what)?).map_err(|_| Error::format(at, format!("{what} is not UTF-8")))
    }
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config.architecture_hash().to_le_bytes());
        let text = self.config.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&4u32.to_le_bytes());
            for d in t.shape().dims() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let checksum = fnv1a(&out);
        out.extend_from_slice(&checksum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let min = MAGIC.len() + 4 + 8;
        if bytes.len() < min {
            return Err(Error::format(bytes.len() as u64, "file too short for a checkpoint"));
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::format(0, "bad magic"));
        }
        let body_len = bytes.len() - 8;
        let stored = u64::from_le_bytes(bytes[body_len..].try_into().unwrap());
        if fnv1a(&bytes[..body_len]) != stored {
            return Err(Error::format(body_len as u64, "checksum mismatch (truncated or corrupted file)"));
        }
        let mut r = Reader {
            bytes: &bytes[..body_len],
            pos: MAGIC.len(),
        };
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format(8, format!("unsupported version {version}, expected {VERSION}")));
        }
        let hash = r.u64("architecture hash")?;
        let len = r.u32("config length")? as usize;
        let at = r.pos as u64;
        let config = ModelConfig::from_text(r.text(len, "config")?).map_err(|e| Error::format(at, e.to_string()))?;
        if config.architecture_hash() != hash {
            return Err(Error::format(12, "architecture hash does not match the stored config"));
        }
        let iteration = r.u64("iteration")?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name = r.text(name_len, "tensor name")?.to_string();
            let rank_at = r.pos as u64;
            let rank = r.u32("rank")?;
            if rank != 4 {
                return Err(Error::format(rank_at, format!("tensor '{name}' has rank {rank}, expected 4")));
            }
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = r.u64("dimension")? as usize;
            }
            let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
            let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let bytes_needed = n.and_then(|n| n.checked_mul(4));
            let Some(bytes_needed) = bytes_needed else {
                return Err(Error::format(rank_at, format!("tensor '{name}' is too large")));
            };
            let raw = r.take(bytes_needed, "tensor data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::from_vec(shape, data)?));
        }
        if r.pos != body_len {
            return Err(Error::format(r.pos as u64, "trailing bytes before checksum"));
        }
        Ok(Checkpoint {
            config,
            iteration,
            tensors,
        })
    }

    /// Write through a temporary file and rename, so readers never see a partial file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tmp_name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        tmp_name.push(".tmp");
        let tmp = path.with_file_name(tmp_name);
        let bytes = self.to_bytes();
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

impl<T: Scalar> Model<T> {
    /// Parameters as 32-bit tensors.
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config().clone(),
            iteration: self.iteration,
            tensors: self
                .named_params()
                .into_iter()
                .map(|(name, t)| (name, t.cast()))
                .collect(),
        }
    }

    /// Rebuild a model; tensors not belonging to the model are ignored.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut model = Model::zeros(ckpt.config.clone())?;
        model.iteration = ckpt.iteration;
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(model.params_mut()) {
            let t = ckpt
                .tensor(name)
                .ok_or_else(|| Error::Incompatible(format!("checkpoint lacks tensor '{name}'")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Incompatible(format!(
                    "tensor '{name}' has shape {}, model expects {}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = Arc::new(t.cast());
        }
        Ok(model)
    }
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    model.to_checkpoint().save(path)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Model<T>> {
    Model::from_checkpoint(&Checkpoint::load(path)?)
}

/// Load and require the architecture of `expected`. Flags, λ and the seed
/// are taken from `expected`, not from the file.
pub fn load_checkpoint_expecting<T: Scalar>(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Model<T>> {
    let mut model = load_checkpoint(path)?;
    model.reconfigure(expected.clone())?;
    Ok(model)
}
