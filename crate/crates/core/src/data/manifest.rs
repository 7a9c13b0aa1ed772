use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub clean: PathBuf,
    pub degraded: Option<PathBuf>,
}

/// List of image files, one `clean=<path> [degraded=<path>]` entry per
/// line. `#` starts a comment; relative paths resolve against the
/// manifest's directory.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        let mut offset = 0u64;
        for raw in text.split_inclusive('\n') {
            let line_offset = offset;
            offset += raw.len() as u64;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut clean = None;
            let mut degraded = None;
            for token in line.split_whitespace() {
                let slot = match token.split_once('=') {
                    Some(("clean", v)) => (&mut clean, v),
                    Some(("degraded", v)) => (&mut degraded, v),
                    _ => {
                        return Err(Error::format(
                            line_offset,
                            format!("unexpected manifest token '{token}'"),
                        ))
                    }
                };
                if slot.1.is_empty() || slot.0.is_some() {
                    return Err(Error::format(line_offset, format!("bad manifest token '{token}'")));
                }
                *slot.0 = Some(base.join(slot.1));
            }
            let clean = clean.ok_or_else(|| Error::format(line_offset, "manifest entry without clean="))?;
            entries.push(ManifestEntry { clean, degraded });
        }
        Ok(Manifest { entries })
    }

    /// Read and parse a manifest file, then check every listed file exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let manifest = Self::parse(&text, base)?;
        manifest.check_exists()?;
        Ok(manifest)
    }

    pub fn check_exists(&self) -> Result<()> {
        for e in &self.entries {
            for p in std::iter::once(&e.clean).chain(e.degraded.as_ref()) {
                if !p.is_file() {
                    return Err(Error::io(p, io::Error::new(io::ErrorKind::NotFound, "listed in manifest")));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// True when every entry names a degraded file.
    pub fn is_paired(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| e.degraded.is_some())
    }

    /// Render with absolute or as-given paths.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!("clean={}", e.clean.display()));
            if let Some(d) = &e.degraded {
                out.push_str(&format!(" degraded={}", d.display()));
            }
            out.push('\n');
        }
        out
    }
}
