//! Run configuration: one flat `key = value` file merged with command-line
//! overrides. Later sources win; every key is checked against the schema.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use r2restore_core::degrade::DegradationSpec;
use r2restore_core::train::TrainConfig;
use r2restore_core::ModelConfig;

use crate::CliError;

/// Where a key's value came from, for error messages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Origin {
    File { path: PathBuf, line: usize },
    Flag(String),
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::File { path, line } => write!(f, "{}:{line}", path.display()),
            Origin::Flag(flag) => f.write_str(flag),
        }
    }
}

const PATH_KEYS: &[&str] = &["manifest", "val_manifest", "checkpoint", "out"];
const OTHER_KEYS: &[&str] = &["degradation", "ensemble", "deterministic", "tile"];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub degradation: Option<DegradationSpec>,
    pub manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub ensemble: bool,
    pub deterministic: bool,
    /// Edge of training tiles; 0 disables tiling.
    pub tile: usize,
    /// Keys set explicitly, with the source of their final value.
    pub explicit: BTreeMap<String, Origin>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            degradation: None,
            manifest: None,
            val_manifest: None,
            checkpoint: None,
            out: None,
            ensemble: false,
            deterministic: false,
            tile: r2restore_core::data::TILE,
            explicit: BTreeMap::new(),
        }
    }
}

fn is_known(key: &str) -> bool {
    ModelConfig::KEYS.contains(&key)
        || TrainConfig::KEYS.contains(&key)
        || PATH_KEYS.contains(&key)
        || OTHER_KEYS.contains(&key)
}

fn parse_bool(value: &str) -> Option<bool> {
    match value {
        "true" | "on" | "1" | "yes" => Some(true),
        "false" | "off" | "0" | "no" => Some(false),
        _ => None,
    }
}

impl RunConfig {
    /// Apply one assignment. `base` resolves relative paths.
    fn set(&mut self, key: &str, value: &str, base: &Path, origin: Origin) -> Result<(), CliError> {
        let fail = |msg: String| CliError::Config(format!("{origin}: {key}: {msg}"));
        if !is_known(key) {
            return Err(CliError::Config(format!("{origin}: unknown key '{key}'")));
        }
        if ModelConfig::KEYS.contains(&key) {
            self.model.set(key, value).map_err(|e| fail(e.to_string()))?;
        } else if TrainConfig::KEYS.contains(&key) {
            self.train.set(key, value).map_err(|e| fail(e.to_string()))?;
        } else if PATH_KEYS.contains(&key) {
            if value.is_empty() {
                return Err(fail("empty path".into()));
            }
            let path = base.join(value);
            match key {
                "manifest" => self.manifest = Some(path),
                "val_manifest" => self.val_manifest = Some(path),
                "checkpoint" => self.checkpoint = Some(path),
                _ => self.out = Some(path),
            }
        } else {
            match key {
                "degradation" => {
                    let spec: DegradationSpec = value.parse().map_err(|e: r2restore_core::Error| fail(e.to_string()))?;
                    spec.validate().map_err(|e| fail(e.to_string()))?;
                    self.degradation = Some(spec);
                }
                "ensemble" | "deterministic" => {
                    let b = parse_bool(value).ok_or_else(|| fail(format!("expected a boolean, got '{value}'")))?;
                    if key == "ensemble" {
                        self.ensemble = b;
                    } else {
                        self.deterministic = b;
                    }
                }
                _ => {
                    self.tile = value.parse().map_err(|_| fail(format!("expected an integer, got '{value}'")))?;
                }
            }
        }
        self.explicit.insert(key.to_string(), origin);
        Ok(())
    }

    /// Check cross-field constraints, blaming the most recently set key
    /// that the failure mentions.
    fn validate(&mut self) -> Result<(), CliError> {
        if !self.explicit.contains_key("patch") {
            self.train.patch = TrainConfig::for_task(self.model.task).patch;
        }
        let checks = [
            ("model", self.model.validate().err()),
            ("training", self.train.validate().err()),
        ];
        for (what, err) in checks {
            if let Some(e) = err {
                let msg = e.to_string();
                let blamed = self
                    .explicit
                    .iter()
                    .filter(|(k, _)| msg.contains(k.as_str()))
                    .max_by_key(|(_, o)| match o {
                        Origin::File { line, .. } => (0, *line),
                        Origin::Flag(_) => (1, 0),
                    });
                return Err(CliError::Config(match blamed {
                    Some((key, origin)) => format!("{origin}: {key}: invalid {what} configuration: {msg}"),
                    None => format!("invalid {what} configuration: {msg}"),
                }));
            }
        }
        Ok(())
    }

    /// Resolved configuration in the file grammar; feeding it back in
    /// reproduces this configuration.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# resolved configuration\n");
        for line in self.model.to_text().lines().chain(self.train.to_text().lines()) {
            if let Some((k, v)) = line.split_once('=') {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        if let Some(spec) = &self.degradation {
            out.push_str(&format!("degradation = {spec}\n"));
        }
        for (key, path) in [
            ("manifest", &self.manifest),
            ("val_manifest", &self.val_manifest),
            ("checkpoint", &self.checkpoint),
            ("out", &self.out),
        ] {
            if let Some(p) = path {
                out.push_str(&format!("{key} = {}\n", p.display()));
            }
        }
        out.push_str(&format!(
            "ensemble = {}\ndeterministic = {}\ntile = {}\n",
            self.ensemble, self.deterministic, self.tile
        ));
        out
    }
}

/// One command-line override: key, value and the flag that supplied it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Override {
    pub key: String,
    pub value: String,
    pub flag: String,
}

/// Read `path` (if any), then apply `overrides` in order. Relative paths in
/// the file resolve against the file's directory; paths given as flags
/// resolve against the working directory.
pub fn parse_config(path: Option<&Path>, overrides: &[Override]) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = path {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for (i, raw) in text.lines().enumerate() {
            let origin = Origin::File { path: path.to_path_buf(), line: i + 1 };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("{origin}: expected 'key = value'")))?;
            cfg.set(key.trim(), value.trim(), base, origin)?;
        }
    }
    for o in overrides {
        cfg.set(&o.key, &o.value, Path::new(""), Origin::Flag(o.flag.clone()))?;
    }
    cfg.validate()?;
    Ok(cfg)
}
