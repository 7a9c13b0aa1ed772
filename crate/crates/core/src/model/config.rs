use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::Flags;

/// What the network produces from its input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    /// Same-size restoration (denoising, deblocking).
    Restore,
    /// Upscale by the given factor (2, 3 or 4).
    SuperResolve(usize),
}

impl Task {
    pub fn scale(&self) -> usize {
        match self {
            Task::Restore => 1,
            Task::SuperResolve(s) => *s,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::Restore => f.write_str("restore"),
            Task::SuperResolve(s) => write!(f, "sr{s}"),
        }
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "restore" => Ok(Task::Restore),
            "sr2" => Ok(Task::SuperResolve(2)),
            "sr3" => Ok(Task::SuperResolve(3)),
            "sr4" => Ok(Task::SuperResolve(4)),
            other => Err(Error::param(format!(
                "unknown task '{other}' (expected restore, sr2, sr3 or sr4)"
            ))),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub width: usize,
    pub num_eam: usize,
    pub reduction: usize,
    pub flags: Flags,
    pub task: Task,
    /// Soft-shrinkage threshold inside feature attention.
    pub lambda: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Color restoration: width 64, four EAMs, attention reduction 16.
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            out_channels: 3,
            width: 64,
            num_eam: 4,
            reduction: 16,
            flags: Flags::ALL,
            task: Task::Restore,
            lambda: 0.5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn gray() -> Self {
        ModelConfig {
            in_channels: 1,
            out_channels: 1,
            ..Self::default()
        }
    }

    pub fn super_resolution(scale: usize) -> Self {
        ModelConfig {
            task: Task::SuperResolve(scale),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, c) in [("in_channels", self.in_channels), ("out_channels", self.out_channels)] {
            if c != 1 && c != 3 {
                return Err(Error::param(format!("{name} must be 1 or 3, got {c}")));
            }
        }
        if self.width == 0 {
            return Err(Error::param("width must be positive"));
        }
        if self.num_eam == 0 {
            return Err(Error::param("num_eam must be positive"));
        }
        if self.reduction == 0 || self.width % self.reduction != 0 {
            return Err(Error::param(format!(
                "width {} is not divisible by reduction {}",
                self.width, self.reduction
            )));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::param(format!("lambda must be positive, got {}", self.lambda)));
        }
        match self.task {
            Task::Restore if self.in_channels != self.out_channels => Err(Error::param(
                "restoration needs in_channels == out_channels",
            )),
            Task::SuperResolve(s) if !(2..=4).contains(&s) => {
                Err(Error::param(format!("super-resolution scale must be 2, 3 or 4, got {s}")))
            }
            _ => Ok(()),
        }
    }

    /// Fields that determine parameter shapes. Flags, λ and the seed are
    /// excluded, so a checkpoint loads under any ablation setting.
    pub fn architecture_key(&self) -> String {
        format!(
            "in={};out={};width={};num_eam={};reduction={};task={}",
            self.in_channels, self.out_channels, self.width, self.num_eam, self.reduction, self.task
        )
    }

    pub fn architecture_hash(&self) -> u64 {
        fnv1a(self.architecture_key().as_bytes())
    }

    /// Canonical `key=value` lines, one per field.
    pub fn to_text(&self) -> String {
        format!(
            "in_channels={}\nout_channels={}\nwidth={}\nnum_eam={}\nreduction={}\nlsc={}\nssc={}\nlc={}\nfa={}\ntask={}\nlambda={:?}\nseed={}\n",
            self.in_channels,
            self.out_channels,
            self.width,
            self.num_eam,
            self.reduction,
            self.flags.lsc,
            self.flags.ssc,
            self.flags.lc,
            self.flags.fa,
            self.task,
            self.lambda,
            self.seed,
        )
    }

    /// Parse [`ModelConfig::to_text`] output; missing keys keep defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::param(format!("line {}: expected key=value", i + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Set one field from its textual form. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .parse()
                .map_err(|_| Error::param(format!("{key}: cannot parse '{value}'")))
        }
        fn flag(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" | "on" | "1" | "yes" => Ok(true),
                "false" | "off" | "0" | "no" => Ok(false),
                _ => Err(Error::param(format!("{key}: expected a boolean, got '{value}'"))),
            }
        }
        match key {
            "in_channels" => self.in_channels = num(key, value)?,
            "out_channels" => self.out_channels = num(key, value)?,
            "width" => self.width = num(key, value)?,
            "num_eam" => self.num_eam = num(key, value)?,
            "reduction" => self.reduction = num(key, value)?,
            "lsc" => self.flags.lsc = flag(key, value)?,
            "ssc" => self.flags.ssc = flag(key, value)?,
            "lc" => self.flags.lc = flag(key, value)?,
            "fa" => self.flags.fa = flag(key, value)?,
            "task" => self.task = value.parse()?,
            "lambda" => self.lambda = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Err(Error::param(format!("unknown model key '{key}'"))),
        }
        Ok(())
    }

    pub const KEYS: &'static [&'static str] = &[
        "in_channels",
        "out_channels",
        "width",
        "num_eam",
        "reduction",
        "lsc",
        "ssc",
        "lc",
        "fa",
        "task",
        "lambda",
        "seed",
    ];
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
