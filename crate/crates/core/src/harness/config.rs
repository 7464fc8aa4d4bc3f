//! Flat `key = value` run configuration.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::models::{
    load_csv, make_synthetic, CsvSchema, Dataset, ModelSpec, QuantSettings, QuantizerKind, SyntheticKind,
};
use crate::optim::TrainConfig;

/// Every key a config file may contain.
pub const CONFIG_KEYS: [&str; 12] = [
    "learning_rate",
    "steps",
    "batch_size",
    "epsilon",
    "clip_threshold",
    "master_seed",
    "lr_schedule",
    "bits",
    "group_size",
    "model",
    "dataset",
    "quantizer",
];

/// Where training data comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Synthetic {
        kind: SyntheticKind,
        n: usize,
        noise: f64,
        seed: u64,
    },
    /// Headed CSV; the label column is `label` unless overridden with `csv:<path>#<column>`.
    Csv { path: PathBuf, label: String },
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSpec::Synthetic { kind, n, noise, seed } => make_synthetic(*kind, *n, *noise, *seed),
            DatasetSpec::Csv { path, label } => load_csv(path, &CsvSchema::with_label(label.clone()), 0),
        }
    }

    fn synthetic_defaults(kind: SyntheticKind) -> (usize, f64) {
        match kind {
            SyntheticKind::TwoGaussians => (1000, 1.0),
            SyntheticKind::TwoMoons => (1000, 0.1),
            SyntheticKind::LinearRegression => (1000, 0.1),
            SyntheticKind::HeavyTailed => (1000, 0.1),
        }
    }

    /// Resolve relative CSV paths against `base`.
    pub fn relative_to(self, base: &Path) -> Self {
        match self {
            DatasetSpec::Csv { path, label } if path.is_relative() => DatasetSpec::Csv {
                path: base.join(path),
                label,
            },
            other => other,
        }
    }
}

impl std::str::FromStr for DatasetSpec {
    type Err = Error;

    /// `two-gaussians[:n=1000,noise=1.0,seed=0]`, `stress`, `csv:<path>[#label]`.
    fn from_str(s: &str) -> Result<Self> {
        if let Some(rest) = s.strip_prefix("csv:") {
            let (path, label) = match rest.rsplit_once('#') {
                Some((p, l)) => (p, l.to_string()),
                None => (rest, "label".to_string()),
            };
            if path.is_empty() {
                return Err(Error::config("csv dataset needs a path"));
            }
            return Ok(DatasetSpec::Csv {
                path: PathBuf::from(path),
                label,
            });
        }
        let (name, opts) = s.split_once(':').unwrap_or((s, ""));
        let kind: SyntheticKind = name.parse()?;
        let (mut n, mut noise) = Self::synthetic_defaults(kind);
        let mut seed = 0;
        for opt in opts.split(',').filter(|o| !o.is_empty()) {
            let (k, v) = opt
                .split_once('=')
                .ok_or_else(|| Error::config(format!("dataset option {opt:?} is not key=value")))?;
            let bad = || Error::config(format!("bad value {v:?} for dataset option {k}"));
            match k {
                "n" => n = v.parse().map_err(|_| bad())?,
                "noise" => noise = v.parse().map_err(|_| bad())?,
                "seed" => seed = v.parse().map_err(|_| bad())?,
                _ => return Err(Error::config(format!("unknown dataset option {k:?}"))),
            }
        }
        Ok(DatasetSpec::Synthetic { kind, n, noise, seed })
    }
}

impl std::fmt::Display for DatasetSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DatasetSpec::Synthetic { kind, n, noise, seed } => {
                let name = match kind {
                    SyntheticKind::TwoGaussians => "two-gaussians",
                    SyntheticKind::TwoMoons => "two-moons",
                    SyntheticKind::LinearRegression => "linear-regression",
                    SyntheticKind::HeavyTailed => "heavy-tailed",
                };
                write!(f, "{name}:n={n},noise={noise},seed={seed}")
            }
            DatasetSpec::Csv { path, label } => write!(f, "csv:{}#{label}", path.display()),
        }
    }
}

/// A complete, validated training configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub quant: QuantSettings,
    pub model: ModelSpec,
    pub dataset: DatasetSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            quant: QuantSettings {
                kind: QuantizerKind::Scalar,
                bits: 4,
                group_size: crate::quant::DEFAULT_GROUP_SIZE,
            },
            model: ModelSpec::Logistic,
            dataset: DatasetSpec::Synthetic {
                kind: SyntheticKind::TwoGaussians,
                n: 1000,
                noise: 1.0,
                seed: 0,
            },
        }
    }
}

fn parse_clip(v: &str) -> Option<f64> {
    match v {
        "inf" | "infinity" | "none" | "∞" => Some(f64::INFINITY),
        _ => v.parse::<f64>().ok().filter(|c| !c.is_nan()),
    }
}

/// Format a clipping threshold the way the config parser reads it back.
pub fn format_clip(c: f64) -> String {
    if c.is_infinite() {
        "inf".into()
    } else {
        format!("{c}")
    }
}

impl RunConfig {
    /// Parse `key = value` lines. `#` starts a comment; unspecified keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |message: String| Error::Config { line: line_no, message };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, found {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !CONFIG_KEYS.contains(&key) {
                return Err(err(format!("unknown key {key:?}")));
            }
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key {key:?}")));
            }
            let bad = || err(format!("bad value {value:?} for {key}"));
            let relabel = |e: Error| match e {
                Error::Config { message, .. } => err(message),
                other => err(other.to_string()),
            };
            let t = &mut cfg.train;
            match key {
                "learning_rate" => t.learning_rate = value.parse().map_err(|_| bad())?,
                "steps" => t.steps = value.parse().map_err(|_| bad())?,
                "batch_size" => t.batch_size = value.parse().map_err(|_| bad())?,
                "epsilon" => t.epsilon = value.parse().map_err(|_| bad())?,
                "clip_threshold" => t.clip_threshold = parse_clip(value).ok_or_else(bad)?,
                "master_seed" => t.master_seed = value.parse().map_err(|_| bad())?,
                "lr_schedule" => t.lr_schedule = value.parse().map_err(relabel)?,
                "bits" => cfg.quant.bits = value.parse().map_err(|_| bad())?,
                "group_size" => cfg.quant.group_size = value.parse().map_err(|_| bad())?,
                "model" => cfg.model = value.parse().map_err(relabel)?,
                "dataset" => cfg.dataset = value.parse().map_err(relabel)?,
                "quantizer" => cfg.quant.kind = value.parse().map_err(relabel)?,
                _ => unreachable!("key list checked above"),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text)?;
        if let Some(dir) = path.parent() {
            cfg.dataset = cfg.dataset.relative_to(dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.quant.group_size == 0 {
            return Err(Error::config("group_size must be at least 1"));
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        format!(
            "learning_rate = {}\nsteps = {}\nbatch_size = {}\nepsilon = {}\nclip_threshold = {}\n\
             master_seed = {}\nlr_schedule = {}\nbits = {}\ngroup_size = {}\nmodel = {}\n\
             dataset = {}\nquantizer = {}\n",
            t.learning_rate,
            t.steps,
            t.batch_size,
            t.epsilon,
            format_clip(t.clip_threshold),
            t.master_seed,
            t.lr_schedule,
            self.quant.bits,
            self.quant.group_size,
            self.model,
            self.dataset,
            self.quant.kind,
        )
    }
}
