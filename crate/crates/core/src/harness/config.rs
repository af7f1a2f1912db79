//! Flat `key = value` run configuration.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::DType;
use crate::unroll::{Aggregation, EmphasisPlacement, NetworkSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Network {
    LeNet,
    /// Two 3-channel convolutions; sized for synthetic runs.
    Tiny28,
}

impl FromStr for Network {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lenet" => Ok(Network::LeNet),
            "tiny28" => Ok(Network::Tiny28),
            _ => Err(Error::Config(format!("unknown network {s:?} (expected lenet or tiny28)"))),
        }
    }
}

impl fmt::Display for Network {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Network::LeNet => "lenet",
            Network::Tiny28 => "tiny28",
        })
    }
}

/// Where samples come from: an AMAT file, or `synthetic:<n_per_class>:<seed>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DataSource {
    Amat(PathBuf),
    Synthetic { n_per_class: usize, seed: u64 },
}

impl FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(rest) = s.strip_prefix("synthetic:") {
            let (n, seed) = rest
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("expected synthetic:<n_per_class>:<seed>, got {s:?}")))?;
            let bad = |_| Error::Config(format!("bad synthetic source {s:?}"));
            Ok(DataSource::Synthetic { n_per_class: n.parse().map_err(bad)?, seed: seed.parse().map_err(bad)? })
        } else if s.is_empty() {
            Err(Error::Config("empty dataset path".into()))
        } else {
            Ok(DataSource::Amat(PathBuf::from(s)))
        }
    }
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSource::Amat(p) => write!(f, "{}", p.display()),
            DataSource::Synthetic { n_per_class, seed } => write!(f, "synthetic:{n_per_class}:{seed}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub train: Option<DataSource>,
    pub test: Option<DataSource>,
    pub network: Network,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub seed: u64,
    pub precision: DType,
    pub normalize: bool,
    pub normalize_epsilon: f64,
    pub flip: bool,
    pub emphasis_placement: EmphasisPlacement,
    pub truncated_bptt: bool,
    pub eval_aggregation: Aggregation,
    pub relu_after_conv: bool,
    /// Multiply the learning rate by this factor every `lr_decay_every`
    /// epochs of a phase; `lr_decay_every = 0` keeps it constant.
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    /// Also continue the phase-1 baseline for `phase2_epochs` without heads,
    /// as the comparison arm for phase 2.
    pub baseline_finetune: bool,
    /// Evaluate the test split every this many epochs (and always at the end
    /// of a phase).
    pub eval_every: usize,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            train: None,
            test: None,
            network: Network::LeNet,
            batch_size: 128,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            iterations: 2,
            phase1_epochs: 64,
            phase2_epochs: 16,
            seed: 1,
            precision: DType::F32,
            normalize: true,
            normalize_epsilon: 1e-8,
            flip: false,
            emphasis_placement: EmphasisPlacement::BeforePool,
            truncated_bptt: false,
            eval_aggregation: Aggregation::Final,
            relu_after_conv: false,
            lr_decay_factor: 1.0,
            lr_decay_every: 0,
            baseline_finetune: false,
            eval_every: 1,
            out_dir: PathBuf::from("run"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn parse_dtype(value: &str) -> Result<DType> {
    match value {
        "single" | "f32" => Ok(DType::F32),
        "double" | "f64" => Ok(DType::F64),
        _ => Err(Error::Config(format!("precision: expected single or double, got {value:?}"))),
    }
}

fn optional_source(value: &str) -> Result<Option<DataSource>> {
    if value.is_empty() || value == "none" {
        Ok(None)
    } else {
        value.parse().map(Some)
    }
}

impl TrainConfig {
    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (key, value) = (key.trim(), value.trim());
        match key {
            "train_path" => self.train = optional_source(value)?,
            "test_path" => self.test = optional_source(value)?,
            "network" => self.network = value.parse()?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "phase1_epochs" => self.phase1_epochs = parse(key, value)?,
            "phase2_epochs" => self.phase2_epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "precision" => self.precision = parse_dtype(value)?,
            "normalize" => self.normalize = parse_bool(key, value)?,
            "normalize_epsilon" => self.normalize_epsilon = parse(key, value)?,
            "flip" => self.flip = parse_bool(key, value)?,
            "emphasis_placement" => {
                self.emphasis_placement = value.parse().map_err(|e: Error| Error::Config(e.to_string()))?
            }
            "truncated_bptt" => self.truncated_bptt = parse_bool(key, value)?,
            "eval_aggregation" => {
                self.eval_aggregation = value.parse().map_err(|e: Error| Error::Config(e.to_string()))?
            }
            "relu_after_conv" => self.relu_after_conv = parse_bool(key, value)?,
            "lr_decay_factor" => self.lr_decay_factor = parse(key, value)?,
            "lr_decay_every" => self.lr_decay_every = parse(key, value)?,
            "baseline_finetune" => self.baseline_finetune = parse_bool(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies an override of the form `key=value`.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(k, v)
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", i + 1)))?;
            cfg.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        positive("lr", self.lr)?;
        positive("normalize_epsilon", self.normalize_epsilon)?;
        positive("lr_decay_factor", self.lr_decay_factor)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be ≥ 0, got {}", self.weight_decay)));
        }
        if self.train.is_none() {
            return Err(Error::Config("train_path is required".into()));
        }
        Ok(())
    }

    /// The phase-1 network (no heads, `T = 1`) for `classes` outputs.
    pub fn baseline_spec(&self, classes: usize) -> Result<NetworkSpec> {
        match self.network {
            Network::LeNet => {
                if classes != 10 {
                    return Err(Error::Data(format!("lenet has 10 outputs but the data has {classes} classes")));
                }
                Ok(NetworkSpec::lenet(self.relu_after_conv, 0.0))
            }
            Network::Tiny28 => Ok(NetworkSpec::tiny28(classes, 1).baseline()),
        }
    }

    /// The phase-2 network: heads on every convolution and `T` iterations.
    pub fn rethinking_spec(&self, classes: usize) -> Result<NetworkSpec> {
        Ok(self.baseline_spec(classes)?.with_rethinking(self.emphasis_placement, self.iterations))
    }

    /// Learning rate for the 1-based epoch `epoch` of a phase.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match (epoch - 1).checked_div(self.lr_decay_every) {
            Some(steps) => self.lr * self.lr_decay_factor.powi(steps as i32),
            None => self.lr,
        }
    }
}

impl fmt::Display for TrainConfig {
    /// The resolved configuration in the same `key = value` form it is read from.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let source = |s: &Option<DataSource>| s.as_ref().map_or("none".to_string(), |s| s.to_string());
        writeln!(f, "train_path = {}", source(&self.train))?;
        writeln!(f, "test_path = {}", source(&self.test))?;
        writeln!(f, "network = {}", self.network)?;
        writeln!(f, "batch_size = {}", self.batch_size)?;
        writeln!(f, "lr = {}", self.lr)?;
        writeln!(f, "momentum = {}", self.momentum)?;
        writeln!(f, "weight_decay = {}", self.weight_decay)?;
        writeln!(f, "iterations = {}", self.iterations)?;
        writeln!(f, "phase1_epochs = {}", self.phase1_epochs)?;
        writeln!(f, "phase2_epochs = {}", self.phase2_epochs)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "precision = {}", self.precision)?;
        writeln!(f, "normalize = {}", self.normalize)?;
        writeln!(f, "normalize_epsilon = {}", self.normalize_epsilon)?;
        writeln!(f, "flip = {}", self.flip)?;
        writeln!(f, "emphasis_placement = {}", self.emphasis_placement)?;
        writeln!(f, "truncated_bptt = {}", self.truncated_bptt)?;
        writeln!(f, "eval_aggregation = {}", self.eval_aggregation)?;
        writeln!(f, "relu_after_conv = {}", self.relu_after_conv)?;
        writeln!(f, "lr_decay_factor = {}", self.lr_decay_factor)?;
        writeln!(f, "lr_decay_every = {}", self.lr_decay_every)?;
        writeln!(f, "baseline_finetune = {}", self.baseline_finetune)?;
        writeln!(f, "eval_every = {}", self.eval_every)?;
        writeln!(f, "out_dir = {}", self.out_dir.display())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_training_recipe() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_size, c.lr, c.momentum, c.weight_decay), (128, 0.01, 0.9, 1e-4));
        assert_eq!((c.iterations, c.phase1_epochs, c.phase2_epochs), (2, 64, 16));
        assert_eq!(c.eval_aggregation, Aggregation::Final);
        assert!(!c.flip);
    }

    #[test]
    fn text_overrides_and_round_trip() {
        let mut c = TrainConfig::parse_text(
            "# comment\ntrain_path = synthetic:8:3\nlr = 0.05  # inline\nprecision = double\nnormalize=false\n",
        )
        .unwrap();
        assert_eq!(c.train, Some(DataSource::Synthetic { n_per_class: 8, seed: 3 }));
        assert_eq!(c.lr, 0.05);
        assert_eq!(c.precision, DType::F64);
        c.apply_override("iterations=3").unwrap();
        assert_eq!(c.iterations, 3);
        let again = TrainConfig::parse_text(&c.to_string()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(TrainConfig::parse_text("bogus = 1").is_err());
        assert!(TrainConfig::parse_text("lr 0.1").is_err());
        assert!(TrainConfig::parse_text("lr = fast").is_err());
        assert!(TrainConfig::parse_text("normalize = maybe").is_err());
        assert!(TrainConfig::parse_text("train_path = synthetic:x").is_err());
        let mut c = TrainConfig { train: Some(DataSource::Synthetic { n_per_class: 1, seed: 1 }), ..Default::default() };
        c.validate().unwrap();
        c.iterations = 0;
        assert!(c.validate().is_err());
        c.iterations = 2;
        c.momentum = 1.0;
        assert!(c.validate().is_err());
        assert!(TrainConfig::default().validate().is_err());
    }

    #[test]
    fn learning_rate_schedule() {
        let mut c = TrainConfig::default();
        assert_eq!(c.lr_at(50), 0.01);
        c.lr_decay_every = 10;
        c.lr_decay_factor = 0.1;
        assert_eq!(c.lr_at(10), 0.01);
        assert!((c.lr_at(11) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn specs_for_each_network() {
        let c = TrainConfig::default();
        let base = c.baseline_spec(10).unwrap();
        assert!(!base.is_rethinking());
        let lr = c.rethinking_spec(10).unwrap();
        assert_eq!(lr.heads.len(), 2);
        assert_eq!(lr.iterations, 2);
        assert!(c.baseline_spec(2).is_err());
        let tiny = TrainConfig { network: Network::Tiny28, ..Default::default() };
        assert_eq!(tiny.rethinking_spec(2).unwrap().classes, 2);
    }
}
