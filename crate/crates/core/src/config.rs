//! Experiment configuration: a flat `key = value` text file.
//!
//! Blank lines and `#` comments are ignored, unknown keys are rejected, and
//! [`TrainConfig::to_text`] writes every key in a fixed order so a parsed
//! and re-serialized config is byte-stable.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{ActivationKind, ModelConfig, PoolKind};
use crate::optim::LrSchedule;
use crate::pool::lp_rho_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        }
    }

    pub fn input(self) -> (usize, usize, usize) {
        match self {
            DatasetKind::Mnist => (1, 28, 28),
            DatasetKind::Cifar10 => (3, 32, 32),
        }
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" | "cifar-10" => Ok(DatasetKind::Cifar10),
            other => Err(Error::Config(format!("unknown dataset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision `{other}` (f32 or f64)"))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    pub pool: PoolKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// `(epoch, multiplier)` pairs; see [`LrSchedule`].
    pub lr_milestones: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Save `checkpoint_epoch{N}.bin` every this many epochs; 0 keeps only
    /// the final checkpoint.
    pub checkpoint_interval: usize,
    pub activation: ActivationKind,
    pub alpha_init: f64,
    pub alpha_freeze: bool,
    pub lp_p_init: f64,
    pub precision: Precision,
    pub conv_channels: Vec<usize>,
    pub conv_kernel: usize,
    pub conv_padding: usize,
    pub pool_window: usize,
    pub pool_stride: usize,
    /// Pad-and-crop padding; `None` means 0 for MNIST and 4 for CIFAR-10.
    pub augment_pad: Option<usize>,
    /// Use only the first N training / test samples (0 = all).
    pub train_limit: usize,
    pub test_limit: usize,
    pub eval_batch_size: usize,
    /// Batches between rows of the alpha trace (0 = one row per epoch).
    pub trace_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: DatasetKind::Mnist,
            data_dir: PathBuf::from("data/mnist"),
            pool: PoolKind::AlphaI,
            epochs: 15,
            batch_size: 32,
            lr: 0.001,
            lr_milestones: vec![(5, 0.1), (10, 0.1)],
            momentum: 0.9,
            weight_decay: 0.0005,
            seed: 1,
            out_dir: PathBuf::from("runs/default"),
            checkpoint_interval: 0,
            activation: ActivationKind::Auto,
            alpha_init: crate::alpha::ALPHA_INIT,
            alpha_freeze: false,
            lp_p_init: 2.0,
            precision: Precision::F32,
            conv_channels: vec![32, 64],
            conv_kernel: 5,
            conv_padding: 2,
            pool_window: 2,
            pool_stride: 2,
            augment_pad: None,
            train_limit: 0,
            test_limit: 0,
            eval_batch_size: 500,
            trace_interval: 100,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut config = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1)))?;
            config
                .set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset" => self.dataset = parse(key, value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "pool" => self.pool = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "lr_milestones" => {
                self.lr_milestones = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|pair| {
                        let (e, m) = pair
                            .split_once(':')
                            .ok_or_else(|| Error::Config(format!("milestone `{pair}` must be epoch:multiplier")))?;
                        Ok((parse(key, e.trim())?, parse(key, m.trim())?))
                    })
                    .collect::<Result<_>>()?
            }
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "checkpoint_interval" => self.checkpoint_interval = parse(key, value)?,
            "activation" => self.activation = parse(key, value)?,
            "alpha_init" => self.alpha_init = parse(key, value)?,
            "alpha_freeze" => self.alpha_freeze = parse(key, value)?,
            "lp_p_init" => self.lp_p_init = parse(key, value)?,
            "precision" => self.precision = parse(key, value)?,
            "conv_channels" => self.conv_channels = parse_list(key, value)?,
            "conv_kernel" => self.conv_kernel = parse(key, value)?,
            "conv_padding" => self.conv_padding = parse(key, value)?,
            "pool_window" => self.pool_window = parse(key, value)?,
            "pool_stride" => self.pool_stride = parse(key, value)?,
            "augment_pad" => {
                self.augment_pad = match value {
                    "auto" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "train_limit" => self.train_limit = parse(key, value)?,
            "test_limit" => self.test_limit = parse(key, value)?,
            "eval_batch_size" => self.eval_batch_size = parse(key, value)?,
            "trace_interval" => self.trace_interval = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("conv_kernel", self.conv_kernel),
            ("pool_window", self.pool_window),
            ("pool_stride", self.pool_stride),
            ("eval_batch_size", self.eval_batch_size),
        ];
        if let Some((key, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{key}` must be positive")));
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(Error::Config("`conv_channels` must list positive channel counts".into()));
        }
        LrSchedule::new(self.lr, self.lr_milestones.clone())?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("`momentum` must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("`weight_decay` must be non-negative, got {}", self.weight_decay)));
        }
        let (lo, hi) = crate::alpha::ALPHA_CLAMP;
        if !(lo..=hi).contains(&self.alpha_init) {
            return Err(Error::Config(format!("`alpha_init` must be in [{lo}, {hi}]")));
        }
        if lp_rho_for(self.lp_p_init).is_none() {
            return Err(Error::Config(format!("`lp_p_init` must exceed 1, got {}", self.lp_p_init)));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<LrSchedule> {
        LrSchedule::new(self.lr, self.lr_milestones.clone())
    }

    pub fn augment_pad(&self) -> usize {
        self.augment_pad.unwrap_or(match self.dataset {
            DatasetKind::Mnist => 0,
            DatasetKind::Cifar10 => 4,
        })
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut m = ModelConfig::simple_cnn(self.dataset.input(), 10, self.pool);
        m.conv_channels = self.conv_channels.clone();
        m.conv_kernel = self.conv_kernel;
        m.conv_padding = self.conv_padding;
        m.pool_window = self.pool_window;
        m.pool_stride = self.pool_stride;
        m.activation = self.activation;
        m.alpha_init = self.alpha_init;
        m.freeze_alpha = self.alpha_freeze;
        m.lp_rho_init = lp_rho_for(self.lp_p_init)
            .ok_or_else(|| Error::Config(format!("`lp_p_init` must exceed 1, got {}", self.lp_p_init)))?;
        Ok(m)
    }

    /// Canonical text form: every key, fixed order, one per line.
    pub fn to_text(&self) -> String {
        let milestones: Vec<String> = self.lr_milestones.iter().map(|(e, m)| format!("{e}:{m}")).collect();
        let rows: Vec<(&str, String)> = vec![
            ("dataset", self.dataset.as_str().to_string()),
            ("data_dir", self.data_dir.display().to_string()),
            ("pool", self.pool.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("lr_milestones", milestones.join(",")),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("seed", self.seed.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("checkpoint_interval", self.checkpoint_interval.to_string()),
            ("activation", self.activation.as_str().to_string()),
            ("alpha_init", self.alpha_init.to_string()),
            ("alpha_freeze", self.alpha_freeze.to_string()),
            ("lp_p_init", self.lp_p_init.to_string()),
            ("precision", self.precision.to_string()),
            ("conv_channels", join(&self.conv_channels)),
            ("conv_kernel", self.conv_kernel.to_string()),
            ("conv_padding", self.conv_padding.to_string()),
            ("pool_window", self.pool_window.to_string()),
            ("pool_stride", self.pool_stride.to_string()),
            ("augment_pad", self.augment_pad.map_or("auto".to_string(), |p| p.to_string())),
            ("train_limit", self.train_limit.to_string()),
            ("test_limit", self.test_limit.to_string()),
            ("eval_batch_size", self.eval_batch_size.to_string()),
            ("trace_interval", self.trace_interval.to_string()),
        ];
        rows.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// The config without the keys that only say where files live. Two runs
    /// with equal experiment keys produce identical results.
    pub fn experiment_key(&self) -> String {
        self.to_text()
            .lines()
            .filter(|l| !l.starts_with("data_dir") && !l.starts_with("out_dir"))
            .map(|l| format!("{l}\n"))
            .collect()
    }
}
