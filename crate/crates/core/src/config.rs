//! Run configuration: flat `key=value` text, overridable key by key.
//!
//! Every command validates the config before doing any work and writes the
//! effective config to `<out>/config.txt`; feeding that file back in
//! reproduces the run.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::aggregate::{AggregationConfig, Strategy, DEFAULT_ZETA};
use crate::embedding::{Encoder, CLASS_PLACEHOLDER, DEFAULT_TEMPLATE};
use crate::error::{Error, Result};
use crate::planted::{PlantedConfig, PlantedEncoder};
use crate::pseudo::DEFAULT_EPSILON;
use crate::remote::RemoteEncoder;
use crate::snippet::GridShape;
use crate::trainer::{GradientMode, RefineParams, TrainConfig, DEFAULT_SIGMA_G, DEFAULT_TOLERANCE};

pub const CONFIG_FILE: &str = "config.txt";

#[derive(Debug, Clone, PartialEq)]
pub enum EncoderChoice {
    /// Synthetic planted-concept encoder.
    Planted { dim: usize, seed: u64 },
    /// HTTP model server.
    Remote { url: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub cache: PathBuf,
    pub encoder: EncoderChoice,
    pub template: String,
    pub grid: GridShape,
    pub zeta: f64,
    pub strategy: Strategy,
    pub epsilon: f64,
    pub hard_labels: bool,
    pub sigma_g: f64,
    pub eta: f64,
    pub gradient: GradientMode,
    pub modulation: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub tolerance: f64,
    pub seed: u64,
    pub bins: usize,
    pub out: PathBuf,
    /// Pseudo-label file for `train`; defaults to `<out>/pseudo_labels`.
    pub pseudo_labels: Option<PathBuf>,
    /// Classifier checkpoint for `evaluate`; defaults to `<out>/classifier`.
    pub checkpoint: Option<PathBuf>,
    /// Earlier `train` output directory to continue from.
    pub resume: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: PathBuf::from("dataset.manifest"),
            cache: PathBuf::from("cache"),
            encoder: EncoderChoice::Planted { dim: 64, seed: 0 },
            template: DEFAULT_TEMPLATE.to_string(),
            grid: GridShape::default(),
            zeta: DEFAULT_ZETA,
            strategy: Strategy::MinMax,
            epsilon: DEFAULT_EPSILON,
            hard_labels: false,
            sigma_g: DEFAULT_SIGMA_G,
            eta: 1.0,
            gradient: GradientMode::Literal,
            modulation: true,
            epochs: 20,
            batch_size: 8,
            learning_rate: 0.01,
            tolerance: DEFAULT_TOLERANCE,
            seed: 0,
            bins: 10,
            out: PathBuf::from("run"),
            pseudo_labels: None,
            checkpoint: None,
            resume: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value for `{key}`: {value:?}")))
}

fn opt_path(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key.trim() {
            "dataset" => self.dataset = PathBuf::from(value.trim()),
            "cache" => self.cache = PathBuf::from(value.trim()),
            "encoder" => {
                self.encoder = match value.trim() {
                    "planted" => match self.encoder {
                        EncoderChoice::Planted { .. } => self.encoder.clone(),
                        _ => EncoderChoice::Planted { dim: 64, seed: 0 },
                    },
                    v if v.starts_with("http://") || v.starts_with("https://") => {
                        EncoderChoice::Remote { url: v.to_string() }
                    }
                    v => {
                        return Err(Error::Config(format!(
                            "encoder must be `planted` or an http(s) URL, got {v:?}"
                        )))
                    }
                }
            }
            "planted_dim" | "planted_seed" => {
                let EncoderChoice::Planted { dim, seed } = &mut self.encoder else {
                    return Err(Error::Config(format!("`{key}` requires encoder=planted")));
                };
                if key.trim() == "planted_dim" {
                    *dim = parse(key, value)?;
                } else {
                    *seed = parse(key, value)?;
                }
            }
            "template" => self.template = value.to_string(),
            "grid" => self.grid = value.trim().parse()?,
            "zeta" => self.zeta = parse(key, value)?,
            "strategy" => self.strategy = value.trim().parse()?,
            "epsilon" => self.epsilon = parse(key, value)?,
            "hard_labels" => self.hard_labels = parse(key, value)?,
            "sigma_g" => self.sigma_g = parse(key, value)?,
            "eta" => self.eta = parse(key, value)?,
            "gradient" => self.gradient = value.trim().parse()?,
            "modulation" => self.modulation = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "tolerance" => self.tolerance = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "bins" => self.bins = parse(key, value)?,
            "out" => self.out = PathBuf::from(value.trim()),
            "pseudo_labels" => self.pseudo_labels = opt_path(value),
            "checkpoint" => self.checkpoint = opt_path(value),
            "resume" => self.resume = opt_path(value),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses config text on top of the defaults. Blank lines and `#`
    /// comments are ignored.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }

    /// Every setting, one per line, in a fixed order.
    pub fn render(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut out = String::new();
        let mut line = |k: &str, v: String| writeln!(out, "{k}={v}").unwrap();
        line("dataset", self.dataset.display().to_string());
        line("cache", self.cache.display().to_string());
        match &self.encoder {
            EncoderChoice::Planted { dim, seed } => {
                line("encoder", "planted".into());
                line("planted_dim", dim.to_string());
                line("planted_seed", seed.to_string());
            }
            EncoderChoice::Remote { url } => line("encoder", url.clone()),
        }
        line("template", self.template.clone());
        line("grid", self.grid.to_string());
        line("zeta", self.zeta.to_string());
        line("strategy", self.strategy.to_string());
        line("epsilon", self.epsilon.to_string());
        line("hard_labels", self.hard_labels.to_string());
        line("sigma_g", self.sigma_g.to_string());
        line("eta", self.eta.to_string());
        line("gradient", self.gradient.to_string());
        line("modulation", self.modulation.to_string());
        line("epochs", self.epochs.to_string());
        line("batch_size", self.batch_size.to_string());
        line("learning_rate", self.learning_rate.to_string());
        line("tolerance", self.tolerance.to_string());
        line("seed", self.seed.to_string());
        line("bins", self.bins.to_string());
        line("out", self.out.display().to_string());
        line("pseudo_labels", path(&self.pseudo_labels));
        line("checkpoint", path(&self.checkpoint));
        line("resume", path(&self.resume));
        out
    }

    pub fn validate(&self) -> Result<()> {
        if !self.template.contains(CLASS_PLACEHOLDER) {
            return Err(Error::Config(format!("template must contain {CLASS_PLACEHOLDER}")));
        }
        AggregationConfig::new(self.zeta, self.strategy)?;
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::Config(format!("epsilon must lie in (0, 0.5), got {}", self.epsilon)));
        }
        if self.bins == 0 {
            return Err(Error::Config("bins must be positive".into()));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::Config("tolerance must be >= 0".into()));
        }
        if let EncoderChoice::Planted { dim, .. } = self.encoder {
            if dim == 0 {
                return Err(Error::Config("planted_dim must be positive".into()));
            }
        }
        self.train_config().validate()
    }

    pub fn aggregation(&self) -> AggregationConfig {
        AggregationConfig {
            zeta: self.zeta,
            strategy: self.strategy,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            refine: RefineParams {
                sigma_g: self.sigma_g,
                eta: self.eta,
                mode: self.gradient,
                modulation: self.modulation,
            },
            seed: self.seed,
            tolerance: self.tolerance,
        }
    }

    /// Instantiates the configured encoder for `classes`.
    pub fn make_encoder(&self, classes: &[String]) -> Result<Box<dyn Encoder>> {
        Ok(match &self.encoder {
            EncoderChoice::Planted { dim, seed } => Box::new(PlantedEncoder::new(
                classes,
                PlantedConfig {
                    dim: *dim,
                    seed: *seed,
                    ..PlantedConfig::default()
                },
            )?),
            EncoderChoice::Remote { url } => Box::new(RemoteEncoder::connect(url)?),
        })
    }

    pub fn pseudo_labels_path(&self) -> PathBuf {
        self.pseudo_labels.clone().unwrap_or_else(|| self.out.join("pseudo_labels"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("classifier"))
    }

    /// Writes the effective config into the output directory.
    pub fn save_to_out(&self) -> Result<PathBuf> {
        fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        let path = self.out.join(CONFIG_FILE);
        fs::write(&path, self.render()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
