//! Strict TOML experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::AdamConfig;
use crate::datasets::{Body, DatasetSpec, Triangle, TriangleMixtureSpec, TwoMoonsSpec, UniformBodySpec};
use crate::dv::DvSettings;
use crate::error::{Error, Result};
use crate::gmm::{Relevance, TrainSettings};
use crate::network::{NetworkConfig, Variant};

/// Where the data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Triangle {
        dim: usize,
        /// Per-dimension components; the built-in default for `dim` when absent.
        #[serde(default)]
        marginal: Option<Vec<Triangle>>,
    },
    TwoMoons {
        #[serde(default = "default_noise")]
        noise: f64,
    },
    Ball {
        dim: usize,
    },
    Cube {
        dim: usize,
    },
    Gaussian {
        mean: Vec<f64>,
        #[serde(default = "one_f64")]
        std: f64,
    },
    File {
        path: PathBuf,
        #[serde(default = "default_delimiter")]
        delimiter: char,
        #[serde(default)]
        header: bool,
    },
}

fn default_noise() -> f64 {
    0.05
}

fn one_f64() -> f64 {
    1.0
}

fn default_delimiter() -> char {
    ','
}

impl DatasetConfig {
    /// The synthetic distribution, or `None` for file input.
    pub fn spec(&self) -> Option<DatasetSpec> {
        Some(match self {
            DatasetConfig::Triangle { dim, marginal } => DatasetSpec::Triangle(match marginal {
                Some(m) => TriangleMixtureSpec { dim: *dim, marginal: m.clone() },
                None => TriangleMixtureSpec::default_for(*dim),
            }),
            DatasetConfig::TwoMoons { noise } => DatasetSpec::TwoMoons(TwoMoonsSpec { noise: *noise }),
            DatasetConfig::Ball { dim } => DatasetSpec::Uniform(UniformBodySpec { body: Body::Ball, dim: *dim }),
            DatasetConfig::Cube { dim } => DatasetSpec::Uniform(UniformBodySpec { body: Body::Cube, dim: *dim }),
            DatasetConfig::Gaussian { mean, std } => DatasetSpec::Gaussian { mean: mean.clone(), std: *std },
            DatasetConfig::File { .. } => return None,
        })
    }
}

/// Split sizes. Exactly one of `val_size` and `val_fraction` must be set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Training points drawn from a synthetic dataset; ignored for files.
    #[serde(default)]
    pub train_size: Option<usize>,
    #[serde(default)]
    pub val_size: Option<usize>,
    #[serde(default)]
    pub val_fraction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseConfig {
    pub components: usize,
    pub diagonal: bool,
    /// Cross-entropy epochs (`k1`).
    pub epochs: usize,
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self { components: 8, diagonal: false, epochs: 50 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrectionConfig {
    pub variant: Variant,
    pub widths: Vec<usize>,
    pub epsilon: f64,
    pub relevance: Relevance,
    pub ema_decay: f64,
    /// Correction epochs (`k2`).
    pub epochs: usize,
    /// Base samples `m` drawn once after the first phase; the training size when absent.
    pub q_samples: Option<usize>,
    /// Draw a fresh set of `m` base samples every epoch.
    pub resample_each_epoch: bool,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        let net = NetworkConfig::default();
        Self {
            variant: net.variant,
            widths: net.widths,
            epsilon: net.epsilon,
            relevance: net.relevance,
            ema_decay: 0.99,
            epochs: 100,
            q_samples: None,
            resample_each_epoch: false,
        }
    }
}

impl CorrectionConfig {
    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            variant: self.variant,
            widths: self.widths.clone(),
            epsilon: self.epsilon,
            relevance: self.relevance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self {
            learning_rate: a.learning_rate,
            weight_decay: a.weight_decay,
            batch_size: 1000,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }
    }
}

impl OptimizerConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Oracle {
    /// Monte Carlo with the exact density (synthetic data only).
    Mc,
    Knn,
    Kde,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub oracles: Vec<Oracle>,
    pub knn_k: usize,
    pub kde_bandwidth: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { oracles: Vec::new(), knn_k: 10, kde_bandwidth: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_run_id")]
    pub run_id: String,
    pub dataset: DatasetConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub base: BaseConfig,
    #[serde(default)]
    pub correction: CorrectionConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Seeds run concurrently on up to this many threads; results do not depend on it.
    #[serde(default = "default_threads")]
    pub threads: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_run_id() -> String {
    "run".to_owned()
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_threads() -> usize {
    1
}

impl ExperimentConfig {
    /// Config with the given data and every other field at its default.
    pub fn new(dataset: DatasetConfig, data: DataConfig) -> Self {
        Self {
            run_id: default_run_id(),
            dataset,
            data,
            base: BaseConfig::default(),
            correction: CorrectionConfig::default(),
            optimizer: OptimizerConfig::default(),
            evaluation: EvaluationConfig::default(),
            seeds: default_seeds(),
            threads: default_threads(),
            output_dir: None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| e.context(format!("config {}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if let Some(spec) = self.dataset.spec() {
            spec.validate()?;
            match self.data.train_size {
                Some(n) if n >= 1 => {}
                _ => return bad("data.train_size must be set to at least 1 for synthetic datasets".into()),
            }
        }
        match (self.data.val_size, self.data.val_fraction) {
            (Some(_), Some(_)) => return bad("set only one of data.val_size and data.val_fraction".into()),
            (None, None) => return bad("data.val_size or data.val_fraction is required".into()),
            (Some(0), None) => return bad("data.val_size must be at least 1".into()),
            (None, Some(f)) if !(f > 0.0 && f < 1.0) => return bad(format!("data.val_fraction {f} outside (0, 1)")),
            _ => {}
        }
        if self.base.components == 0 {
            return bad("base.components must be at least 1".into());
        }
        self.correction.network().validate()?;
        if !(0.0..1.0).contains(&self.correction.ema_decay) {
            return bad(format!("correction.ema_decay {} outside [0, 1)", self.correction.ema_decay));
        }
        if self.correction.q_samples == Some(0) {
            return bad("correction.q_samples must be at least 1".into());
        }
        if self.optimizer.batch_size == 0 {
            return bad("optimizer.batch_size must be at least 1".into());
        }
        self.optimizer.adam().validate()?;
        if self.evaluation.knn_k == 0 {
            return bad("evaluation.knn_k must be at least 1".into());
        }
        if !(self.evaluation.kde_bandwidth > 0.0) {
            return bad("evaluation.kde_bandwidth must be positive".into());
        }
        if self.evaluation.oracles.contains(&Oracle::Mc) && self.dataset.spec().is_none() {
            return bad("the mc oracle needs a synthetic dataset with a known density".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.threads == 0 {
            return bad("threads must be at least 1".into());
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return bad(format!("run_id `{}` must be a nonempty file-name component", self.run_id));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON of the parsed config, lowercase hex.
    /// Key order and formatting in the source file do not affect it.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&canonical).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn base_settings(&self) -> TrainSettings {
        TrainSettings {
            epochs: self.base.epochs,
            batch_size: self.optimizer.batch_size,
            optimizer: self.optimizer.adam(),
        }
    }

    pub fn dv_settings(&self) -> DvSettings {
        DvSettings {
            epochs: self.correction.epochs,
            batch_size: self.optimizer.batch_size,
            optimizer: self.optimizer.adam(),
            ema_decay: self.correction.ema_decay,
        }
    }

    /// Replace the field at a dotted path (for example `base.components`).
    pub fn with_field(&self, path: &str, value: serde_json::Value) -> Result<Self> {
        let mut tree = serde_json::to_value(self)?;
        let mut node = &mut tree;
        for key in path.split('.') {
            node = node
                .as_object_mut()
                .and_then(|m| m.get_mut(key))
                .ok_or_else(|| Error::Config(format!("unknown config field `{path}`")))?;
        }
        *node = value;
        let cfg: Self =
            serde_json::from_value(tree).map_err(|e| Error::Config(format!("value for `{path}` does not fit: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
