//! Experiment configuration: a declarative TOML tree (sections `data`,
//! `model`, `train`, `amp`, `fim`, `split`) merged with command-line
//! overrides, where a flag always wins. Unknown keys are rejected and the
//! resolved configuration is echoed next to every run's outputs so any
//! published number can be reproduced.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::aggregation::DistanceMetric;
use crate::client::LocalTrainConfig;
use crate::error::{Error, Result};
use crate::model::Activation;
use crate::server::StrategyKind;

/// Environment variable that overrides `output_dir` (a `--output-dir`
/// flag still wins).
pub const OUTPUT_DIR_ENV: &str = "FEDSAF_OUTPUT_DIR";

/// Which dataset a run trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    Synthetic,
    FashionMnistIdx,
    Csv,
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Self::Synthetic),
            "fashion_mnist_idx" => Ok(Self::FashionMnistIdx),
            "csv" => Ok(Self::Csv),
            other => Err(Error::Config(format!(
                "unknown dataset {other:?}, expected one of synthetic, fashion_mnist_idx, csv"
            ))),
        }
    }
}

/// `data.*` section: dataset source and partitioning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dataset: DatasetKind,
    /// Number of clients (m).
    pub clients: usize,
    /// Classes per client (S); absent means every class.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes_per_client: Option<usize>,
    /// Size-skew exponent; client i keeps a ((i+1)/m)^unbalance share.
    pub unbalance: f64,
    pub test_fraction: f64,
    /// Synthetic blob parameters.
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    pub separation: f64,
    /// IDX file pair.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub images_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv_path: Option<PathBuf>,
    /// Cap on the total sample count after loading (stratified).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_samples: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Synthetic,
            clients: 5,
            classes_per_client: None,
            unbalance: 0.0,
            test_fraction: 0.2,
            num_classes: 10,
            samples_per_class: 200,
            dim: 16,
            separation: 3.0,
            images_path: None,
            labels_path: None,
            csv_path: None,
            max_samples: None,
        }
    }
}

/// `model.*` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden widths; empty means multinomial logistic regression.
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![32],
            activation: Activation::Relu,
        }
    }
}

/// `amp.*` section: similarity weighting hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AmpConfig {
    /// Distance metric (`dm`).
    pub dm: DistanceMetric,
    /// Scaling factor applied to the attention derivative.
    pub alpha: f64,
    /// Attention scale.
    pub sigma: f64,
}

impl Default for AmpConfig {
    fn default() -> Self {
        Self {
            dm: DistanceMetric::Manhattan,
            alpha: 0.1,
            sigma: 1.0,
        }
    }
}

/// `fim.*` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FimConfig {
    pub enabled: bool,
}

impl Default for FimConfig {
    fn default() -> Self {
        Self { enabled: true }
    }
}

/// `split.*` section.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Deepest layers kept local; 0 disables splitting.
    pub nhead: usize,
}

/// Full experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub strategy: StrategyKind,
    /// Communication rounds (K).
    pub rounds: usize,
    pub master_seed: u64,
    /// Client ids that behave as stragglers.
    pub stragglers: Vec<usize>,
    /// FedProx proximal coefficient.
    pub mu_prox: f64,
    pub output_dir: PathBuf,
    /// Worker-thread cap; 0 uses the library default. Never affects results.
    pub threads: usize,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: LocalTrainConfig,
    pub amp: AmpConfig,
    pub fim: FimConfig,
    pub split: SplitConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            strategy: StrategyKind::FedSaf,
            rounds: 30,
            master_seed: 42,
            stragglers: Vec::new(),
            mu_prox: 0.01,
            output_dir: PathBuf::from("runs/latest"),
            threads: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: LocalTrainConfig::default(),
            amp: AmpConfig::default(),
            fim: FimConfig::default(),
            split: SplitConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parse a TOML config file; unknown keys and invalid values are
    /// rejected with a message naming the offender.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config serialization failed: {e}")))
    }

    /// Number of classes each client's data covers.
    pub fn classes_per_client(&self, num_classes: usize) -> usize {
        self.data.classes_per_client.unwrap_or(num_classes)
    }

    /// Head depth the active strategy actually uses.
    pub fn effective_nhead(&self) -> usize {
        match self.strategy {
            StrategyKind::FedSaf | StrategyKind::FedRep => self.split.nhead,
            StrategyKind::FedAvg | StrategyKind::FedProx | StrategyKind::FedAmp => 0,
        }
    }

    /// The round strategy with ablation flags resolved.
    pub fn strategy(&self) -> crate::server::Strategy {
        use crate::server::Strategy;
        match self.strategy {
            StrategyKind::FedSaf => {
                Strategy::fedsaf(self.fim.enabled, self.split.nhead > 0, self.amp.dm)
            }
            StrategyKind::FedAvg => Strategy::fedavg(),
            StrategyKind::FedProx => Strategy::fedprox(self.mu_prox),
            StrategyKind::FedAmp => Strategy::fedamp(self.amp.dm),
            StrategyKind::FedRep => Strategy::fedrep(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.data.clients == 0 {
            return Err(Error::Config("data.clients must be at least 1".into()));
        }
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "data.test_fraction must be in (0, 1), got {}",
                self.data.test_fraction
            )));
        }
        if self.data.unbalance < 0.0 || !self.data.unbalance.is_finite() {
            return Err(Error::Config(format!(
                "data.unbalance must be nonnegative, got {}",
                self.data.unbalance
            )));
        }
        if let Some(s) = self.data.classes_per_client {
            if s == 0 {
                return Err(Error::Config(
                    "data.classes_per_client must be at least 1".into(),
                ));
            }
        }
        match self.data.dataset {
            DatasetKind::Synthetic => {
                if self.data.num_classes < 2
                    || self.data.samples_per_class == 0
                    || self.data.dim == 0
                {
                    return Err(Error::Config(
                        "data.num_classes, data.samples_per_class and data.dim must be positive (>= 2 classes)"
                            .into(),
                    ));
                }
            }
            DatasetKind::FashionMnistIdx => {
                if self.data.images_path.is_none() || self.data.labels_path.is_none() {
                    return Err(Error::Config(
                        "data.images_path and data.labels_path are required for IDX datasets"
                            .into(),
                    ));
                }
            }
            DatasetKind::Csv => {
                if self.data.csv_path.is_none() {
                    return Err(Error::Config(
                        "data.csv_path is required for CSV datasets".into(),
                    ));
                }
            }
        }
        if self.amp.alpha < 0.0 || !self.amp.alpha.is_finite() {
            return Err(Error::Config(format!(
                "amp.alpha must be nonnegative, got {}",
                self.amp.alpha
            )));
        }
        if self.amp.sigma <= 0.0 || !self.amp.sigma.is_finite() {
            return Err(Error::Config(format!(
                "amp.sigma must be positive, got {}",
                self.amp.sigma
            )));
        }
        if self.mu_prox < 0.0 || !self.mu_prox.is_finite() {
            return Err(Error::Config(format!(
                "mu_prox must be nonnegative, got {}",
                self.mu_prox
            )));
        }
        if let Some(&bad) = self.stragglers.iter().find(|&&id| id >= self.data.clients) {
            return Err(Error::Config(format!(
                "stragglers: client id {bad} out of range for {} clients",
                self.data.clients
            )));
        }
        if self.strategy == StrategyKind::FedRep && self.split.nhead == 0 {
            return Err(Error::Config(
                "split.nhead must be at least 1 for the fedrep strategy".into(),
            ));
        }
        Ok(())
    }
}

/// Command-line overrides; any set field replaces the file value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub strategy: Option<StrategyKind>,
    pub rounds: Option<usize>,
    pub master_seed: Option<u64>,
    pub dataset: Option<DatasetKind>,
    pub clients: Option<usize>,
    pub classes_per_client: Option<usize>,
    pub unbalance: Option<f64>,
    pub nhead: Option<usize>,
    pub dm: Option<DistanceMetric>,
    pub lr: Option<f64>,
    pub lambda: Option<f64>,
    pub alpha: Option<f64>,
    pub sigma: Option<f64>,
    pub use_fim: Option<bool>,
    pub stragglers: Option<Vec<usize>>,
    pub output_dir: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, config: &mut ExperimentConfig) {
        macro_rules! set {
            ($field:expr, $target:expr) => {
                if let Some(v) = &$field {
                    $target = v.clone();
                }
            };
        }
        set!(self.strategy, config.strategy);
        set!(self.rounds, config.rounds);
        set!(self.master_seed, config.master_seed);
        set!(self.dataset, config.data.dataset);
        set!(self.clients, config.data.clients);
        if let Some(s) = self.classes_per_client {
            config.data.classes_per_client = Some(s);
        }
        set!(self.unbalance, config.data.unbalance);
        set!(self.nhead, config.split.nhead);
        set!(self.dm, config.amp.dm);
        set!(self.lr, config.train.lr);
        set!(self.lambda, config.train.lambda);
        set!(self.alpha, config.amp.alpha);
        set!(self.sigma, config.amp.sigma);
        set!(self.use_fim, config.fim.enabled);
        set!(self.stragglers, config.stragglers);
        set!(self.output_dir, config.output_dir);
        set!(self.threads, config.threads);
    }
}

/// Load (or default) a config, apply the output-dir environment override,
/// then the flags, then validate.
pub fn resolve_config(path: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut config = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
        if !dir.is_empty() {
            config.output_dir = PathBuf::from(dir);
        }
    }
    overrides.apply(&mut config);
    config.validate()?;
    Ok(config)
}
