//! Experiment configuration files.
//!
//! Configs are strict JSON: unknown fields are rejected, absent fields take defaults and
//! every range violation names the offending field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{MnistPaths, SettingKind, SettingSpec};
use crate::error::{Error, Result};
use crate::nn::ModelSpec;
use crate::seed::Seeds;
use crate::unfolding::{check_epsilon, MetaObjective, Normalization, UnfoldConfig, WeightPrior};

/// Environment variable consulted when a config names no dataset location.
pub const DATA_ENV: &str = "UNFOLDFED_DATA";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Data-size weights every round.
    Fedavg,
    /// Equal weights every round.
    FixedUniform,
    /// Learned per-round weights.
    Unfolded,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Fedavg => "fedavg",
            Mode::FixedUniform => "fixed-uniform",
            Mode::Unfolded => "unfolded",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportToggles {
    pub csv: bool,
    pub weights_json: bool,
    pub svg: bool,
}

impl Default for ReportToggles {
    fn default() -> Self {
        ReportToggles {
            csv: true,
            weights_json: true,
            svg: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub instances: usize,
    pub epsilon: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            instances: 20,
            epsilon: 1e-3,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Directory holding the four standard MNIST files.
    pub data_dir: Option<PathBuf>,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,

    pub setting: SettingKind,
    pub mode: Mode,
    #[serde(alias = "K")]
    pub clients: usize,
    #[serde(alias = "M")]
    pub meta_iterations: usize,
    #[serde(alias = "T")]
    pub rounds: usize,
    #[serde(alias = "eta_g")]
    pub server_lr: f64,
    #[serde(alias = "eta_meta")]
    pub meta_lr: f64,
    #[serde(alias = "lambda_model")]
    pub model_decay: f64,
    #[serde(alias = "lambda_theta")]
    pub weight_decay: f64,
    pub normalization: Normalization,
    pub prior: WeightPrior,
    pub objective: MetaObjective,
    pub renormalize_absent: bool,

    /// Hidden layer widths between the 784 inputs and 10 outputs.
    pub hidden: Vec<usize>,
    pub validation_size: usize,
    /// Seeded test subset size; absent means the whole test split.
    pub test_size: Option<usize>,

    pub label_sets: Option<Vec<Vec<u8>>>,
    pub client_sizes: Option<Vec<usize>>,
    pub per_client: Option<usize>,
    pub epochs: Option<Vec<usize>>,
    pub participation: Option<Vec<f64>>,
    pub base_epochs: Option<usize>,
    pub local_lr: Option<f64>,
    pub batch_size: Option<usize>,

    pub seeds: Seeds,
    pub out_dir: PathBuf,
    pub report: ReportToggles,
    pub gradcheck: GradcheckConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let unfold = UnfoldConfig::default();
        ExperimentConfig {
            data_dir: None,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            setting: SettingKind::Statistical,
            mode: Mode::Unfolded,
            clients: unfold.clients,
            meta_iterations: unfold.meta_iterations,
            rounds: unfold.rounds,
            server_lr: unfold.eta_g,
            meta_lr: unfold.eta_meta,
            model_decay: unfold.lambda_model,
            weight_decay: unfold.lambda_theta,
            normalization: unfold.normalization,
            prior: unfold.prior,
            objective: unfold.objective,
            renormalize_absent: unfold.renormalize_absent,
            hidden: vec![32],
            validation_size: 1000,
            test_size: None,
            label_sets: None,
            client_sizes: None,
            per_client: None,
            epochs: None,
            participation: None,
            base_epochs: None,
            local_lr: None,
            batch_size: None,
            seeds: unfold.seeds,
            out_dir: PathBuf::from("runs"),
            report: ReportToggles::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

/// Reads and validates a config file.
pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::from_json(&text)
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = match e.path().to_string() {
                p if p == "." => "<root>".to_string(),
                p => p,
            };
            Error::config(field, e.into_inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.unfold_config().validate()?;
        self.setting_spec().validate()?;
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden", "layer widths must be >= 1"));
        }
        if self.validation_size == 0 {
            return Err(Error::config("validation_size", "must be >= 1"));
        }
        if self.test_size == Some(0) {
            return Err(Error::config("test_size", "must be >= 1"));
        }
        let g = &self.gradcheck;
        if g.instances == 0 {
            return Err(Error::config("gradcheck.instances", "must be >= 1"));
        }
        check_epsilon(g.epsilon)
            .map_err(|_| Error::config("gradcheck.epsilon", format!("{} outside [1e-6, 1e-2]", g.epsilon)))?;
        if !(g.tolerance > 0.0 && g.tolerance.is_finite()) {
            return Err(Error::config("gradcheck.tolerance", "must be > 0"));
        }
        Ok(())
    }

    pub fn unfold_config(&self) -> UnfoldConfig {
        UnfoldConfig {
            clients: self.clients,
            meta_iterations: self.meta_iterations,
            rounds: self.rounds,
            eta_g: self.server_lr,
            eta_meta: self.meta_lr,
            lambda_model: self.model_decay,
            lambda_theta: self.weight_decay,
            normalization: self.normalization,
            prior: self.prior,
            objective: self.objective,
            renormalize_absent: self.renormalize_absent,
            seeds: self.seeds,
        }
    }

    pub fn setting_spec(&self) -> SettingSpec {
        let mut spec = SettingSpec::defaults(self.setting, self.clients);
        if let Some(v) = &self.label_sets {
            spec.label_sets = v.clone();
        }
        if let Some(v) = &self.client_sizes {
            spec.client_sizes = v.clone();
        }
        if let Some(v) = self.per_client {
            spec.per_client = v;
        }
        if let Some(v) = &self.epochs {
            spec.epochs = v.clone();
        }
        if let Some(v) = &self.participation {
            spec.participation = v.clone();
        }
        if let Some(v) = self.base_epochs {
            spec.base_epochs = v;
        }
        if let Some(v) = self.local_lr {
            spec.local_lr = v;
        }
        if let Some(v) = self.batch_size {
            spec.batch_size = v;
        }
        spec.seed = self.seeds.data;
        spec
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let mut dims = vec![784];
        dims.extend(&self.hidden);
        dims.push(10);
        ModelSpec::new(dims)
    }

    /// Dataset file locations: explicit paths win, then `data_dir`, then `$UNFOLDFED_DATA`.
    pub fn mnist_paths(&self) -> Result<MnistPaths> {
        let dir = self
            .data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from));
        let base = dir.as_ref().map(MnistPaths::in_dir);
        let pick = |explicit: &Option<PathBuf>, from_dir: Option<&PathBuf>, field: &str| {
            explicit.clone().or_else(|| from_dir.cloned()).ok_or_else(|| {
                Error::config(
                    field,
                    format!("no path given and neither data_dir nor ${DATA_ENV} is set"),
                )
            })
        };
        Ok(MnistPaths {
            train_images: pick(
                &self.train_images,
                base.as_ref().map(|b| &b.train_images),
                "train_images",
            )?,
            train_labels: pick(
                &self.train_labels,
                base.as_ref().map(|b| &b.train_labels),
                "train_labels",
            )?,
            test_images: pick(&self.test_images, base.as_ref().map(|b| &b.test_images), "test_images")?,
            test_labels: pick(&self.test_labels, base.as_ref().map(|b| &b.test_labels), "test_labels")?,
        })
    }

    /// Replaces every seed stream with `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        self.seeds = Seeds::uniform(seed);
    }

    /// The config as written to artifacts. The output directory is left out so that
    /// moving a run does not change its files.
    pub fn echo(&self) -> serde_json::Value {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("out_dir");
        }
        value
    }

    /// Hex SHA-256 of the compact echo.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.echo().to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
