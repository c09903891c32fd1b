//! End-to-end experiment runs: data preparation, the selected training mode and the
//! artifacts written afterwards.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::config::{ExperimentConfig, Mode};
use crate::data::{make_profiles, partition, split_validation, test_subset, Dataset, SettingKind, CLASSES};
use crate::error::{Error, Result};
use crate::federation::{AggregationWeights, Federation};
use crate::nn::ParamVector;
use crate::report::{self, ChartKind, RunHistory, WeightsFile};
use crate::seed::{RoundStream, Seeds};
use crate::unfolding::{evaluate_logits, unfold_train, WeightLogits, WeightMap};

/// Version recorded in manifests. Builds may inject `git describe` output through
/// `UNFOLDFED_GIT_DESCRIBE`.
pub fn version_string() -> String {
    match option_env!("UNFOLDFED_GIT_DESCRIBE") {
        Some(describe) => format!("unfoldfed {describe}"),
        None => format!("unfoldfed v{}", env!("CARGO_PKG_VERSION")),
    }
}

/// Recorded in every manifest: the client partitions are stand-in constructions.
pub const SETTING_NOTE: &str = "heterogeneity settings are stand-in partitions of MNIST, not a published dataset split";

/// Loads MNIST from the configured location and builds the federation.
pub fn prepare(config: &ExperimentConfig) -> Result<Federation> {
    let paths = config.mnist_paths()?;
    let train = paths.load_train()?;
    let test = paths.load_test()?;
    prepare_from(config, &train, &test)
}

/// Builds the federation from already loaded splits.
pub fn prepare_from(config: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<Federation> {
    let seeds = config.seeds;
    let (pool, validation) = split_validation(train, config.validation_size, seeds.data)?;
    let test = match config.test_size {
        Some(n) => test_subset(test, n, seeds.data)?,
        None => test.clone(),
    };
    let spec = config.setting_spec();
    let shards = partition(&pool, &spec)?;
    let profiles = make_profiles(&spec, shards)?;
    Federation::new(config.model_spec()?, &pool, profiles, &validation, &test)
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub mode: Mode,
    pub history: RunHistory,
    pub final_params: ParamVector,
    pub logits: Option<WeightLogits>,
    pub weights: Option<WeightsFile>,
}

impl RunOutcome {
    pub fn final_accuracy(&self) -> f64 {
        self.history.final_accuracy().unwrap_or(f64::NAN)
    }
}

/// Runs the configured mode. Fixed-weight modes record a single pass as meta-iteration 0;
/// the unfolded mode records every meta-iteration and then the evaluation pass with the
/// learned weights as meta-iteration `M`.
pub fn run_mode(config: &ExperimentConfig, federation: &Federation) -> Result<RunOutcome> {
    let unfold = config.unfold_config();
    unfold.validate()?;
    let seeds = config.seeds;
    let mut history = RunHistory::new(federation.len(), config.echo());
    match config.mode {
        Mode::Fedavg | Mode::FixedUniform => {
            let theta = match config.mode {
                Mode::Fedavg => federation.fedavg_weights()?,
                _ => AggregationWeights::uniform(federation.len()),
            };
            let start = Instant::now();
            let (params, records) = federation.run_fixed(
                &federation.model.init(seeds.model),
                theta.as_slice(),
                config.rounds,
                &unfold.round_config(&WeightMap::softmax()),
                RoundStream::Evaluation,
                seeds.rounds,
            )?;
            history.record_timing("train", start.elapsed().as_secs_f64());
            for r in records {
                history.push(0, r)?;
            }
            Ok(RunOutcome {
                mode: config.mode,
                history,
                final_params: params,
                logits: None,
                weights: None,
            })
        }
        Mode::Unfolded => {
            let start = Instant::now();
            let (logits, trace) = unfold_train(federation, &unfold, None)?;
            history.record_timing("meta-train", start.elapsed().as_secs_f64());
            history.extend_trace(&trace)?;
            let start = Instant::now();
            let (params, records) = evaluate_logits(federation, &unfold, &logits)?;
            history.record_timing("evaluate", start.elapsed().as_secs_f64());
            for r in records {
                history.push(unfold.meta_iterations, r)?;
            }
            let map = unfold.weight_map(federation)?;
            let weights = WeightsFile::new(
                &logits,
                map.theta_matrix(&logits)?,
                map.on_simplex(),
                config.hash(),
                seeds,
                config.echo(),
            );
            Ok(RunOutcome {
                mode: config.mode,
                history,
                final_params: params,
                logits: Some(logits),
                weights: Some(weights),
            })
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub version: String,
    pub mode: Mode,
    pub setting: SettingKind,
    pub setting_note: &'static str,
    pub config_hash: String,
    pub seeds: Seeds,
    pub config: serde_json::Value,
    pub artifacts: Vec<String>,
}

/// Writes the enabled artifacts plus `manifest.json` into `dir`; returns their paths.
pub fn write_artifacts(config: &ExperimentConfig, outcome: &RunOutcome, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    if config.report.csv {
        let path = dir.join("history.csv");
        report::emit_csv(&outcome.history, &path)?;
        written.push(path);
    }
    if config.report.weights_json {
        if let Some(w) = &outcome.weights {
            let path = dir.join("weights.json");
            report::emit_weights_json(w, &path)?;
            written.push(path);
        }
    }
    if config.report.svg {
        for kind in ChartKind::ALL {
            let path = dir.join(format!("{}.svg", kind.file_stem()));
            report::render_svg(&outcome.history, kind, &path)?;
            written.push(path);
        }
    }
    let manifest = Manifest {
        version: version_string(),
        mode: outcome.mode,
        setting: config.setting,
        setting_note: SETTING_NOTE,
        config_hash: config.hash(),
        seeds: config.seeds,
        config: config.echo(),
        artifacts: written
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect(),
    };
    let path = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientSummary {
    pub client: usize,
    pub samples: usize,
    pub label_histogram: [usize; CLASSES],
    pub epochs: usize,
    pub participation: f64,
    pub fedavg_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartitionSummary {
    pub validation: usize,
    pub test: usize,
    pub clients: Vec<ClientSummary>,
}

/// Per-client shard statistics of a prepared federation.
pub fn partition_summary(federation: &Federation) -> Result<PartitionSummary> {
    let fedavg = federation.fedavg_weights()?;
    let clients = federation
        .clients
        .iter()
        .zip(fedavg.as_slice())
        .enumerate()
        .map(|(k, (c, &w))| {
            let mut hist = [0; CLASSES];
            for &label in c.data.labels() {
                hist[label] += 1;
            }
            ClientSummary {
                client: k,
                samples: c.profile.shard.size(),
                label_histogram: hist,
                epochs: c.profile.epochs,
                participation: c.profile.participation,
                fedavg_weight: w,
            }
        })
        .collect();
    Ok(PartitionSummary {
        validation: federation.validation.len(),
        test: federation.test.len(),
        clients,
    })
}
