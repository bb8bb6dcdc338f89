//! Run configuration: one strict JSON document per experiment.
//!
//! Relative paths in `io` are resolved against the directory holding the
//! config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use star_core::grid::GridSpec;
use star_core::keyframes::{ExternalFeatureSpec, KeyframeConfig};
use star_core::model::StarConfig;
use star_core::train::TrainConfig;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridSpec,
    pub keyframes: KeyframeConfig,
    pub external: ExternalFeatureSpec,
    pub model: ModelSection,
    pub train: TrainSection,
    pub io: IoSection,
}

/// Network hyperparameters. Grid size, input channels and the external
/// feature width follow from the other sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub num_residual_blocks: usize,
    pub weight_layers_per_block: usize,
    pub filters: usize,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
    #[serde(default = "default_embed")]
    pub external_embed_dim: usize,
    #[serde(default)]
    pub l2_coeff: f64,
}

fn default_kernel() -> usize {
    3
}
fn default_embed() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Trailing intervals held out for testing; never seen in training.
    pub test_intervals: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub early_stop_patience: usize,
    #[serde(default = "default_retrain")]
    pub retrain_epochs: usize,
    /// Defaults to `test_intervals`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_intervals: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn default_batch() -> usize {
    16
}
fn default_lr() -> f64 {
    1e-3
}
fn default_patience() -> usize {
    10
}
fn default_retrain() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoSection {
    /// Frame series (`.stf`) to train and evaluate on.
    pub series: PathBuf,
    pub checkpoint: PathBuf,
    /// Per-epoch CSV written by `train`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_report: Option<PathBuf>,
    /// Metrics JSON written by `eval`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_report: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| CliError::Config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and resolves relative `io` paths against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let io = &mut cfg.io;
        for p in [&mut io.series, &mut io.checkpoint]
            .into_iter()
            .chain(io.train_report.as_mut())
            .chain(io.eval_report.as_mut())
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.grid.validate()?;
        self.keyframes.validate()?;
        self.external.validate()?;
        if self.external.intervals_per_day as u64 * self.grid.interval_seconds as u64 != 86_400 {
            return Err(CliError::Config(format!(
                "external.intervals_per_day = {} does not match grid.interval_seconds = {}",
                self.external.intervals_per_day, self.grid.interval_seconds
            )));
        }
        if self.train.test_intervals == 0 {
            return Err(CliError::Config("train.test_intervals must be positive".into()));
        }
        self.star_config().validate()?;
        self.train_config().validate()?;
        Ok(())
    }

    pub fn star_config(&self) -> StarConfig {
        let m = &self.model;
        StarConfig {
            rows: self.grid.rows,
            cols: self.grid.cols,
            input_channels: self.keyframes.input_channels(),
            num_residual_blocks: m.num_residual_blocks,
            weight_layers_per_block: m.weight_layers_per_block,
            filters: m.filters,
            kernel_size: m.kernel_size,
            external_embed_dim: m.external_embed_dim,
            external_dim: self.external.dim(),
            l2_coeff: m.l2_coeff,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            max_epochs: t.max_epochs,
            early_stop_patience: t.early_stop_patience,
            retrain_epochs: t.retrain_epochs,
            validation_intervals: Some(t.validation_intervals.unwrap_or(t.test_intervals)),
            seed: t.seed,
            ..TrainConfig::default()
        }
    }

    /// Pretty JSON with every default filled in.
    pub fn to_normalized_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Input files must exist and output directories must be present.
pub fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} {} does not exist", path.display())))
    }
}

pub fn require_parent(path: &Path, what: &str) -> Result<(), CliError> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if parent.is_dir() {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "directory for {what} {} does not exist",
            path.display()
        )))
    }
}
