//! Run orchestration behind the `synergy-ctl` command line: configuration,
//! training and evaluation runs, and export of metrics and synergy
//! assignments.
//!
//! Every CSV written here starts with a `schema,<name>/<version>` row
//! followed by the column header.

mod config;
mod eval;
mod store;
mod tools;
mod train;

use std::path::{Path, PathBuf};

pub use config::{builtin_family, load_family, RunConfig};
pub use eval::{cmd_eval, confidence_interval, EvalPolicy, EvalRequest, EvalRow, EVAL_CSV_SCHEMA};
pub use store::{load_checkpoint, CheckpointMeta, LoadedPolicy, RobotMeta, StructureRecord};
pub use tools::{
    cmd_cluster, cmd_export_synergies, cmd_rank_check, contiguous_structure, numerical_rank, ClusterReport, RankReport,
    RankRequest,
};
pub use train::{cmd_train, train_seed, SeedSummary, METRICS_CSV_COLUMNS, METRICS_CSV_SCHEMA};

use crate::linkworld::LinkworldError;
use crate::numerics::NumericsError;
use crate::td3::Td3Error;

/// Environment variable naming the root that relative output paths are
/// resolved against.
pub const OUTPUT_ROOT_ENV: &str = "SYNERGY_CTL_OUT";

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid config field {field}: {reason}")]
    ConfigInvalid { field: String, reason: String },
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("rank {rank} exceeds {synergies} synergies on {variant}")]
    RankViolation { variant: String, rank: usize, synergies: usize },
    #[error("{path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Env(#[from] LinkworldError),
    #[error(transparent)]
    Training(#[from] Td3Error),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Synergy(#[from] crate::synergy::SynergyError),
    #[error(transparent)]
    Clustering(#[from] crate::clustering::ClusteringError),
    #[error(transparent)]
    Policy(#[from] crate::policy::PolicyError),
}

impl HarnessError {
    pub(crate) fn config(field: &str, reason: impl std::fmt::Display) -> Self {
        let reason = reason.to_string().replace('\n', " ");
        HarnessError::ConfigInvalid { field: field.to_string(), reason }
    }

    pub(crate) fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        HarnessError::Io { path: path.to_path_buf(), reason: e.to_string().replace('\n', " ") }
    }
}

/// Joins a relative `dir` onto `$SYNERGY_CTL_OUT` when that is set.
pub fn resolve_output(dir: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if dir.is_relative() && !root.is_empty() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

pub(crate) fn csv_writer(
    path: &Path,
    schema: &str,
    columns: &[&str],
) -> Result<csv::Writer<std::fs::File>, HarnessError> {
    let file = std::fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(file);
    w.write_record(["schema", schema]).map_err(|e| HarnessError::io(path, e))?;
    w.write_record(columns).map_err(|e| HarnessError::io(path, e))?;
    Ok(w)
}

pub(crate) fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}
