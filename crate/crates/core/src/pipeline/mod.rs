//! Executes the regime: task run, algorithm elicitation, robustness runs, and
//! the intra/inter reproducibility matrix over them.
//!
//! Every run lives in its own directory:
//!
//! ```text
//! <run_dir>/
//!   manifest.json     run identity, decoding, dataset digest, timestamps
//!   outcomes.jsonl    one parsed response per datapoint, dataset order
//!   algorithm.txt     robustness runs only: the algorithm that was executed
//!   checkpoint.jsonl  while running; removed once the run completes
//!   state.json        while running; start timestamp for resumption
//! ```

use std::path::PathBuf;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::BackendError;
use crate::dataset::DatasetError;
use crate::metrics::MetricError;
use crate::prompt::PromptError;

mod elicit;
mod matrix;
mod run;

pub use elicit::{
    elicit_algorithm, elicit_or_load, load_algorithm, ElicitOptions, DEFAULT_EXAMPLES,
};
pub use matrix::{
    compute_matrix, matrix_file_name, run_matrix_job, MatrixJob, MatrixResult, MatrixSide,
    RunSummary, Variant, VariantScores,
};
pub use run::{
    run_robustness, run_task_prompt, BlockKind, DatapointOutcome, EvaluationRun, RunConfig,
    RunManifest, MANIFEST_FILE, OUTCOMES_FILE,
};

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Always reports the same instant; makes run artifacts byte-reproducible.
#[derive(Debug, Clone, Copy)]
pub struct FixedClock(pub DateTime<Utc>);

impl Clock for FixedClock {
    fn now(&self) -> DateTime<Utc> {
        self.0
    }
}

pub fn system_clock() -> Arc<dyn Clock> {
    Arc::new(SystemClock)
}

/// A fixed clock at `secs` past the Unix epoch; `None` when out of range.
pub fn epoch_clock(secs: i64) -> Option<Arc<dyn Clock>> {
    DateTime::from_timestamp(secs, 0).map(|t| Arc::new(FixedClock(t)) as Arc<dyn Clock>)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeStage {
    TaskPrompt,
    Robustness,
}

impl RegimeStage {
    /// Value of the `stage` request annotation.
    pub fn meta_value(self) -> &'static str {
        match self {
            RegimeStage::TaskPrompt => "task",
            RegimeStage::Robustness => "robustness",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for Decoding {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: crate::backend::DEFAULT_MAX_TOKENS,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("backend `{backend}` failed{}: {source}", datapoint.as_ref().map(|d| format!(" on `{d}`")).unwrap_or_default())]
    Backend {
        backend: String,
        datapoint: Option<String>,
        #[source]
        source: BackendError,
    },
    #[error("bundle `{bundle}` is for task `{bundle_task}`, dataset is `{dataset_task}`")]
    BundleMismatch {
        bundle: String,
        bundle_task: String,
        dataset_task: String,
    },
    #[error("no value available for placeholder `{{{name}}}` in `{template}`")]
    Unbindable { template: String, name: String },
    #[error("runs were made on different datasets ({left} vs {right})")]
    DatasetMismatch { left: String, right: String },
    #[error("run stopped after {completed} of {total} datapoints; rerun to resume")]
    Interrupted { completed: usize, total: usize },
    #[error("run directory {path} holds a different run: {reason}")]
    RunConflict { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
}

impl PipelineError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn corrupt(path: &std::path::Path, reason: impl ToString) -> Self {
        Self::Corrupt {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        }
    }
}

/// Writes `bytes` to `path` through a temporary sibling and a rename, so a
/// crash never leaves a half-written artifact.
pub(crate) fn write_atomic(path: &std::path::Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| PipelineError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| PipelineError::io(path, e))
}

pub(crate) fn to_pretty_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    bytes
}
