use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::elicit::{elicit_or_load, ElicitOptions};
use super::run::{run_robustness, run_task_prompt, EvaluationRun, RunConfig};
use super::{to_pretty_json, write_atomic, Clock, Decoding, PipelineError, RegimeStage};
use crate::backend::Backend;
use crate::dataset::Dataset;
use crate::metrics::{perrr, prerr, MetricError};
use crate::prompt::RegimeBundle;

/// Which pair of runs a score compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Reference task run vs. its algorithm executed on the same model.
    PromptIntra,
    /// Reference task run vs. its algorithm executed on the other model.
    PromptInter,
    /// Algorithm on the same model vs. algorithm on the other model.
    AlgorithmInter,
}

impl Variant {
    pub const ALL: [Variant; 3] = [
        Variant::PromptIntra,
        Variant::PromptInter,
        Variant::AlgorithmInter,
    ];

    /// Column stem such as `GP_G`, `GP_L` or `GA_L` for tags `G` and `L`.
    pub fn stem(self, reference_tag: &str, other_tag: &str) -> String {
        match self {
            Variant::PromptIntra => format!("{reference_tag}P_{reference_tag}"),
            Variant::PromptInter => format!("{reference_tag}P_{other_tag}"),
            Variant::AlgorithmInter => format!("{reference_tag}A_{other_tag}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub backend_name: String,
    pub model_id: String,
    pub regime_stage: RegimeStage,
    pub records: usize,
    pub macro_f1: f64,
    pub anomaly_count: usize,
    pub blocked_count: usize,
    pub macro_f1_excluding_blocked: Option<f64>,
}

impl From<&EvaluationRun> for RunSummary {
    fn from(run: &EvaluationRun) -> Self {
        Self {
            run_id: run.manifest.run_id.clone(),
            backend_name: run.manifest.backend_name.clone(),
            model_id: run.manifest.model_id.clone(),
            regime_stage: run.manifest.regime_stage,
            records: run.outcomes.len(),
            macro_f1: run.macro_f1.macro_f1,
            anomaly_count: run.anomaly_count,
            blocked_count: run.blocked_count,
            macro_f1_excluding_blocked: run.macro_f1_excluding_blocked,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantScores {
    pub variant: Variant,
    pub perrr_name: String,
    pub prerr_name: String,
    /// Macro-F1 of the run in the denominator.
    pub reference_macro: f64,
    /// Macro-F1 of the run being compared against it.
    pub executing_macro: f64,
    /// `None` when the reference Macro-F1 is zero and PerRR is undefined.
    pub perrr: Option<f64>,
    pub prerr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixResult {
    pub task_id: String,
    pub reference_tag: String,
    pub other_tag: String,
    pub dataset_digest: String,
    pub algorithm_ref: Option<String>,
    pub task_run: RunSummary,
    pub algo_on_self: RunSummary,
    pub algo_on_other: RunSummary,
    pub variants: Vec<VariantScores>,
}

/// `matrix__<reference>__<other>.json`, named by backend.
pub fn matrix_file_name(reference_backend: &str, other_backend: &str) -> String {
    format!("matrix__{reference_backend}__{other_backend}.json")
}

impl MatrixResult {
    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        write_atomic(path, &to_pretty_json(self))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::corrupt(path, e))
    }

    pub fn variant(&self, v: Variant) -> &VariantScores {
        self.variants
            .iter()
            .find(|s| s.variant == v)
            .expect("all variants present")
    }

    /// Looks a score up by column name, e.g. `PerRR_GP_G`.
    pub fn score(&self, name: &str) -> Option<Option<f64>> {
        self.variants.iter().find_map(|s| {
            if s.perrr_name == name {
                Some(s.perrr)
            } else if s.prerr_name == name {
                Some(Some(s.prerr))
            } else {
                None
            }
        })
    }
}

fn score_pair(
    variant: Variant,
    reference: &EvaluationRun,
    executing: &EvaluationRun,
    reference_tag: &str,
    other_tag: &str,
) -> Result<VariantScores, PipelineError> {
    let stem = variant.stem(reference_tag, other_tag);
    let perrr = match perrr(reference.macro_f1.macro_f1, executing.macro_f1.macro_f1) {
        Ok(v) => Some(v),
        Err(MetricError::ZeroReference) => None,
        Err(e) => return Err(e.into()),
    };
    Ok(VariantScores {
        variant,
        perrr_name: format!("PerRR_{stem}"),
        prerr_name: format!("PreRR_{stem}"),
        reference_macro: reference.macro_f1.macro_f1,
        executing_macro: executing.macro_f1.macro_f1,
        perrr,
        prerr: prerr(&reference.predictions(), &executing.predictions())?,
    })
}

/// Scores the three comparisons of one reference model. The earlier-listed
/// run of each pair is always the PerRR denominator.
pub fn compute_matrix(
    task: &EvaluationRun,
    algo_on_self: &EvaluationRun,
    algo_on_other: &EvaluationRun,
    reference_tag: &str,
    other_tag: &str,
) -> Result<MatrixResult, PipelineError> {
    for run in [algo_on_self, algo_on_other] {
        if run.manifest.dataset_digest != task.manifest.dataset_digest {
            return Err(PipelineError::DatasetMismatch {
                left: task.manifest.dataset_digest.clone(),
                right: run.manifest.dataset_digest.clone(),
            });
        }
    }
    let variants = vec![
        score_pair(
            Variant::PromptIntra,
            task,
            algo_on_self,
            reference_tag,
            other_tag,
        )?,
        score_pair(
            Variant::PromptInter,
            task,
            algo_on_other,
            reference_tag,
            other_tag,
        )?,
        score_pair(
            Variant::AlgorithmInter,
            algo_on_self,
            algo_on_other,
            reference_tag,
            other_tag,
        )?,
    ];
    Ok(MatrixResult {
        task_id: task.manifest.task_id.clone(),
        reference_tag: reference_tag.to_string(),
        other_tag: other_tag.to_string(),
        dataset_digest: task.manifest.dataset_digest.clone(),
        algorithm_ref: algo_on_self.manifest.algorithm_ref.clone(),
        task_run: task.into(),
        algo_on_self: algo_on_self.into(),
        algo_on_other: algo_on_other.into(),
        variants,
    })
}

/// One model's side of a matrix job.
pub struct MatrixSide<'a> {
    pub backend: &'a Backend,
    /// Bundle whose prompts this model receives.
    pub bundle: &'a RegimeBundle,
    pub tag: String,
    /// Provider knobs added to this model's requests.
    pub extra: BTreeMap<String, String>,
}

/// The full workflow for one reference model: task run, algorithm, and the
/// algorithm executed on itself and on the other model.
pub struct MatrixJob<'a> {
    pub dataset: &'a Dataset,
    pub reference: MatrixSide<'a>,
    pub other: MatrixSide<'a>,
    /// Directory holding every run of this task within the run set.
    pub root: PathBuf,
    pub concurrency: usize,
    pub decoding: Decoding,
    pub examples: usize,
    pub clock: Arc<dyn Clock>,
}

impl MatrixJob<'_> {
    fn run_config(&self, run_id: String, side: &MatrixSide<'_>) -> RunConfig {
        let mut cfg = RunConfig::new(run_id.clone())
            .in_dir(self.root.join(run_id))
            .with_concurrency(self.concurrency)
            .with_clock(self.clock.clone());
        cfg.decoding = self.decoding;
        cfg.extra = side.extra.clone();
        cfg
    }

    pub fn matrix_path(&self) -> PathBuf {
        self.root.join(matrix_file_name(
            self.reference.backend.name(),
            self.other.backend.name(),
        ))
    }
}

/// Runs (or resumes) a matrix job and stores `matrix__<ref>__<other>.json`.
/// Completed runs and stored algorithms are reused, so a rerun over a warm
/// directory issues no backend calls.
pub fn run_matrix_job(job: &MatrixJob<'_>) -> Result<MatrixResult, PipelineError> {
    let r = &job.reference;
    let o = &job.other;
    let task = run_task_prompt(
        job.dataset,
        r.bundle,
        r.backend,
        &job.run_config(format!("task__{}", r.backend.name()), r),
    )?;

    let opts = ElicitOptions {
        examples: job.examples,
        decoding: job.decoding,
        extra: r.extra.clone(),
        clock: job.clock.clone(),
    };
    let algo_path = job
        .root
        .join("algorithms")
        .join(format!("{}.json", r.backend.name()));
    let algorithm = elicit_or_load(&algo_path, job.dataset, r.bundle, r.backend, &opts)?;

    let on_self = run_robustness(
        job.dataset,
        r.bundle,
        &algorithm,
        r.backend,
        &job.run_config(
            format!("robust__{}__on__{}", r.backend.name(), r.backend.name()),
            r,
        ),
    )?;
    let on_other = run_robustness(
        job.dataset,
        o.bundle,
        &algorithm,
        o.backend,
        &job.run_config(
            format!("robust__{}__on__{}", r.backend.name(), o.backend.name()),
            o,
        ),
    )?;
    let matrix = compute_matrix(&task, &on_self, &on_other, &r.tag, &o.tag)?;
    matrix.save(&job.matrix_path())?;
    Ok(matrix)
}
