use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::thread;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{
    to_pretty_json, write_atomic, Clock, Decoding, PipelineError, RegimeStage, SystemClock,
};
use crate::backend::{
    complete, Backend, BackendError, ChatMessage, META_DATAPOINT, META_INPUT, META_STAGE,
};
use crate::dataset::{render_catalog, DataRecord, Dataset};
use crate::labels::{GoldStandard, LabelSet, Predictions};
use crate::metrics::{macro_f1, MacroF1Result};
use crate::parser::{parse_response, ParseOutcome};
use crate::prompt::{
    render, PromptTemplate, ReQuestAlgorithm, RegimeBundle, ALGORITHM_PLACEHOLDERS,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const OUTCOMES_FILE: &str = "outcomes.jsonl";
pub const ALGORITHM_FILE: &str = "algorithm.txt";
const CHECKPOINT_FILE: &str = "checkpoint.jsonl";
const STATE_FILE: &str = "state.json";

/// How one run is executed and where it is persisted.
#[derive(Clone)]
pub struct RunConfig {
    pub run_id: String,
    /// Without a directory the run is kept in memory only (no resumption).
    pub run_dir: Option<PathBuf>,
    pub concurrency: usize,
    /// Process at most this many new datapoints, then stop with
    /// [`PipelineError::Interrupted`]. Used to split long runs.
    pub stop_after: Option<usize>,
    pub decoding: Decoding,
    /// Provider knobs added to every request.
    pub extra: BTreeMap<String, String>,
    pub clock: Arc<dyn Clock>,
}

impl RunConfig {
    pub fn new(run_id: impl Into<String>) -> Self {
        Self {
            run_id: run_id.into(),
            run_dir: None,
            concurrency: 1,
            stop_after: None,
            decoding: Decoding::default(),
            extra: BTreeMap::new(),
            clock: Arc::new(SystemClock),
        }
    }

    pub fn in_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.run_dir = Some(dir.into());
        self
    }

    pub fn with_concurrency(mut self, n: usize) -> Self {
        self.concurrency = n.max(1);
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn stop_after(mut self, n: Option<usize>) -> Self {
        self.stop_after = n;
        self
    }
}

impl std::fmt::Debug for RunConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RunConfig")
            .field("run_id", &self.run_id)
            .field("run_dir", &self.run_dir)
            .field("concurrency", &self.concurrency)
            .field("stop_after", &self.stop_after)
            .field("decoding", &self.decoding)
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub task_id: String,
    pub bundle: String,
    pub backend_name: String,
    pub model_id: String,
    pub provider: String,
    pub regime_stage: RegimeStage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub algorithm_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub algorithm_source_model: Option<String>,
    pub decoding: Decoding,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, String>,
    pub dataset_digest: String,
    pub dataset_records: usize,
    pub started: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished: Option<DateTime<Utc>>,
}

impl RunManifest {
    /// True when both describe the same run, ignoring timestamps.
    fn same_run(&self, other: &RunManifest) -> bool {
        let strip = |m: &RunManifest| RunManifest {
            started: DateTime::<Utc>::UNIX_EPOCH,
            finished: None,
            ..m.clone()
        };
        strip(self) == strip(other)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Safety,
    Recitation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatapointOutcome {
    pub id: String,
    pub response: String,
    #[serde(flatten)]
    pub parse: ParseOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocked: Option<BlockKind>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationRun {
    pub manifest: RunManifest,
    /// Dataset order.
    pub outcomes: Vec<DatapointOutcome>,
    pub macro_f1: MacroF1Result,
    /// Failed parses, blocked datapoints included.
    pub anomaly_count: usize,
    pub blocked_count: usize,
    /// Macro-F1 over the datapoints that were not blocked, if any remain.
    pub macro_f1_excluding_blocked: Option<f64>,
}

impl EvaluationRun {
    fn assemble(
        manifest: RunManifest,
        outcomes: Vec<DatapointOutcome>,
        gold: &GoldStandard,
    ) -> Result<Self, PipelineError> {
        let predictions: Predictions = outcomes
            .iter()
            .map(|o| (o.id.clone(), o.parse.labels.clone()))
            .collect();
        let macro_result = macro_f1(&predictions, gold)?;
        let anomaly_count = outcomes.iter().filter(|o| o.parse.is_failed()).count();
        let blocked: Vec<String> = outcomes
            .iter()
            .filter(|o| o.blocked.is_some())
            .map(|o| o.id.clone())
            .collect();
        let macro_f1_excluding_blocked = if blocked.is_empty() {
            Some(macro_result.macro_f1)
        } else {
            let kept: BTreeMap<String, LabelSet> = gold
                .entries()
                .iter()
                .filter(|(id, _)| !blocked.contains(id))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect();
            match GoldStandard::new(gold.space().clone(), kept) {
                Ok(sub) => {
                    let preds: Predictions = predictions
                        .iter()
                        .filter(|(id, _)| sub.get(id).is_some())
                        .map(|(k, v)| (k.clone(), v.clone()))
                        .collect();
                    Some(macro_f1(&preds, &sub)?.macro_f1)
                }
                Err(_) => None,
            }
        };
        Ok(Self {
            manifest,
            outcomes,
            macro_f1: macro_result,
            anomaly_count,
            blocked_count: blocked.len(),
            macro_f1_excluding_blocked,
        })
    }

    pub fn predictions(&self) -> Predictions {
        self.outcomes
            .iter()
            .map(|o| (o.id.clone(), o.parse.labels.clone()))
            .collect()
    }

    /// Rebuilds a completed run from its directory, rescoring against `dataset`.
    pub fn load(run_dir: &Path, dataset: &Dataset) -> Result<Self, PipelineError> {
        let manifest = read_manifest(&run_dir.join(MANIFEST_FILE))?;
        if manifest.dataset_digest != dataset.digest() {
            return Err(PipelineError::DatasetMismatch {
                left: manifest.dataset_digest,
                right: dataset.digest(),
            });
        }
        let path = run_dir.join(OUTCOMES_FILE);
        let outcomes = read_outcome_lines(&path, false)?;
        Self::assemble(manifest, outcomes, &dataset.gold_standard())
    }

    fn write(&self, dir: &Path, algorithm: Option<&ReQuestAlgorithm>) -> Result<(), PipelineError> {
        let mut lines = Vec::new();
        for o in &self.outcomes {
            serde_json::to_writer(&mut lines, o).expect("serializable");
            lines.push(b'\n');
        }
        write_atomic(&dir.join(OUTCOMES_FILE), &lines)?;
        if let Some(algo) = algorithm {
            let mut text = algo.text.clone().into_bytes();
            if !text.ends_with(b"\n") {
                text.push(b'\n');
            }
            write_atomic(&dir.join(ALGORITHM_FILE), &text)?;
        }
        // The manifest goes last: its presence marks the run as complete.
        write_atomic(&dir.join(MANIFEST_FILE), &to_pretty_json(&self.manifest))
    }
}

fn read_manifest(path: &Path) -> Result<RunManifest, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::corrupt(path, e))
}

/// Reads JSON-lines outcomes. A checkpoint may end in a torn line, which is
/// dropped; a final artifact must parse completely.
fn read_outcome_lines(
    path: &Path,
    tolerate_tail: bool,
) -> Result<Vec<DatapointOutcome>, PipelineError> {
    let file = fs::File::open(path).map_err(|e| PipelineError::io(path, e))?;
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(|e| PipelineError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(o) => out.push(o),
            Err(_) if tolerate_tail && i + 1 == lines.len() => {
                tracing::warn!(path = %path.display(), "dropping torn checkpoint line");
            }
            Err(e) => return Err(PipelineError::corrupt(path, format!("line {}: {e}", i + 1))),
        }
    }
    Ok(out)
}

/// Values for the placeholders of one template, given a datapoint.
pub(super) struct Binder<'a> {
    template: &'a PromptTemplate,
    catalog: Option<String>,
    classes: String,
    algorithm: Option<&'a str>,
}

impl<'a> Binder<'a> {
    pub(super) fn new(
        template: &'a PromptTemplate,
        dataset: &Dataset,
        algorithm: Option<&'a str>,
    ) -> Result<Self, PipelineError> {
        let catalog = match dataset.catalog() {
            Some(c) if template.requires("training_prompt") => Some(render_catalog(c)?),
            _ => None,
        };
        let binder = Self {
            template,
            catalog,
            classes: dataset.space().labels().join(", "),
            algorithm,
        };
        // Fail before any backend call if a placeholder cannot be bound.
        binder.bindings(&dataset.records()[0])?;
        Ok(binder)
    }

    pub(super) fn bindings(
        &self,
        record: &DataRecord,
    ) -> Result<BTreeMap<String, String>, PipelineError> {
        let mut out = BTreeMap::new();
        for name in self.template.required_placeholders() {
            let value = match name.as_str() {
                "inp" | "query" | "text" => Some(record.text.clone()),
                "classes" => Some(self.classes.clone()),
                "training_prompt" => self.catalog.clone(),
                n if ALGORITHM_PLACEHOLDERS.contains(&n) => self.algorithm.map(str::to_string),
                _ => None,
            };
            let value = value.ok_or_else(|| PipelineError::Unbindable {
                template: self.template.name().to_string(),
                name: name.clone(),
            })?;
            out.insert(name.clone(), value);
        }
        Ok(out)
    }
}

/// Renders, sends and parses one datapoint. Blocked replies become outcomes;
/// other backend failures are returned.
pub(super) fn process(
    record: &DataRecord,
    binder: &Binder<'_>,
    stage: RegimeStage,
    dataset: &Dataset,
    backend: &Backend,
    cfg: &RunConfig,
) -> Result<DatapointOutcome, PipelineError> {
    let prompt = render(binder.template, &binder.bindings(record)?)?;
    let mut req = backend
        .request(vec![ChatMessage::user(prompt)])
        .with_meta(META_STAGE, stage.meta_value())
        .with_meta(META_INPUT, record.text.clone())
        .with_meta(META_DATAPOINT, record.id.clone());
    req.temperature = cfg.decoding.temperature;
    req.max_tokens = cfg.decoding.max_tokens;
    req.extra = cfg.extra.clone();
    match complete(backend, &req) {
        Ok(resp) => Ok(DatapointOutcome {
            id: record.id.clone(),
            parse: parse_response(&resp.content, dataset.space()),
            response: resp.content,
            blocked: None,
        }),
        Err(err) if err.is_blocked() => {
            let kind = match err {
                BackendError::RecitationBlocked { .. } => BlockKind::Recitation,
                _ => BlockKind::Safety,
            };
            tracing::info!(datapoint = %record.id, ?kind, "response blocked");
            Ok(DatapointOutcome {
                id: record.id.clone(),
                response: String::new(),
                parse: ParseOutcome::failed(match kind {
                    BlockKind::Safety => "blocked by safety settings",
                    BlockKind::Recitation => "blocked as recitation",
                }),
                blocked: Some(kind),
            })
        }
        Err(source) => Err(PipelineError::Backend {
            backend: backend.name().to_string(),
            datapoint: Some(record.id.clone()),
            source,
        }),
    }
}

#[derive(Serialize, Deserialize)]
struct RunState {
    manifest: RunManifest,
}

struct Checkpoint {
    path: PathBuf,
    file: fs::File,
}

impl Checkpoint {
    fn append(&mut self, outcome: &DatapointOutcome) -> Result<(), PipelineError> {
        let mut line = serde_json::to_vec(outcome).expect("serializable");
        line.push(b'\n');
        self.file
            .write_all(&line)
            .and_then(|_| self.file.flush())
            .map_err(|e| PipelineError::io(&self.path, e))
    }
}

/// Returns already-finished outcomes and the start time of a resumed run, or
/// the completed run itself when `manifest.json` already exists.
enum Resume {
    Completed(Box<RunManifest>),
    Partial {
        started: DateTime<Utc>,
        done: Vec<DatapointOutcome>,
    },
    Fresh,
}

fn resume_state(
    dir: &Path,
    manifest: &RunManifest,
    dataset: &Dataset,
) -> Result<Resume, PipelineError> {
    let conflict = |reason: &str| PipelineError::RunConflict {
        path: dir.to_path_buf(),
        reason: reason.to_string(),
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    if manifest_path.exists() {
        let existing = read_manifest(&manifest_path)?;
        if !existing.same_run(manifest) {
            return Err(conflict(
                "completed run differs in backend, prompt, algorithm or dataset; use a new run id",
            ));
        }
        return Ok(Resume::Completed(Box::new(existing)));
    }
    let state_path = dir.join(STATE_FILE);
    if !state_path.exists() {
        return Ok(Resume::Fresh);
    }
    let text = fs::read_to_string(&state_path).map_err(|e| PipelineError::io(&state_path, e))?;
    let state: RunState =
        serde_json::from_str(&text).map_err(|e| PipelineError::corrupt(&state_path, e))?;
    if !state.manifest.same_run(manifest) {
        return Err(conflict(
            "partial run differs in backend, prompt, algorithm or dataset; use a new run id",
        ));
    }
    let checkpoint = dir.join(CHECKPOINT_FILE);
    let mut done = Vec::new();
    if checkpoint.exists() {
        let mut seen = HashMap::new();
        for o in read_outcome_lines(&checkpoint, true)? {
            if !dataset.records().iter().any(|r| r.id == o.id) {
                return Err(PipelineError::corrupt(
                    &checkpoint,
                    format!("unknown datapoint `{}`", o.id),
                ));
            }
            seen.entry(o.id.clone()).or_insert(o);
        }
        done = seen.into_values().collect();
    }
    Ok(Resume::Partial {
        started: state.manifest.started,
        done,
    })
}

#[allow(clippy::too_many_arguments)]
fn execute(
    dataset: &Dataset,
    bundle: &RegimeBundle,
    template: &PromptTemplate,
    stage: RegimeStage,
    algorithm: Option<&ReQuestAlgorithm>,
    backend: &Backend,
    cfg: &RunConfig,
) -> Result<EvaluationRun, PipelineError> {
    if !bundle.serves(dataset.task_id()) {
        return Err(PipelineError::BundleMismatch {
            bundle: bundle.name.clone(),
            bundle_task: bundle.task_id.clone(),
            dataset_task: dataset.task_id().to_string(),
        });
    }
    let binder = Binder::new(template, dataset, algorithm.map(|a| a.text.as_str()))?;
    let gold = dataset.gold_standard();
    let mut manifest = RunManifest {
        run_id: cfg.run_id.clone(),
        task_id: dataset.task_id().to_string(),
        bundle: bundle.name.clone(),
        backend_name: backend.name().to_string(),
        model_id: backend.model_id().to_string(),
        provider: backend.provider_identity(),
        regime_stage: stage,
        algorithm_ref: algorithm.map(|a| a.id.clone()),
        algorithm_source_model: algorithm.map(|a| a.source_model.clone()),
        decoding: cfg.decoding,
        extra: cfg.extra.clone(),
        dataset_digest: dataset.digest(),
        dataset_records: dataset.len(),
        started: cfg.clock.now(),
        finished: None,
    };

    let mut done: Vec<DatapointOutcome> = Vec::new();
    let mut checkpoint = None;
    if let Some(dir) = &cfg.run_dir {
        match resume_state(dir, &manifest, dataset)? {
            Resume::Completed(existing) => {
                tracing::info!(run = %cfg.run_id, "run already complete; loading artifacts");
                let outcomes = read_outcome_lines(&dir.join(OUTCOMES_FILE), false)?;
                return EvaluationRun::assemble(*existing, outcomes, &gold);
            }
            Resume::Partial {
                started,
                done: prior,
            } => {
                tracing::info!(run = %cfg.run_id, done = prior.len(), "resuming run");
                manifest.started = started;
                done = prior;
            }
            Resume::Fresh => {
                write_atomic(
                    &dir.join(STATE_FILE),
                    &to_pretty_json(&RunState {
                        manifest: manifest.clone(),
                    }),
                )?;
            }
        }
        let path = dir.join(CHECKPOINT_FILE);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| PipelineError::io(&path, e))?;
        checkpoint = Some(Checkpoint { path, file });
    }

    let finished_ids: std::collections::HashSet<String> =
        done.iter().map(|o| o.id.clone()).collect();
    let pending: Vec<&DataRecord> = dataset
        .records()
        .iter()
        .filter(|r| !finished_ids.contains(&r.id))
        .collect();
    let budget = cfg
        .stop_after
        .map_or(pending.len(), |n| n.min(pending.len()));

    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let mut first_error: Option<PipelineError> = None;
    thread::scope(|scope| {
        let (tx, rx) = mpsc::channel();
        for _ in 0..cfg.concurrency.max(1).min(budget.max(1)) {
            let tx = tx.clone();
            let (pending, binder, next, abort) = (&pending, &binder, &next, &abort);
            scope.spawn(move || loop {
                if abort.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= budget {
                    break;
                }
                let result = process(pending[i], binder, stage, dataset, backend, cfg);
                if result.is_err() {
                    abort.store(true, Ordering::SeqCst);
                }
                if tx.send(result).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for result in rx {
            match result {
                Ok(outcome) => {
                    if let Some(cp) = checkpoint.as_mut() {
                        if let Err(e) = cp.append(&outcome) {
                            abort.store(true, Ordering::SeqCst);
                            first_error.get_or_insert(e);
                        }
                    }
                    done.push(outcome);
                }
                Err(e) => {
                    first_error.get_or_insert(e);
                }
            }
        }
    });
    if let Some(err) = first_error {
        return Err(err);
    }
    if done.len() < dataset.len() {
        return Err(PipelineError::Interrupted {
            completed: done.len(),
            total: dataset.len(),
        });
    }

    let mut by_id: HashMap<String, DatapointOutcome> =
        done.into_iter().map(|o| (o.id.clone(), o)).collect();
    let outcomes: Vec<DatapointOutcome> = dataset
        .records()
        .iter()
        .map(|r| by_id.remove(&r.id).expect("every datapoint processed"))
        .collect();
    manifest.finished = Some(cfg.clock.now());
    let run = EvaluationRun::assemble(manifest, outcomes, &gold)?;
    if let Some(dir) = &cfg.run_dir {
        drop(checkpoint);
        run.write(dir, algorithm)?;
        for file in [CHECKPOINT_FILE, STATE_FILE] {
            let path = dir.join(file);
            fs::remove_file(&path).map_err(|e| PipelineError::io(&path, e))?;
        }
    }
    Ok(run)
}

/// Runs the bundle's task prompt over every record.
pub fn run_task_prompt(
    dataset: &Dataset,
    bundle: &RegimeBundle,
    backend: &Backend,
    cfg: &RunConfig,
) -> Result<EvaluationRun, PipelineError> {
    execute(
        dataset,
        bundle,
        &bundle.task_prompt,
        RegimeStage::TaskPrompt,
        None,
        backend,
        cfg,
    )
}

/// Runs the robustness prompt with `algorithm` bound into it. The executing
/// backend may differ from the algorithm's source model (inter-LLM).
pub fn run_robustness(
    dataset: &Dataset,
    bundle: &RegimeBundle,
    algorithm: &ReQuestAlgorithm,
    backend: &Backend,
    cfg: &RunConfig,
) -> Result<EvaluationRun, PipelineError> {
    execute(
        dataset,
        bundle,
        &bundle.robustness_prompt,
        RegimeStage::Robustness,
        Some(algorithm),
        backend,
        cfg,
    )
}
