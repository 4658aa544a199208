use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use super::run::Binder;
use super::{
    to_pretty_json, write_atomic, Clock, Decoding, PipelineError, RegimeStage, SystemClock,
};
use crate::backend::{complete, Backend, ChatMessage, ChatRequest, META_INPUT, META_STAGE};
use crate::dataset::{DataRecord, Dataset};
use crate::prompt::{render, PromptError, ReQuestAlgorithm, RegimeBundle};

/// Sample classifications shown to the model before asking for its steps.
pub const DEFAULT_EXAMPLES: usize = 3;

#[derive(Clone)]
pub struct ElicitOptions {
    /// Number of datapoints classified before the request prompts; the first
    /// is the conversation context, the rest become an examples block.
    pub examples: usize,
    pub decoding: Decoding,
    pub extra: BTreeMap<String, String>,
    pub clock: Arc<dyn Clock>,
}

impl Default for ElicitOptions {
    fn default() -> Self {
        Self {
            examples: DEFAULT_EXAMPLES,
            decoding: Decoding::default(),
            extra: BTreeMap::new(),
            clock: Arc::new(SystemClock),
        }
    }
}

fn send(backend: &Backend, req: ChatRequest) -> Result<String, PipelineError> {
    complete(backend, &req)
        .map(|r| r.content)
        .map_err(|source| PipelineError::Backend {
            backend: backend.name().to_string(),
            datapoint: None,
            source,
        })
}

fn examples_block(pairs: &[(&DataRecord, String)]) -> String {
    let mut block = String::from("Here are more inputs with the answers you gave for them:\n");
    for (record, answer) in pairs {
        block.push_str(&format!(
            "\nInput:\n```{}```\nYour answer: {}\n",
            record.text,
            answer.trim()
        ));
    }
    block
}

/// Continues one task exchange with the bundle's request prompts and keeps
/// the final assistant message, verbatim, as the algorithm.
pub fn elicit_algorithm(
    dataset: &Dataset,
    sample: &[DataRecord],
    bundle: &RegimeBundle,
    backend: &Backend,
    opts: &ElicitOptions,
) -> Result<ReQuestAlgorithm, PipelineError> {
    let Some((first, rest)) = sample.split_first() else {
        return Err(PipelineError::Dataset(
            crate::dataset::DatasetError::Empty {
                task_id: dataset.task_id().to_string(),
            },
        ));
    };
    if bundle.request_prompts.is_empty() {
        return Err(PromptError::InvalidBundle {
            bundle: bundle.name.clone(),
            reason: "no request prompts".into(),
        }
        .into());
    }
    let binder = Binder::new(&bundle.task_prompt, dataset, None)?;
    let build = |messages: Vec<ChatMessage>, stage: &str, input: Option<&str>| {
        let mut req = backend.request(messages).with_meta(META_STAGE, stage);
        if let Some(input) = input {
            req = req.with_meta(META_INPUT, input);
        }
        req.temperature = opts.decoding.temperature;
        req.max_tokens = opts.decoding.max_tokens;
        req.extra = opts.extra.clone();
        req
    };
    let task_message = |record: &DataRecord| -> Result<ChatMessage, PipelineError> {
        Ok(ChatMessage::user(render(
            &bundle.task_prompt,
            &binder.bindings(record)?,
        )?))
    };
    let task_stage = RegimeStage::TaskPrompt.meta_value();

    let mut transcript = vec![task_message(first)?];
    let answer = send(
        backend,
        build(transcript.clone(), task_stage, Some(&first.text)),
    )?;
    transcript.push(ChatMessage::assistant(answer));

    let extra_count = opts.examples.saturating_sub(1).min(rest.len());
    let mut examples = Vec::new();
    for record in &rest[..extra_count] {
        let answer = send(
            backend,
            build(vec![task_message(record)?], task_stage, Some(&record.text)),
        )?;
        examples.push((record, answer));
    }

    for (i, prompt) in bundle.request_prompts.iter().enumerate() {
        let content = if i == 0 && !examples.is_empty() {
            format!("{}\n\n{prompt}", examples_block(&examples))
        } else {
            prompt.clone()
        };
        transcript.push(ChatMessage::user(content));
        let reply = send(backend, build(transcript.clone(), "request", None))?;
        transcript.push(ChatMessage::assistant(reply));
    }
    let text = transcript
        .last()
        .map(|m| m.content.clone())
        .unwrap_or_default();
    if text.trim().is_empty() {
        return Err(PromptError::EmptyAlgorithm.into());
    }
    Ok(ReQuestAlgorithm::new(
        text,
        backend.model_id(),
        transcript,
        opts.clock.now(),
    )?)
}

/// Reads an algorithm stored by [`elicit_or_load`].
pub fn load_algorithm(path: &Path) -> Result<ReQuestAlgorithm, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::corrupt(path, e))
}

/// Reuses the algorithm stored at `path` or elicits and stores a new one.
/// Keeping one algorithm per task and model stops it drifting between runs;
/// a fresh elicitation needs a fresh location (a new run set).
pub fn elicit_or_load(
    path: &Path,
    dataset: &Dataset,
    bundle: &RegimeBundle,
    backend: &Backend,
    opts: &ElicitOptions,
) -> Result<ReQuestAlgorithm, PipelineError> {
    if path.exists() {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let algo: ReQuestAlgorithm =
            serde_json::from_str(&text).map_err(|e| PipelineError::corrupt(path, e))?;
        if algo.source_model != backend.model_id() {
            return Err(PipelineError::RunConflict {
                path: path.to_path_buf(),
                reason: format!(
                    "stored algorithm comes from `{}`, not `{}`",
                    algo.source_model,
                    backend.model_id()
                ),
            });
        }
        return Ok(algo);
    }
    let n = opts.examples.max(1).min(dataset.len());
    let algo = elicit_algorithm(dataset, &dataset.records()[..n], bundle, backend, opts)?;
    write_atomic(path, &to_pretty_json(&algo))?;
    Ok(algo)
}
