//! Prompt templates and regime bundles (task, ReQuest and robustness prompts).
//!
//! Placeholders are written `{name}` with `name` an identifier. `{{` and `}}`
//! produce literal braces; any other brace is kept as-is, so prompt text
//! quoting code or JSON needs no escaping unless it looks like a placeholder.
//!
//! A bundle on disk is a directory with `task.txt`, `robustness.txt`,
//! `request.txt` (follow-up messages separated by `---` lines) and
//! `bundle.toml` holding the `task_id`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{ChatMessage, Role};

/// Names accepted as the algorithm slot of a robustness template.
pub const ALGORITHM_PLACEHOLDERS: [&str; 3] = ["algo", "Reproducible_algorithm", "algo_prompt"];

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template `{template}` needs a binding for `{{{name}}}`")]
    MissingPlaceholder { template: String, name: String },
    #[error("template `{template}` has no placeholder `{{{name}}}`")]
    UnknownBinding { template: String, name: String },
    #[error("bundle `{bundle}`: {reason}")]
    InvalidBundle { bundle: String, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("algorithm text is empty")]
    EmptyAlgorithm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Task,
    Request,
    Robustness,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot(String),
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    chars
        .next()
        .is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn tokenize(body: &str) -> Vec<Piece> {
    let mut pieces = Vec::new();
    let mut text = String::new();
    let mut rest = body;
    while let Some(c) = rest.chars().next() {
        if rest.starts_with("{{") {
            text.push('{');
            rest = &rest[2..];
        } else if rest.starts_with("}}") {
            text.push('}');
            rest = &rest[2..];
        } else if c == '{' {
            match rest[1..].find('}').map(|end| &rest[1..1 + end]) {
                Some(name) if is_ident(name) => {
                    if !text.is_empty() {
                        pieces.push(Piece::Text(std::mem::take(&mut text)));
                    }
                    pieces.push(Piece::Slot(name.to_string()));
                    rest = &rest[name.len() + 2..];
                }
                _ => {
                    text.push('{');
                    rest = &rest[1..];
                }
            }
        } else {
            text.push(c);
            rest = &rest[c.len_utf8()..];
        }
    }
    if !text.is_empty() {
        pieces.push(Piece::Text(text));
    }
    pieces
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    name: String,
    kind: PromptKind,
    body: String,
    pieces: Vec<Piece>,
    required: BTreeSet<String>,
}

impl PromptTemplate {
    pub fn new(name: impl Into<String>, kind: PromptKind, body: impl Into<String>) -> Self {
        let body = body.into();
        let pieces = tokenize(&body);
        let required = pieces
            .iter()
            .filter_map(|p| match p {
                Piece::Slot(n) => Some(n.clone()),
                Piece::Text(_) => None,
            })
            .collect();
        Self {
            name: name.into(),
            kind,
            body,
            pieces,
            required,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> PromptKind {
        self.kind
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn required_placeholders(&self) -> &BTreeSet<String> {
        &self.required
    }

    pub fn requires(&self, name: &str) -> bool {
        self.required.contains(name)
    }

    /// The algorithm placeholder used by this template, if any.
    pub fn algorithm_placeholder(&self) -> Option<&'static str> {
        ALGORITHM_PLACEHOLDERS
            .into_iter()
            .find(|p| self.requires(p))
    }
}

/// Substitutes every placeholder in one pass; binding values are never
/// re-scanned, so they may contain braces freely.
pub fn render(
    template: &PromptTemplate,
    bindings: &BTreeMap<String, String>,
) -> Result<String, PromptError> {
    if let Some(name) = template
        .required
        .iter()
        .find(|n| !bindings.contains_key(*n))
    {
        return Err(PromptError::MissingPlaceholder {
            template: template.name.clone(),
            name: name.clone(),
        });
    }
    if let Some(name) = bindings.keys().find(|k| !template.required.contains(*k)) {
        return Err(PromptError::UnknownBinding {
            template: template.name.clone(),
            name: name.clone(),
        });
    }
    let mut out = String::with_capacity(template.body.len());
    for piece in &template.pieces {
        match piece {
            Piece::Text(t) => out.push_str(t),
            Piece::Slot(n) => out.push_str(&bindings[n]),
        }
    }
    Ok(out)
}

/// The algorithm a model wrote about its own task behaviour.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReQuestAlgorithm {
    /// Short content hash over source model and text.
    pub id: String,
    pub text: String,
    pub source_model: String,
    pub transcript: Vec<ChatMessage>,
    pub created_at: DateTime<Utc>,
}

impl ReQuestAlgorithm {
    /// The final transcript message must be the assistant's algorithm.
    pub fn new(
        text: impl Into<String>,
        source_model: impl Into<String>,
        transcript: Vec<ChatMessage>,
        created_at: DateTime<Utc>,
    ) -> Result<Self, PromptError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(PromptError::EmptyAlgorithm);
        }
        let source_model = source_model.into();
        match transcript.last() {
            Some(m) if m.role == Role::Assistant && m.content.contains(&text) => {}
            _ => {
                return Err(PromptError::InvalidBundle {
                    bundle: source_model,
                    reason: "transcript must end with the assistant message holding the algorithm"
                        .into(),
                })
            }
        }
        Ok(Self {
            id: Self::id_for(&source_model, &text),
            text,
            source_model,
            transcript,
            created_at,
        })
    }

    pub fn id_for(source_model: &str, text: &str) -> String {
        let mut h = Sha256::new();
        h.update(source_model.as_bytes());
        h.update(b"\n");
        h.update(text.as_bytes());
        hex::encode(h.finalize())[..16].to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegimeBundle {
    pub name: String,
    pub task_id: String,
    pub task_prompt: PromptTemplate,
    pub request_prompts: Vec<String>,
    pub robustness_prompt: PromptTemplate,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleMeta {
    task_id: String,
}

fn split_requests(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = Vec::new();
    for line in text.lines() {
        if line.trim() == "---" {
            out.push(current.join("\n"));
            current.clear();
        } else {
            current.push(line);
        }
    }
    out.push(current.join("\n"));
    out.into_iter()
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

/// Template files end with a newline in the repository; that newline is not
/// part of the prompt.
fn template_body(text: &str) -> &str {
    text.strip_suffix('\n').unwrap_or(text)
}

impl RegimeBundle {
    pub fn from_parts(
        name: &str,
        meta_toml: &str,
        task: &str,
        request: &str,
        robustness: &str,
    ) -> Result<Self, PromptError> {
        let invalid = |reason: String| PromptError::InvalidBundle {
            bundle: name.to_string(),
            reason,
        };
        let meta: BundleMeta = toml::from_str(meta_toml).map_err(|e| invalid(e.to_string()))?;
        let bundle = Self {
            name: name.to_string(),
            task_id: meta.task_id,
            task_prompt: PromptTemplate::new(
                format!("{name}/task"),
                PromptKind::Task,
                template_body(task),
            ),
            request_prompts: split_requests(request),
            robustness_prompt: PromptTemplate::new(
                format!("{name}/robustness"),
                PromptKind::Robustness,
                template_body(robustness),
            ),
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let read = |file: &str| {
            let path = dir.join(file);
            fs::read_to_string(&path).map_err(|source| PromptError::Io { path, source })
        };
        Self::from_parts(
            &name,
            &read("bundle.toml")?,
            &read("task.txt")?,
            &read("request.txt")?,
            &read("robustness.txt")?,
        )
    }

    /// True for the bundle's own task and its variants: a `stock` bundle
    /// serves `stock-AAPL`.
    pub fn serves(&self, task_id: &str) -> bool {
        task_id == self.task_id
            || task_id
                .strip_prefix(self.task_id.as_str())
                .is_some_and(|rest| rest.starts_with('-'))
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        let invalid = |reason: &str| {
            Err(PromptError::InvalidBundle {
                bundle: self.name.clone(),
                reason: reason.to_string(),
            })
        };
        if self.task_id.is_empty() {
            return invalid("task_id is empty");
        }
        if self.request_prompts.is_empty() {
            return invalid("no request prompts");
        }
        if self.robustness_prompt.algorithm_placeholder().is_none() {
            return invalid("robustness prompt has no algorithm placeholder ({algo}, {Reproducible_algorithm} or {algo_prompt})");
        }
        if self.task_prompt.algorithm_placeholder().is_some() {
            return invalid("task prompt must not take an algorithm");
        }
        Ok(())
    }
}

macro_rules! bundled {
    ($($name:literal),* $(,)?) => {
        [$((
            $name,
            include_str!(concat!("../prompts/", $name, "/bundle.toml")),
            include_str!(concat!("../prompts/", $name, "/task.txt")),
            include_str!(concat!("../prompts/", $name, "/request.txt")),
            include_str!(concat!("../prompts/", $name, "/robustness.txt")),
        )),*]
    };
}

/// The compiled-in prompt library keyed by bundle name. Several bundles may
/// serve one task (one per model family).
pub fn load_bundled_prompts() -> BTreeMap<String, RegimeBundle> {
    bundled!(
        "statute_gemini",
        "statute_llama",
        "hr_gemini",
        "hr_llama",
        "stock",
        "suicide_watch",
        "depression_severity",
    )
    .into_iter()
    .map(|(name, meta, task, request, robustness)| {
        let bundle = RegimeBundle::from_parts(name, meta, task, request, robustness)
            .unwrap_or_else(|e| panic!("bundled prompt `{name}` is invalid: {e}"));
        (name.to_string(), bundle)
    })
    .collect()
}

/// Loads every bundle directory under `root`, overriding compiled-in bundles
/// of the same name.
pub fn load_library(root: Option<&Path>) -> Result<BTreeMap<String, RegimeBundle>, PromptError> {
    let mut library = load_bundled_prompts();
    let Some(root) = root else {
        return Ok(library);
    };
    let entries = fs::read_dir(root).map_err(|source| PromptError::Io {
        path: root.to_path_buf(),
        source,
    })?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("bundle.toml").is_file())
        .collect();
    dirs.sort();
    for dir in dirs {
        let bundle = RegimeBundle::load_dir(&dir)?;
        library.insert(bundle.name.clone(), bundle);
    }
    Ok(library)
}
