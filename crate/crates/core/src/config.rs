//! The declarative harness configuration: backends, tasks, matrix jobs and
//! output directories. Relative paths resolve against the config file's
//! directory; secrets are only ever named (as environment variables).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    Backend, BackendError, HttpConfig, HttpProvider, MockProvider, MockSpec, ResponseCache,
    RetryPolicy,
};
use crate::dataset::{Dataset, DatasetError};
use crate::pipeline::{Decoding, DEFAULT_EXAMPLES};
use crate::prompt::{load_library, PromptError, RegimeBundle};
use crate::report::{bundled_baselines, load_baselines, BaselineEntry, ReportError};

pub const DEFAULT_RUN_SET: &str = "default";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("unknown backend `{0}`")]
    UnknownBackend(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("backend `{name}`: {source}")]
    Backend {
        name: String,
        #[source]
        source: BackendError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// JSON chat-completions endpoint (`base_url`, optional `auth_env_var`).
    Http,
    /// Keyword-rule mock described in the TOML file `spec`.
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub name: String,
    /// Short tag used in metric names (`G` in `PerRR_GP_L`); defaults to the
    /// upper-cased first letter of the name.
    #[serde(default)]
    pub tag: Option<String>,
    pub kind: BackendKind,
    pub model_id: String,
    #[serde(default)]
    pub base_url: Option<String>,
    /// Environment variable holding the API key; omit for keyless endpoints.
    #[serde(default)]
    pub auth_env_var: Option<String>,
    #[serde(default)]
    pub timeout_secs: Option<u64>,
    #[serde(default)]
    pub spec: Option<PathBuf>,
    #[serde(default)]
    pub rpm_limit: Option<u32>,
    #[serde(default)]
    pub max_retries: Option<u32>,
    /// Provider knobs sent with every request (safety settings, seed, ...).
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

impl BackendConfig {
    fn check_kind(&self) -> Result<(), String> {
        let http_only = [
            ("base_url", self.base_url.is_some()),
            ("auth_env_var", self.auth_env_var.is_some()),
            ("timeout_secs", self.timeout_secs.is_some()),
        ];
        match self.kind {
            BackendKind::Http => {
                if self.base_url.as_deref().is_none_or(|u| u.trim().is_empty()) {
                    return Err("http backends need base_url".into());
                }
                if self.spec.is_some() {
                    return Err("`spec` applies to mock backends only".into());
                }
            }
            BackendKind::Mock => {
                if self.spec.is_none() {
                    return Err("mock backends need spec".into());
                }
                if let Some((key, _)) = http_only.iter().find(|(_, set)| *set) {
                    return Err(format!("`{key}` applies to http backends only"));
                }
            }
        }
        Ok(())
    }

    pub fn tag(&self) -> String {
        self.tag.clone().unwrap_or_else(|| {
            self.name
                .chars()
                .next()
                .map(|c| c.to_ascii_uppercase().to_string())
                .unwrap_or_default()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub name: String,
    /// Directory written by `import` (task.json + records.jsonl).
    pub dataset: PathBuf,
    /// Prompt bundle used for every backend without an override.
    pub bundle: String,
    /// Backend name to bundle name, for model-specific prompt wording.
    #[serde(default)]
    pub bundle_for: BTreeMap<String, String>,
    /// Use only the first `limit` records.
    #[serde(default)]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixConfig {
    /// Two backend names; each is the reference model once.
    pub pair: [String; 2],
    pub task: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodingConfig {
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
}

fn default_max_tokens() -> u32 {
    crate::backend::DEFAULT_MAX_TOKENS
}

impl Default for DecodingConfig {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: default_max_tokens(),
        }
    }
}

fn default_concurrency() -> usize {
    4
}

fn default_run_set() -> String {
    DEFAULT_RUN_SET.into()
}

fn default_examples() -> usize {
    DEFAULT_EXAMPLES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarnessConfig {
    pub cache_dir: PathBuf,
    pub runs_dir: PathBuf,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    /// Subdirectory of `runs_dir`; a new run set means fresh algorithms.
    #[serde(default = "default_run_set")]
    pub run_set: String,
    /// Sample classifications shown before the request prompts.
    #[serde(default = "default_examples")]
    pub examples: usize,
    /// Directory of prompt bundles overriding the built-in ones.
    #[serde(default)]
    pub prompts_dir: Option<PathBuf>,
    /// Baselines file replacing the built-in one.
    #[serde(default)]
    pub baselines: Option<PathBuf>,
    #[serde(default)]
    pub decoding: DecodingConfig,
    #[serde(default)]
    pub backends: Vec<BackendConfig>,
    #[serde(default)]
    pub tasks: Vec<TaskConfig>,
    #[serde(default)]
    pub matrix: Vec<MatrixConfig>,
    /// Directory of the config file; relative paths resolve against it.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl HarnessConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base).map_err(|e| match e {
            ConfigError::Parse { reason, .. } => ConfigError::Parse {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }

    /// Parses and checks structure; `base_dir` anchors relative paths.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut cfg: HarnessConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: PathBuf::from("<memory>"),
            reason: e.to_string(),
        })?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.check()?;
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn cache_path(&self) -> PathBuf {
        self.resolve(&self.cache_dir)
    }

    /// `runs_dir/run_set`.
    pub fn run_set_dir(&self) -> PathBuf {
        self.resolve(&self.runs_dir).join(&self.run_set)
    }

    pub fn task_dir(&self, task: &str) -> PathBuf {
        self.run_set_dir().join(task)
    }

    pub fn decoding(&self) -> Decoding {
        Decoding {
            temperature: self.decoding.temperature,
            max_tokens: self.decoding.max_tokens,
        }
    }

    /// Structural checks; rerun after overriding fields.
    pub fn check(&self) -> Result<(), ConfigError> {
        let invalid = |s: String| Err(ConfigError::Invalid(s));
        if self.concurrency == 0 {
            return invalid("concurrency must be at least 1".into());
        }
        if !(0.0..=2.0).contains(&self.decoding.temperature) {
            return invalid(format!(
                "temperature {} outside [0, 2]",
                self.decoding.temperature
            ));
        }
        if self.decoding.max_tokens == 0 {
            return invalid("max_tokens must be positive".into());
        }
        if !is_path_segment(&self.run_set) {
            return invalid(format!(
                "run_set `{}` must be a plain directory name",
                self.run_set
            ));
        }
        let mut names = BTreeSet::new();
        let mut tags = BTreeSet::new();
        for b in &self.backends {
            if !is_path_segment(&b.name) {
                return invalid(format!(
                    "backend name `{}` must be a plain directory name",
                    b.name
                ));
            }
            if !names.insert(b.name.as_str()) {
                return invalid(format!("duplicate backend `{}`", b.name));
            }
            let tag = b.tag();
            if tag.is_empty() || !tags.insert(tag.clone()) {
                return invalid(format!(
                    "backend `{}` needs a unique tag (got `{tag}`)",
                    b.name
                ));
            }
            if let Err(reason) = b.check_kind() {
                return invalid(format!("backend `{}`: {reason}", b.name));
            }
            if b.model_id.trim().is_empty() {
                return invalid(format!("backend `{}` has an empty model_id", b.name));
            }
            if b.rpm_limit == Some(0) {
                return invalid(format!("backend `{}` rpm_limit must be positive", b.name));
            }
        }
        let mut tasks = BTreeSet::new();
        for t in &self.tasks {
            if !is_path_segment(&t.name) {
                return invalid(format!(
                    "task name `{}` must be a plain directory name",
                    t.name
                ));
            }
            if !tasks.insert(t.name.as_str()) {
                return invalid(format!("duplicate task `{}`", t.name));
            }
            for backend in t.bundle_for.keys() {
                if !names.contains(backend.as_str()) {
                    return Err(ConfigError::UnknownBackend(backend.clone()));
                }
            }
            if t.limit == Some(0) {
                return invalid(format!("task `{}` limit must be positive", t.name));
            }
        }
        for m in &self.matrix {
            if m.pair[0] == m.pair[1] {
                return invalid(format!(
                    "matrix pair for `{}` names `{}` twice",
                    m.task, m.pair[0]
                ));
            }
            for b in &m.pair {
                if !names.contains(b.as_str()) {
                    return Err(ConfigError::UnknownBackend(b.clone()));
                }
            }
            if !tasks.contains(m.task.as_str()) {
                return Err(ConfigError::UnknownTask(m.task.clone()));
            }
        }
        Ok(())
    }

    pub fn backend_config(&self, name: &str) -> Result<&BackendConfig, ConfigError> {
        self.backends
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| ConfigError::UnknownBackend(name.to_string()))
    }

    pub fn task_config(&self, name: &str) -> Result<&TaskConfig, ConfigError> {
        self.tasks
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| ConfigError::UnknownTask(name.to_string()))
    }

    pub fn prompt_library(&self) -> Result<BTreeMap<String, RegimeBundle>, ConfigError> {
        let dir = self.prompts_dir.as_ref().map(|p| self.resolve(p));
        Ok(load_library(dir.as_deref())?)
    }

    pub fn baseline_entries(&self) -> Result<Vec<BaselineEntry>, ConfigError> {
        match &self.baselines {
            Some(p) => Ok(load_baselines(&self.resolve(p))?),
            None => Ok(bundled_baselines()),
        }
    }

    pub fn load_dataset(&self, task: &str) -> Result<Dataset, ConfigError> {
        let t = self.task_config(task)?;
        let ds = Dataset::load(&self.resolve(&t.dataset))?;
        Ok(match t.limit {
            Some(n) if n < ds.len() => ds.truncated(n)?,
            _ => ds,
        })
    }

    /// The bundle `backend` receives for `task`.
    pub fn bundle_for<'a>(
        &self,
        library: &'a BTreeMap<String, RegimeBundle>,
        task: &str,
        backend: &str,
    ) -> Result<&'a RegimeBundle, ConfigError> {
        let t = self.task_config(task)?;
        let name = t.bundle_for.get(backend).unwrap_or(&t.bundle);
        library.get(name).ok_or_else(|| {
            ConfigError::Invalid(format!(
                "task `{task}` refers to unknown prompt bundle `{name}`"
            ))
        })
    }

    pub fn load_mock_spec(&self, path: &Path) -> Result<MockSpec, ConfigError> {
        let path = self.resolve(path);
        let text = fs::read_to_string(&path).map_err(|source| ConfigError::Io {
            path: path.clone(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path,
            reason: e.to_string(),
        })
    }

    /// Builds a backend sharing `cache`. HTTP backends read their key here.
    pub fn build_backend(
        &self,
        name: &str,
        cache: Option<Arc<ResponseCache>>,
        offline: bool,
    ) -> Result<Backend, ConfigError> {
        let b = self.backend_config(name)?;
        let wrap = |source| ConfigError::Backend {
            name: name.to_string(),
            source,
        };
        let provider: Box<dyn crate::backend::Provider> = match b.kind {
            BackendKind::Mock => {
                let spec = self.load_mock_spec(b.spec.as_deref().expect("checked at parse"))?;
                Box::new(MockProvider::new(spec, None).map_err(wrap)?)
            }
            BackendKind::Http => {
                let mut http = HttpConfig::new(b.base_url.clone().expect("checked at parse"));
                http.auth_env_var = b.auth_env_var.clone();
                if let Some(secs) = b.timeout_secs {
                    http.timeout = Duration::from_secs(secs);
                }
                if offline {
                    // Offline runs are served from the cache; no key needed.
                    Box::new(HttpProvider::without_key(&http).map_err(wrap)?)
                } else {
                    Box::new(HttpProvider::new(&http).map_err(wrap)?)
                }
            }
        };
        let mut retry = RetryPolicy::default();
        if let Some(n) = b.max_retries {
            retry.max_retries = n;
        }
        let mut backend = Backend::new(&b.name, &b.model_id, provider)
            .with_rpm_limit(b.rpm_limit)
            .with_retry(retry)
            .offline(offline);
        if let Some(cache) = cache {
            backend = backend.with_cache(cache);
        }
        Ok(backend)
    }

    /// Checks that everything referenced exists: datasets, bundles (and that
    /// they serve their task), mock specs, baselines. Returns warnings that do
    /// not block a run, such as unset API-key variables.
    pub fn validate(&self) -> Result<Vec<String>, ConfigError> {
        let library = self.prompt_library()?;
        let baselines = self.baseline_entries()?;
        let mut warnings = Vec::new();
        for b in &self.backends {
            if let Some(spec) = &b.spec {
                self.load_mock_spec(spec)?;
            }
            if let Some(var) = &b.auth_env_var {
                if std::env::var_os(var).is_none() {
                    warnings.push(format!(
                        "backend `{}`: environment variable {var} is not set",
                        b.name
                    ));
                }
            }
        }
        for t in &self.tasks {
            let ds = self.load_dataset(&t.name)?;
            let mut bundles = vec![t.bundle.clone()];
            bundles.extend(t.bundle_for.values().cloned());
            for name in bundles {
                let bundle = library.get(&name).ok_or_else(|| {
                    ConfigError::Invalid(format!(
                        "task `{}` refers to unknown prompt bundle `{name}`",
                        t.name
                    ))
                })?;
                if !bundle.serves(ds.task_id()) {
                    return Err(ConfigError::Invalid(format!(
                        "bundle `{name}` is for `{}`, dataset of task `{}` is `{}`",
                        bundle.task_id,
                        t.name,
                        ds.task_id()
                    )));
                }
            }
            if !baselines.iter().any(|b| b.task_id == ds.task_id()) {
                warnings.push(format!(
                    "task `{}`: no baseline for `{}`",
                    t.name,
                    ds.task_id()
                ));
            }
        }
        Ok(warnings)
    }
}

fn is_path_segment(s: &str) -> bool {
    !s.is_empty() && s != "." && s != ".." && !s.contains(['/', '\\'])
}
