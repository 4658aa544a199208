//! Deterministic keyword-rule backend used by tests and dry runs.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    BackendError, ChatRequest, ChatResponse, FinishReason, Provider, Role, META_INPUT, META_STAGE,
};
use crate::labels::LabelSpace;
use crate::parser::{parse_response, ParseStatus};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    /// Case-sensitive substring searched in the datapoint text.
    pub keyword: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockSpec {
    /// Checked in order; the first rule whose keyword occurs wins.
    #[serde(default)]
    pub rules: Vec<MockRule>,
    pub default_response: String,
    /// Rules for robustness-stage prompts; the task rules apply when absent.
    #[serde(default)]
    pub robustness_rules: Option<Vec<MockRule>>,
    /// Returned for every ReQuest turn.
    #[serde(default = "default_algorithm")]
    pub algorithm: String,
    /// Inputs containing this marker come back as a safety block.
    #[serde(default)]
    pub blocked_marker: Option<String>,
    #[serde(default)]
    pub recitation_marker: Option<String>,
}

fn default_algorithm() -> String {
    "1. Read the input carefully.\n2. Identify the class whose description best matches it.\n3. Return that class in the required format.".into()
}

impl MockSpec {
    pub fn constant(response: impl Into<String>) -> Self {
        Self {
            rules: Vec::new(),
            default_response: response.into(),
            robustness_rules: None,
            algorithm: default_algorithm(),
            blocked_marker: None,
            recitation_marker: None,
        }
    }

    /// Every rule response, and the default, must parse cleanly into `space`.
    pub fn validate(&self, space: &LabelSpace) -> Result<(), BackendError> {
        let robustness = self.robustness_rules.iter().flatten();
        for (index, rule) in self.rules.iter().chain(robustness).enumerate() {
            if rule.keyword.is_empty() {
                return Err(BackendError::InvalidRule {
                    index,
                    reason: "empty keyword".into(),
                });
            }
            check_response(space, &rule.response)
                .map_err(|reason| BackendError::InvalidRule { index, reason })?;
        }
        check_response(space, &self.default_response).map_err(|reason| BackendError::InvalidRule {
            index: self.rules.len() + self.robustness_rules.as_ref().map_or(0, Vec::len),
            reason: format!("default response: {reason}"),
        })
    }

    fn select<'a>(&'a self, rules: &'a [MockRule], input: &str) -> &'a str {
        rules
            .iter()
            .find(|r| input.contains(&r.keyword))
            .map_or(self.default_response.as_str(), |r| r.response.as_str())
    }
}

fn check_response(space: &LabelSpace, response: &str) -> Result<(), String> {
    let outcome = parse_response(response, space);
    if outcome.status == ParseStatus::Clean {
        Ok(())
    } else {
        Err(format!(
            "`{response}` does not name labels of `{}`",
            space.task_id()
        ))
    }
}

#[derive(Debug, Clone)]
pub struct MockProvider {
    spec: MockSpec,
    identity: String,
}

impl MockProvider {
    /// With `space`, the rules are checked against it up front.
    pub fn new(spec: MockSpec, space: Option<&LabelSpace>) -> Result<Self, BackendError> {
        if let Some(space) = space {
            spec.validate(space)?;
        }
        let digest = Sha256::digest(serde_json::to_vec(&spec).expect("serializable"));
        Ok(Self {
            identity: format!("mock:{}", &hex::encode(digest)[..16]),
            spec,
        })
    }

    pub fn spec(&self) -> &MockSpec {
        &self.spec
    }

    fn respond(&self, req: &ChatRequest) -> (String, FinishReason) {
        let stage = req.meta.get(META_STAGE).map(String::as_str);
        let eliciting =
            stage == Some("request") || req.messages.iter().any(|m| m.role == Role::Assistant);
        if eliciting {
            return (self.spec.algorithm.clone(), FinishReason::Stop);
        }
        let input = req
            .meta
            .get(META_INPUT)
            .map(String::as_str)
            .or_else(|| req.last_user_message())
            .unwrap_or("");
        if self
            .spec
            .blocked_marker
            .as_deref()
            .is_some_and(|m| input.contains(m))
        {
            return (String::new(), FinishReason::Blocked);
        }
        if self
            .spec
            .recitation_marker
            .as_deref()
            .is_some_and(|m| input.contains(m))
        {
            return (String::new(), FinishReason::Recitation);
        }
        let rules = match (stage, &self.spec.robustness_rules) {
            (Some("robustness"), Some(rules)) => rules.as_slice(),
            _ => self.spec.rules.as_slice(),
        };
        (
            self.spec.select(rules, input).to_string(),
            FinishReason::Stop,
        )
    }
}

impl Provider for MockProvider {
    fn identity(&self) -> String {
        self.identity.clone()
    }

    fn call(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let (content, finish_reason) = self.respond(req);
        Ok(ChatResponse {
            content,
            finish_reason,
            latency: Duration::ZERO,
            raw: serde_json::json!({ "provider": "mock" }),
        })
    }
}
