//! Label spaces and label sets shared by every task family.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Shape of a classification task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Binary,
    Multiclass,
    Multilabel,
}

impl TaskKind {
    /// Binary and multiclass tasks assign at most one label per datapoint.
    pub fn is_single_label(self) -> bool {
        !matches!(self, TaskKind::Multilabel)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Binary => "binary",
            TaskKind::Multiclass => "multiclass",
            TaskKind::Multilabel => "multilabel",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LabelError {
    #[error("label space `{task_id}` has no labels")]
    EmptySpace { task_id: String },
    #[error("label space `{task_id}` contains an empty label")]
    EmptyLabel { task_id: String },
    #[error("label space `{task_id}` repeats label `{label}`")]
    DuplicateLabel { task_id: String, label: String },
    #[error("binary label space `{task_id}` must have exactly 2 labels, found {found}")]
    BinaryArity { task_id: String, found: usize },
    #[error("label `{label}` is not part of label space `{task_id}`")]
    UnknownLabel { task_id: String, label: String },
    #[error("{kind} task `{task_id}` allows at most one label per datapoint, found {found}")]
    TooManyLabels {
        task_id: String,
        kind: TaskKind,
        found: usize,
    },
    #[error("gold label set for `{id}` in {kind} task `{task_id}` must have exactly one member")]
    GoldArity {
        task_id: String,
        kind: TaskKind,
        id: String,
    },
    #[error("gold standard for `{task_id}` is empty")]
    EmptyGold { task_id: String },
}

/// The closed, ordered set of class identifiers for one task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawLabelSpace", into = "RawLabelSpace")]
pub struct LabelSpace {
    task_id: String,
    kind: TaskKind,
    labels: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct RawLabelSpace {
    task_id: String,
    kind: TaskKind,
    labels: Vec<String>,
}

impl TryFrom<RawLabelSpace> for LabelSpace {
    type Error = LabelError;

    fn try_from(raw: RawLabelSpace) -> Result<Self, Self::Error> {
        LabelSpace::new(raw.task_id, raw.kind, raw.labels)
    }
}

impl From<LabelSpace> for RawLabelSpace {
    fn from(space: LabelSpace) -> Self {
        RawLabelSpace {
            task_id: space.task_id,
            kind: space.kind,
            labels: space.labels,
        }
    }
}

impl LabelSpace {
    pub fn new<S: Into<String>>(
        task_id: impl Into<String>,
        kind: TaskKind,
        labels: impl IntoIterator<Item = S>,
    ) -> Result<Self, LabelError> {
        let task_id = task_id.into();
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(LabelError::EmptySpace { task_id });
        }
        let mut seen = BTreeSet::new();
        for label in &labels {
            if label.is_empty() {
                return Err(LabelError::EmptyLabel { task_id });
            }
            if !seen.insert(label.as_str()) {
                return Err(LabelError::DuplicateLabel {
                    task_id,
                    label: label.clone(),
                });
            }
        }
        if kind == TaskKind::Binary && labels.len() != 2 {
            return Err(LabelError::BinaryArity {
                task_id,
                found: labels.len(),
            });
        }
        Ok(Self {
            task_id,
            kind,
            labels,
        })
    }

    /// The `{"0","1"}` space used by every binary task in the harness.
    pub fn binary(task_id: impl Into<String>) -> Self {
        Self::new(task_id, TaskKind::Binary, ["0", "1"]).expect("static binary space")
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Checks membership and the single-label arity rule for predictions.
    pub fn validate_set(&self, set: &LabelSet) -> Result<(), LabelError> {
        for label in set.iter() {
            if !self.contains(label) {
                return Err(LabelError::UnknownLabel {
                    task_id: self.task_id.clone(),
                    label: label.to_string(),
                });
            }
        }
        if self.kind.is_single_label() && set.len() > 1 {
            return Err(LabelError::TooManyLabels {
                task_id: self.task_id.clone(),
                kind: self.kind,
                found: set.len(),
            });
        }
        Ok(())
    }
}

/// An unordered set of labels predicted for (or assigned to) one datapoint.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelSet(BTreeSet<String>);

impl LabelSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn single(label: impl Into<String>) -> Self {
        let mut set = BTreeSet::new();
        set.insert(label.into());
        Self(set)
    }

    pub fn insert(&mut self, label: impl Into<String>) -> bool {
        self.0.insert(label.into())
    }

    pub fn contains(&self, label: &str) -> bool {
        self.0.contains(label)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    pub fn intersection_len(&self, other: &LabelSet) -> usize {
        self.0.intersection(&other.0).count()
    }

    pub fn union_len(&self, other: &LabelSet) -> usize {
        self.0.union(&other.0).count()
    }
}

impl<S: Into<String>> FromIterator<S> for LabelSet {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        Self(iter.into_iter().map(Into::into).collect())
    }
}

impl fmt::Display for LabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let joined: Vec<&str> = self.iter().collect();
        write!(f, "{{{}}}", joined.join("; "))
    }
}

/// Per-datapoint label assignments of one run, keyed by datapoint id.
pub type Predictions = BTreeMap<String, LabelSet>;

/// Ground-truth label sets for every datapoint of a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldStandard {
    space: LabelSpace,
    entries: BTreeMap<String, LabelSet>,
}

impl GoldStandard {
    pub fn new(space: LabelSpace, entries: BTreeMap<String, LabelSet>) -> Result<Self, LabelError> {
        if entries.is_empty() {
            return Err(LabelError::EmptyGold {
                task_id: space.task_id().to_string(),
            });
        }
        for (id, set) in &entries {
            space.validate_set(set)?;
            if space.kind().is_single_label() && set.len() != 1 {
                return Err(LabelError::GoldArity {
                    task_id: space.task_id().to_string(),
                    kind: space.kind(),
                    id: id.clone(),
                });
            }
        }
        Ok(Self { space, entries })
    }

    /// Builds a single-label gold standard with ids `"0"`, `"1"`, … in order.
    pub fn from_sequence<S: AsRef<str>>(
        space: LabelSpace,
        labels: &[S],
    ) -> Result<Self, LabelError> {
        let entries = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (i.to_string(), LabelSet::single(l.as_ref())))
            .collect();
        Self::new(space, entries)
    }

    pub fn space(&self) -> &LabelSpace {
        &self.space
    }

    pub fn entries(&self) -> &BTreeMap<String, LabelSet> {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&LabelSet> {
        self.entries.get(id)
    }
}

/// Turns a positional label sequence into predictions keyed `"0"`, `"1"`, …
pub fn predictions_from_sequence<S: AsRef<str>>(labels: &[S]) -> Predictions {
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| (i.to_string(), LabelSet::single(l.as_ref())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_space_needs_two_labels() {
        let err = LabelSpace::new("t", TaskKind::Binary, ["0", "1", "2"]).unwrap_err();
        assert!(matches!(err, LabelError::BinaryArity { found: 3, .. }));
    }

    #[test]
    fn rejects_duplicates_and_empties() {
        assert!(matches!(
            LabelSpace::new("t", TaskKind::Multiclass, ["a", "a"]),
            Err(LabelError::DuplicateLabel { .. })
        ));
        assert!(matches!(
            LabelSpace::new("t", TaskKind::Multiclass, ["a", ""]),
            Err(LabelError::EmptyLabel { .. })
        ));
        assert!(matches!(
            LabelSpace::new("t", TaskKind::Multilabel, Vec::<String>::new()),
            Err(LabelError::EmptySpace { .. })
        ));
    }

    #[test]
    fn single_label_sets_are_capped() {
        let space = LabelSpace::new("sev", TaskKind::Multiclass, ["Mild", "Moderate"]).unwrap();
        let two: LabelSet = ["Mild", "Moderate"].into_iter().collect();
        assert!(matches!(
            space.validate_set(&two),
            Err(LabelError::TooManyLabels { found: 2, .. })
        ));
        assert!(space.validate_set(&LabelSet::empty()).is_ok());
    }

    #[test]
    fn gold_requires_single_member_for_binary() {
        let space = LabelSpace::binary("hr");
        let mut entries = BTreeMap::new();
        entries.insert("a".to_string(), LabelSet::empty());
        assert!(matches!(
            GoldStandard::new(space, entries),
            Err(LabelError::GoldArity { .. })
        ));
    }

    #[test]
    fn space_deserialization_validates() {
        let bad = r#"{"task_id":"x","kind":"binary","labels":["0"]}"#;
        assert!(serde_json::from_str::<LabelSpace>(bad).is_err());
        let good = r#"{"task_id":"x","kind":"binary","labels":["0","1"]}"#;
        let space: LabelSpace = serde_json::from_str(good).unwrap();
        assert_eq!(space.labels(), ["0", "1"]);
    }
}
