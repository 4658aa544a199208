//! Normalized datasets: one task descriptor plus line-delimited records.
//!
//! On disk a dataset is a directory holding `task.json`
//! (`{task_id, kind, labels, catalog?}`) and `records.jsonl`
//! (`{id, text, gold: [labels]}` per line). Raw corpora are converted into
//! this layout by [`import::load_dataset`].

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::labels::{GoldStandard, LabelError, LabelSet, LabelSpace, TaskKind};

pub mod import;

pub use import::{load_dataset, ImportOptions, SourceFormat};

pub const TASK_FILE: &str = "task.json";
pub const RECORDS_FILE: &str = "records.jsonl";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {reason}")]
    Schema {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("dataset `{task_id}` has no records")]
    Empty { task_id: String },
    #[error("catalog is empty")]
    EmptyCatalog,
    #[error(transparent)]
    Label(#[from] LabelError),
}

impl DatasetError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn schema(path: &Path, line: usize, reason: impl Into<String>) -> Self {
        Self::Schema {
            path: path.to_path_buf(),
            line,
            reason: reason.into(),
        }
    }
}

/// One test datapoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataRecord {
    pub id: String,
    pub text: String,
    pub gold: LabelSet,
}

/// A label with the title and description shown to the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub label: String,
    pub title: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct TaskDescriptor {
    task_id: String,
    kind: TaskKind,
    labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    catalog: Option<Vec<CatalogEntry>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    space: LabelSpace,
    records: Vec<DataRecord>,
    catalog: Option<Vec<CatalogEntry>>,
}

impl Dataset {
    /// Validates ids, texts, gold labels and catalog entries against `space`.
    pub fn new(
        space: LabelSpace,
        records: Vec<DataRecord>,
        catalog: Option<Vec<CatalogEntry>>,
    ) -> Result<Self, DatasetError> {
        if records.is_empty() {
            return Err(DatasetError::Empty {
                task_id: space.task_id().to_string(),
            });
        }
        let mut ids = HashSet::new();
        for (i, r) in records.iter().enumerate() {
            check_record(&space, r, &mut ids)
                .map_err(|reason| DatasetError::schema(Path::new("<memory>"), i + 1, reason))?;
        }
        if let Some(catalog) = &catalog {
            check_catalog(&space, catalog)
                .map_err(|reason| DatasetError::schema(Path::new("<memory>"), 0, reason))?;
        }
        Ok(Self {
            space,
            records,
            catalog,
        })
    }

    pub fn task_id(&self) -> &str {
        self.space.task_id()
    }

    pub fn space(&self) -> &LabelSpace {
        &self.space
    }

    pub fn records(&self) -> &[DataRecord] {
        &self.records
    }

    pub fn catalog(&self) -> Option<&[CatalogEntry]> {
        self.catalog.as_deref()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn gold_standard(&self) -> GoldStandard {
        let entries: BTreeMap<String, LabelSet> = self
            .records
            .iter()
            .map(|r| (r.id.clone(), r.gold.clone()))
            .collect();
        GoldStandard::new(self.space.clone(), entries).expect("validated at construction")
    }

    /// Keeps only the first `n` records, preserving order.
    pub fn truncated(&self, n: usize) -> Result<Self, DatasetError> {
        Self::new(
            self.space.clone(),
            self.records.iter().take(n).cloned().collect(),
            self.catalog.clone(),
        )
    }

    /// SHA-256 over the normalized serialization, hex encoded.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&self.descriptor()).expect("serializable"));
        for r in &self.records {
            hasher.update(b"\n");
            hasher.update(serde_json::to_vec(r).expect("serializable"));
        }
        hex::encode(hasher.finalize())
    }

    fn descriptor(&self) -> TaskDescriptor {
        TaskDescriptor {
            task_id: self.space.task_id().to_string(),
            kind: self.space.kind(),
            labels: self.space.labels().to_vec(),
            catalog: self.catalog.clone(),
        }
    }

    /// Writes `task.json` and `records.jsonl` into `dir`, creating it if needed.
    pub fn save(&self, dir: &Path) -> Result<(), DatasetError> {
        fs::create_dir_all(dir).map_err(|e| DatasetError::io(dir, e))?;
        let task_path = dir.join(TASK_FILE);
        let mut descriptor =
            serde_json::to_string_pretty(&self.descriptor()).expect("serializable");
        descriptor.push('\n');
        fs::write(&task_path, descriptor).map_err(|e| DatasetError::io(&task_path, e))?;

        let records_path = dir.join(RECORDS_FILE);
        let mut out = io::BufWriter::new(
            fs::File::create(&records_path).map_err(|e| DatasetError::io(&records_path, e))?,
        );
        for r in &self.records {
            serde_json::to_writer(&mut out, r).expect("serializable");
            out.write_all(b"\n")
                .map_err(|e| DatasetError::io(&records_path, e))?;
        }
        out.flush().map_err(|e| DatasetError::io(&records_path, e))
    }

    /// Reads a dataset directory written by [`Dataset::save`].
    pub fn load(dir: &Path) -> Result<Self, DatasetError> {
        let task_path = dir.join(TASK_FILE);
        let text = fs::read_to_string(&task_path).map_err(|e| DatasetError::io(&task_path, e))?;
        let descriptor: TaskDescriptor = serde_json::from_str(&text)
            .map_err(|e| DatasetError::schema(&task_path, e.line(), e.to_string()))?;
        let space = LabelSpace::new(descriptor.task_id, descriptor.kind, descriptor.labels)
            .map_err(|e| DatasetError::schema(&task_path, 1, e.to_string()))?;
        if let Some(catalog) = &descriptor.catalog {
            check_catalog(&space, catalog).map_err(|r| DatasetError::schema(&task_path, 1, r))?;
        }

        let records_path = dir.join(RECORDS_FILE);
        let file = fs::File::open(&records_path).map_err(|e| DatasetError::io(&records_path, e))?;
        let mut records = Vec::new();
        let mut ids = HashSet::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| DatasetError::io(&records_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: DataRecord = serde_json::from_str(&line)
                .map_err(|e| DatasetError::schema(&records_path, i + 1, e.to_string()))?;
            check_record(&space, &record, &mut ids)
                .map_err(|r| DatasetError::schema(&records_path, i + 1, r))?;
            records.push(record);
        }
        if records.is_empty() {
            return Err(DatasetError::Empty {
                task_id: space.task_id().to_string(),
            });
        }
        Ok(Self {
            space,
            records,
            catalog: descriptor.catalog,
        })
    }
}

fn check_record(
    space: &LabelSpace,
    r: &DataRecord,
    ids: &mut HashSet<String>,
) -> Result<(), String> {
    if r.id.is_empty() {
        return Err("record id is empty".into());
    }
    if !ids.insert(r.id.clone()) {
        return Err(format!("duplicate record id `{}`", r.id));
    }
    if r.text.trim().is_empty() {
        return Err(format!("record `{}` has empty text", r.id));
    }
    space.validate_set(&r.gold).map_err(|e| e.to_string())?;
    if space.kind().is_single_label() && r.gold.len() != 1 {
        return Err(format!(
            "record `{}` needs exactly one gold label for a {} task",
            r.id,
            space.kind()
        ));
    }
    Ok(())
}

fn check_catalog(space: &LabelSpace, catalog: &[CatalogEntry]) -> Result<(), String> {
    for entry in catalog {
        if !space.contains(&entry.label) {
            return Err(format!(
                "catalog label `{}` is not in the label space",
                entry.label
            ));
        }
    }
    Ok(())
}

/// Renders the statute block fed to task prompts: one
/// `Statute ID / Title / Description` block per entry, separated by `###` lines.
pub fn render_catalog(catalog: &[CatalogEntry]) -> Result<String, DatasetError> {
    if catalog.is_empty() {
        return Err(DatasetError::EmptyCatalog);
    }
    let blocks: Vec<String> = catalog
        .iter()
        .map(|e| {
            format!(
                "Statute ID: {}\nTitle: {}\nDescription: {}",
                e.label, e.title, e.description
            )
        })
        .collect();
    Ok(blocks.join("\n###\n"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, text: &str, gold: &[&str]) -> DataRecord {
        DataRecord {
            id: id.into(),
            text: text.into(),
            gold: gold.iter().copied().collect(),
        }
    }

    fn entry(label: &str) -> CatalogEntry {
        CatalogEntry {
            label: label.into(),
            title: format!("Title of {label}"),
            description: format!("Description of {label}"),
        }
    }

    #[test]
    fn rejects_empty_and_duplicate_records() {
        let space = LabelSpace::binary("hr");
        assert!(matches!(
            Dataset::new(space.clone(), vec![], None),
            Err(DatasetError::Empty { .. })
        ));
        let dup = vec![record("a", "x", &["1"]), record("a", "y", &["0"])];
        assert!(matches!(
            Dataset::new(space.clone(), dup, None),
            Err(DatasetError::Schema { line: 2, .. })
        ));
        let blank = vec![record("a", "  ", &["1"])];
        assert!(Dataset::new(space, blank, None).is_err());
    }

    #[test]
    fn binary_gold_needs_one_label() {
        let space = LabelSpace::binary("hr");
        let bad = vec![record("a", "x", &[])];
        assert!(Dataset::new(space, bad, None).is_err());
    }

    #[test]
    fn catalog_rendering() {
        let two = render_catalog(&[entry("A"), entry("B")]).unwrap();
        assert_eq!(two.matches("###").count(), 1);
        assert_eq!(
            two,
            "Statute ID: A\nTitle: Title of A\nDescription: Description of A\n###\n\
             Statute ID: B\nTitle: Title of B\nDescription: Description of B"
        );
        assert_eq!(two, render_catalog(&[entry("A"), entry("B")]).unwrap());
        assert!(matches!(
            render_catalog(&[]),
            Err(DatasetError::EmptyCatalog)
        ));
    }

    #[test]
    fn save_load_round_trip() {
        let space = LabelSpace::new("st", TaskKind::Multilabel, ["A", "B"]).unwrap();
        let ds = Dataset::new(
            space,
            vec![
                record("f1", "fact one", &["A"]),
                record("f2", "fact\ntwo", &["A", "B"]),
            ],
            Some(vec![entry("A"), entry("B")]),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.digest(), ds.digest());
    }

    #[test]
    fn load_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join(TASK_FILE),
            r#"{"task_id":"hr","kind":"binary","labels":["0","1"]}"#,
        )
        .unwrap();
        fs::write(
            dir.path().join(RECORDS_FILE),
            "{\"id\":\"a\",\"text\":\"t\",\"gold\":[\"1\"]}\n{\"id\":\"b\",\"text\":\"t\",\"gold\":[\"7\"]}\n",
        )
        .unwrap();
        match Dataset::load(dir.path()) {
            Err(DatasetError::Schema { line, reason, .. }) => {
                assert_eq!(line, 2);
                assert!(reason.contains("`7`"), "{reason}");
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }
}
