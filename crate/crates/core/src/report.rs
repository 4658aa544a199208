//! Renders matrix results as Markdown or CSV tables and emits the flat
//! PerRR summary used for cross-task charts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::{MatrixResult, RunSummary, Variant, VariantScores};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("matrix for `{task_id}` has no value for {column}")]
    IncompleteMatrix { task_id: String, column: String },
    #[error("no baseline for task `{task_id}`")]
    MissingBaseline { task_id: String },
    #[error("baseline is for `{baseline}`, matrix is for `{matrix}`")]
    BaselineMismatch { baseline: String, matrix: String },
    #[error("invalid baselines{}: {reason}", path.as_ref().map(|p| format!(" in {}", p.display())).unwrap_or_default())]
    InvalidBaselines {
        path: Option<PathBuf>,
        reason: String,
    },
    #[error("invalid summary CSV: {0}")]
    Summary(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineEntry {
    pub task_id: String,
    pub baseline_name: String,
    pub macro_f1: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BaselineFile {
    baseline: Vec<BaselineEntry>,
}

const BUNDLED_BASELINES: &str = include_str!("../fixtures/baselines.toml");

pub fn parse_baselines(text: &str, path: Option<&Path>) -> Result<Vec<BaselineEntry>, ReportError> {
    let invalid = |reason: String| ReportError::InvalidBaselines {
        path: path.map(Path::to_path_buf),
        reason,
    };
    let file: BaselineFile = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
    let mut seen = std::collections::BTreeSet::new();
    for b in &file.baseline {
        if !(0.0..=1.0).contains(&b.macro_f1) {
            return Err(invalid(format!(
                "`{}` macro_f1 {} outside [0, 1]",
                b.task_id, b.macro_f1
            )));
        }
        if !seen.insert(b.task_id.as_str()) {
            return Err(invalid(format!("duplicate task `{}`", b.task_id)));
        }
    }
    Ok(file.baseline)
}

pub fn bundled_baselines() -> Vec<BaselineEntry> {
    parse_baselines(BUNDLED_BASELINES, None).expect("bundled baselines are valid")
}

pub fn load_baselines(path: &Path) -> Result<Vec<BaselineEntry>, ReportError> {
    let text = std::fs::read_to_string(path).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_baselines(&text, Some(path))
}

pub fn find_baseline<'a>(
    baselines: &'a [BaselineEntry],
    task_id: &str,
) -> Result<&'a BaselineEntry, ReportError> {
    baselines
        .iter()
        .find(|b| b.task_id == task_id)
        .ok_or_else(|| ReportError::MissingBaseline {
            task_id: task_id.to_string(),
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up,
    Down,
    None,
}

impl Direction {
    /// Sign of the executing run's Macro-F1 relative to the reference run's.
    pub fn of(reference_macro: f64, executing_macro: f64) -> Self {
        if executing_macro > reference_macro {
            Direction::Up
        } else if executing_macro < reference_macro {
            Direction::Down
        } else {
            Direction::None
        }
    }

    pub fn arrow(self) -> &'static str {
        match self {
            Direction::Up => "↑",
            Direction::Down => "↓",
            Direction::None => "",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Up => "up",
            Direction::Down => "down",
            Direction::None => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "markdown" | "md" => Ok(Self::Markdown),
            "csv" => Ok(Self::Csv),
            other => Err(format!("unknown report format `{other}` (markdown, csv)")),
        }
    }
}

fn fixed(value: f64, decimals: usize) -> String {
    let s = format!("{value:.decimals$}");
    // Rounding a tiny negative value must not print "-0.000".
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}

pub fn format_perrr(v: f64) -> String {
    fixed(v, 3)
}

pub fn format_prerr(v: f64) -> String {
    fixed(v, 4)
}

pub fn format_macro(v: f64) -> String {
    fixed(v, 4)
}

/// One rendered cell: column name, formatted value and, for PerRR columns,
/// the direction of the underlying Macro-F1 change.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub column: String,
    pub value: String,
    pub direction: Option<Direction>,
}

/// The formatted row for one matrix, shared by both output formats so the
/// numbers can never disagree.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub task_id: String,
    pub reference_tag: String,
    pub other_tag: String,
    pub cells: Vec<Cell>,
    pub footnote: Vec<String>,
}

fn macro_column(summary_tag: &str, algorithm_on: Option<&str>) -> String {
    match algorithm_on {
        None => format!("MacroF1_{summary_tag}"),
        Some(on) => format!("MacroF1_{summary_tag}A_{on}"),
    }
}

fn run_cells(m: &MatrixResult) -> [(String, &RunSummary); 3] {
    let (r, o) = (m.reference_tag.as_str(), m.other_tag.as_str());
    [
        (macro_column(r, None), &m.task_run),
        (macro_column(r, Some(r)), &m.algo_on_self),
        (macro_column(r, Some(o)), &m.algo_on_other),
    ]
}

fn variant(m: &MatrixResult, v: Variant) -> Result<&VariantScores, ReportError> {
    m.variants
        .iter()
        .find(|s| s.variant == v)
        .ok_or_else(|| ReportError::IncompleteMatrix {
            task_id: m.task_id.clone(),
            column: format!("{v:?}"),
        })
}

pub fn build_table(m: &MatrixResult, baseline: &BaselineEntry) -> Result<ReportTable, ReportError> {
    if baseline.task_id != m.task_id {
        return Err(ReportError::BaselineMismatch {
            baseline: baseline.task_id.clone(),
            matrix: m.task_id.clone(),
        });
    }
    let scores = |v: Variant| -> Result<[Cell; 2], ReportError> {
        let s = variant(m, v)?;
        let perrr = s.perrr.ok_or_else(|| ReportError::IncompleteMatrix {
            task_id: m.task_id.clone(),
            column: format!("{} (reference Macro-F1 is zero)", s.perrr_name),
        })?;
        Ok([
            Cell {
                column: s.perrr_name.clone(),
                value: format_perrr(perrr),
                direction: Some(Direction::of(s.reference_macro, s.executing_macro)),
            },
            Cell {
                column: s.prerr_name.clone(),
                value: format_prerr(s.prerr),
                direction: None,
            },
        ])
    };
    let [task, on_self, on_other] = run_cells(m);
    let macro_cell = |(column, run): (String, &RunSummary)| Cell {
        column,
        value: format_macro(run.macro_f1),
        direction: None,
    };
    let mut cells = vec![
        Cell {
            column: format!("Baseline ({})", baseline.baseline_name),
            value: format_macro(baseline.macro_f1),
            direction: None,
        },
        macro_cell(task),
        macro_cell(on_self),
    ];
    cells.extend(scores(Variant::PromptIntra)?);
    cells.push(macro_cell(on_other));
    cells.extend(scores(Variant::PromptInter)?);
    cells.extend(scores(Variant::AlgorithmInter)?);
    Ok(ReportTable {
        task_id: m.task_id.clone(),
        reference_tag: m.reference_tag.clone(),
        other_tag: m.other_tag.clone(),
        cells,
        footnote: footnote(m),
    })
}

fn footnote(m: &MatrixResult) -> Vec<String> {
    let runs = run_cells(m);
    let list = |f: &dyn Fn(&RunSummary) -> String| {
        runs.iter()
            .map(|(col, run)| format!("{col} {}", f(run)))
            .collect::<Vec<_>>()
            .join(", ")
    };
    let mut lines = vec![
        format!(
            "Anomalies (responses without a valid label, scored as empty label sets): {}.",
            list(&|r| format!("{}/{}", r.anomaly_count, r.records))
        ),
        format!(
            "Blocked datapoints (safety or recitation blocks, kept and scored as anomalies): {}.",
            list(&|r| format!("{}/{}", r.blocked_count, r.records))
        ),
    ];
    if runs.iter().any(|(_, r)| r.blocked_count > 0) {
        lines.push(format!(
            "Macro-F1 without blocked datapoints: {}.",
            list(&|r| r
                .macro_f1_excluding_blocked
                .map_or("n/a".into(), format_macro))
        ));
    }
    lines.push(
        "Arrows: ↑ when the executing run's Macro-F1 is above the reference run's, ↓ when below, \
         none when equal; the reference of PerRR_xP_y is the task run, of PerRR_xA_y the algorithm \
         run on its own model."
            .into(),
    );
    lines
}

/// Renders one matrix with its baseline. Fails when any PerRR is undefined.
pub fn render_table(
    m: &MatrixResult,
    baseline: &BaselineEntry,
    format: ReportFormat,
) -> Result<String, ReportError> {
    let table = build_table(m, baseline)?;
    Ok(match format {
        ReportFormat::Markdown => markdown(&table, m),
        ReportFormat::Csv => csv_table(&table, m),
    })
}

fn markdown(t: &ReportTable, m: &MatrixResult) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "### Reproducibility: {} ({} = {}, {} = {})\n",
        t.task_id, t.reference_tag, m.task_run.model_id, t.other_tag, m.algo_on_other.model_id
    );
    let header: Vec<&str> = t.cells.iter().map(|c| c.column.as_str()).collect();
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
    let values: Vec<String> = t
        .cells
        .iter()
        .map(|c| match c.direction {
            Some(d) if d != Direction::None => format!("{} {}", c.value, d.arrow()),
            _ => c.value.clone(),
        })
        .collect();
    let _ = writeln!(out, "| {} |\n", values.join(" | "));
    for line in &t.footnote {
        let _ = writeln!(out, "{line}  ");
    }
    out
}

fn csv_table(t: &ReportTable, m: &MatrixResult) -> String {
    let mut header = vec!["task_id".to_string(), "reference".into(), "other".into()];
    let mut row = vec![
        t.task_id.clone(),
        t.reference_tag.clone(),
        t.other_tag.clone(),
    ];
    for c in &t.cells {
        header.push(c.column.clone());
        row.push(c.value.clone());
        if let Some(d) = c.direction {
            header.push(format!("direction_{}", c.column));
            row.push(d.as_str().into());
        }
    }
    for (col, run) in run_cells(m) {
        header.push(format!("anomalies_{col}"));
        row.push(run.anomaly_count.to_string());
        header.push(format!("blocked_{col}"));
        row.push(run.blocked_count.to_string());
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header).expect("in-memory write");
    w.write_record(&row).expect("in-memory write");
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf-8 input")
}

/// One PerRR value of the flat summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub task_id: String,
    pub reference: String,
    pub other: String,
    pub metric: String,
    /// Empty when the reference Macro-F1 is zero.
    pub perrr: Option<f64>,
}

/// All PerRR values across matrices as CSV, in full precision.
pub fn aggregate_summary(matrices: &[MatrixResult]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for m in matrices {
        for s in &m.variants {
            w.serialize(SummaryRow {
                task_id: m.task_id.clone(),
                reference: m.reference_tag.clone(),
                other: m.other_tag.clone(),
                metric: s.perrr_name.clone(),
                perrr: s.perrr,
            })
            .expect("in-memory write");
        }
    }
    if matrices.is_empty() {
        w.write_record(["task_id", "reference", "other", "metric", "perrr"])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf-8 input")
}

pub fn parse_summary(text: &str) -> Result<Vec<SummaryRow>, ReportError> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| ReportError::Summary(e.to_string()))
}
