#![allow(dead_code)]

use std::sync::Arc;

use chrono::{TimeZone, Utc};
use request_harness::backend::{Backend, MockProvider, MockRule, MockSpec};
use request_harness::dataset::{DataRecord, Dataset};
use request_harness::labels::{LabelSet, LabelSpace, TaskKind};
use request_harness::parser::ParseStatus;
use request_harness::pipeline::{Clock, FixedClock};
use request_harness::prompt::{load_bundled_prompts, RegimeBundle};
use serde::Deserialize;

pub const BINARY_GOLD: [&str; 6] = ["1", "0", "1", "0", "1", "0"];

/// Six court statements, gold alternating 1,0,1,0,1,0.
pub fn binary_dataset() -> Dataset {
    let records = BINARY_GOLD
        .iter()
        .enumerate()
        .map(|(i, g)| DataRecord {
            id: format!("case-{}", i + 1),
            text: format!(
                "Statement number {} concerning case-{} and its facts.",
                i + 1,
                i + 1
            ),
            gold: LabelSet::single(*g),
        })
        .collect();
    Dataset::new(LabelSpace::binary("human-rights"), records, None).unwrap()
}

pub fn hr_bundle() -> RegimeBundle {
    load_bundled_prompts().remove("hr_gemini").unwrap()
}

pub fn rule(keyword: &str, response: &str) -> MockRule {
    MockRule {
        keyword: keyword.into(),
        response: response.into(),
    }
}

pub fn mock(name: &str, spec: MockSpec) -> Backend {
    Backend::new(
        name,
        format!("{name}-model"),
        Box::new(MockProvider::new(spec, None).unwrap()),
    )
}

/// Answers every datapoint with its gold label.
pub fn oracle_spec() -> MockSpec {
    let mut spec = MockSpec::constant("0");
    spec.rules = BINARY_GOLD
        .iter()
        .enumerate()
        .map(|(i, g)| rule(&format!("case-{} ", i + 1), g))
        .collect();
    spec
}

pub fn fixed_clock() -> Arc<dyn Clock> {
    Arc::new(FixedClock(
        Utc.with_ymd_and_hms(2024, 1, 2, 3, 4, 5).unwrap(),
    ))
}

pub const PARSER_GOLDEN: &str = include_str!("../fixtures/parser_golden.toml");

fn ipc(sections: &[&str]) -> Vec<String> {
    sections
        .iter()
        .map(|s| format!("Indian Penal Code, 1860_{s}"))
        .collect()
}

/// Label space for each `format` of the parser golden fixtures.
pub fn parser_space(format: &str) -> LabelSpace {
    match format {
        "statute" => LabelSpace::new(
            "statute",
            TaskKind::Multilabel,
            ipc(&["34", "201", "302", "304", "304B", "307", "498A"]),
        ),
        "toy_statute" => LabelSpace::new(
            "statute",
            TaskKind::Multilabel,
            ["Statute1", "Statute2", "Statute3"],
        ),
        "echr" => Ok(LabelSpace::binary("human-rights")),
        "stock" => Ok(LabelSpace::binary("stock-AAPL")),
        "suicide" => LabelSpace::new(
            "suicide-watch",
            TaskKind::Multiclass,
            [
                "SuicideWatch",
                "Depression",
                "Anxiety",
                "Bipolar",
                "OffMyChest",
            ],
        ),
        "severity" => LabelSpace::new(
            "depression-severity",
            TaskKind::Multiclass,
            ["Minimum", "Mild", "Moderate", "Severe"],
        ),
        other => panic!("unknown fixture format `{other}`"),
    }
    .unwrap()
}

#[derive(Debug, Clone, Deserialize)]
pub struct Case {
    pub format: String,
    pub response: String,
    pub labels: Vec<String>,
    pub status: ParseStatus,
}

#[derive(Deserialize)]
struct Golden {
    case: Vec<Case>,
}

pub fn golden_cases() -> Vec<Case> {
    toml::from_str::<Golden>(PARSER_GOLDEN).unwrap().case
}

pub fn expected(case: &Case) -> LabelSet {
    case.labels.iter().map(String::as_str).collect()
}

pub fn salvageable() -> Vec<Case> {
    golden_cases()
        .into_iter()
        .filter(|c| c.status != ParseStatus::Failed)
        .collect()
}

pub fn preamble(format: &str, i: usize) -> &'static str {
    let list = ["Here is the response: ", "Statutes: ", "Response: "];
    let other = ["Answer: ", "Output: ", "Final answer: "];
    if format.ends_with("statute") {
        list[i % list.len()]
    } else {
        other[i % other.len()]
    }
}

/// Re-spaces the separators and line breaks of a response.
pub fn respace(response: &str, sep_pad: &str, crlf: bool) -> String {
    let s = response
        .split(';')
        .map(str::trim)
        .collect::<Vec<_>>()
        .join(&format!("{sep_pad};{sep_pad}"));
    if crlf {
        s.replace('\n', "\r\n")
    } else {
        s
    }
}
