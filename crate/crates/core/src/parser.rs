//! Turns raw model text into label sets, one parser per response format.
//!
//! Parsers are total: a response that names no valid label yields
//! [`ParseStatus::Failed`] with an empty set instead of an error, so every
//! datapoint can still be scored. Matching is exact after trimming; there is
//! no fuzzy matching, which would manufacture agreement between runs.

use serde::{Deserialize, Serialize};

use crate::labels::{LabelSet, LabelSpace, TaskKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseStatus {
    Clean,
    Salvaged,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseOutcome {
    pub labels: LabelSet,
    pub status: ParseStatus,
    /// What was stripped or dropped, or why parsing failed.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

impl ParseOutcome {
    pub fn failed(note: impl Into<String>) -> Self {
        Self {
            labels: LabelSet::empty(),
            status: ParseStatus::Failed,
            note: note.into(),
        }
    }

    fn found(labels: LabelSet, notes: Vec<String>) -> Self {
        let status = if notes.is_empty() {
            ParseStatus::Clean
        } else {
            ParseStatus::Salvaged
        };
        Self {
            labels,
            status,
            note: notes.join("; "),
        }
    }

    pub fn is_failed(&self) -> bool {
        self.status == ParseStatus::Failed
    }
}

/// Picks the parser matching the task kind of `space`.
pub fn parse_response(text: &str, space: &LabelSpace) -> ParseOutcome {
    match space.kind() {
        TaskKind::Multilabel => parse_semicolon_list(text, space),
        TaskKind::Binary => parse_binary_first_line(text, space),
        TaskKind::Multiclass => parse_single_class(text, space),
    }
}

fn trim_quotes(s: &str) -> &str {
    s.trim()
        .trim_matches(|c: char| c == '`' || c == '"' || c == '\'' || c.is_whitespace())
}

/// Removes list bullets, list numbering, bold markers and a trailing period.
fn strip_decoration(s: &str) -> &str {
    let mut s = trim_quotes(s);
    loop {
        let before = s;
        s = s.trim_start_matches(['*', '-', '•', '+', '#']).trim_start();
        let digits = s.len() - s.trim_start_matches(|c: char| c.is_ascii_digit()).len();
        if digits > 0 {
            let rest = &s[digits..];
            if let Some(r) = rest.strip_prefix(". ").or_else(|| rest.strip_prefix(") ")) {
                s = r.trim_start();
            }
        }
        s = s.trim_end_matches(['*', '.']).trim_end();
        s = trim_quotes(s);
        if s == before {
            return s;
        }
    }
}

/// Multi-label format `Label1; Label2 ...`.
pub fn parse_semicolon_list(text: &str, space: &LabelSpace) -> ParseOutcome {
    if text.trim().is_empty() {
        return ParseOutcome::failed("empty response");
    }
    let mut labels = LabelSet::empty();
    let mut notes = Vec::new();
    for raw in text.split([';', '\n']) {
        let token = trim_quotes(raw);
        if token.is_empty() {
            continue;
        }
        if space.contains(token) {
            labels.insert(token);
            continue;
        }
        let bare = strip_decoration(token);
        if bare.is_empty() {
            continue;
        }
        if space.contains(bare) {
            labels.insert(bare);
            notes.push(format!("stripped formatting from `{token}`"));
            continue;
        }
        let mut preamble = None;
        let mut hit = None;
        for (i, _) in bare.match_indices(':') {
            let candidate = strip_decoration(&bare[i + 1..]);
            if preamble.is_none() {
                preamble = Some(&bare[..=i]);
            }
            if space.contains(candidate) {
                hit = Some((&bare[..=i], candidate));
                break;
            }
        }
        match (hit, preamble) {
            (Some((pre, label)), _) => {
                labels.insert(label);
                notes.push(format!("stripped preamble `{}`", pre.trim()));
            }
            (None, Some(pre)) => {
                let rest = strip_decoration(&bare[pre.len()..]);
                notes.push(format!("stripped preamble `{}`", pre.trim()));
                if !rest.is_empty() {
                    notes.push(format!("dropped `{rest}`"));
                }
            }
            (None, None) => notes.push(format!("dropped `{bare}`")),
        }
    }
    if labels.is_empty() {
        let mut out = ParseOutcome::failed("no valid labels");
        if !notes.is_empty() {
            out.note = format!("no valid labels; {}", notes.join("; "));
        }
        return out;
    }
    ParseOutcome::found(labels, notes)
}

fn standalone_tokens(line: &str) -> impl Iterator<Item = &str> {
    line.split(|c: char| !c.is_alphanumeric() && c != '_')
        .filter(|t| !t.is_empty())
}

/// Binary format: the label alone on the first line, explanation after.
pub fn parse_binary_first_line(text: &str, space: &LabelSpace) -> ParseOutcome {
    let trimmed = text.trim();
    let Some(first) = trimmed.lines().next() else {
        return ParseOutcome::failed("empty response");
    };
    let first = first.trim();
    if space.contains(first) {
        return ParseOutcome::found(LabelSet::single(first), Vec::new());
    }
    let bare = strip_decoration(first);
    if space.contains(bare) {
        return ParseOutcome::found(
            LabelSet::single(bare),
            vec![format!("stripped formatting from `{first}`")],
        );
    }
    let mut hits: Vec<&str> = standalone_tokens(first)
        .filter(|t| space.contains(t))
        .collect();
    hits.sort_unstable();
    hits.dedup();
    match hits.as_slice() {
        [one] => ParseOutcome::found(
            LabelSet::single(*one),
            vec![format!("label found inside `{first}`")],
        ),
        [] => ParseOutcome::failed("no label on the first line"),
        many => ParseOutcome::failed(format!("ambiguous: first line names {}", many.join(", "))),
    }
}

/// Finds `needle` in `haystack` (both lowercased) at word boundaries.
fn contains_word(haystack: &str, needle: &str) -> bool {
    let is_word = |c: char| c.is_alphanumeric() || c == '_';
    haystack.match_indices(needle).any(|(i, m)| {
        let before = haystack[..i].chars().next_back();
        let after = haystack[i + m.len()..].chars().next();
        !before.is_some_and(is_word) && !after.is_some_and(is_word)
    })
}

/// Multi-class format: a single class name.
pub fn parse_single_class(text: &str, space: &LabelSpace) -> ParseOutcome {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return ParseOutcome::failed("empty response");
    }
    if let Some(label) = space
        .labels()
        .iter()
        .find(|l| l.eq_ignore_ascii_case(trimmed))
    {
        return ParseOutcome::found(LabelSet::single(label.as_str()), Vec::new());
    }
    let bare = strip_decoration(trimmed);
    if let Some(label) = space.labels().iter().find(|l| l.eq_ignore_ascii_case(bare)) {
        return ParseOutcome::found(
            LabelSet::single(label.as_str()),
            vec![format!("stripped formatting from `{trimmed}`")],
        );
    }
    let lowered = trimmed.to_lowercase();
    let matched: Vec<&String> = space
        .labels()
        .iter()
        .filter(|l| contains_word(&lowered, &l.to_lowercase()))
        .collect();
    // A label that only occurs as part of a longer matched label is not a match.
    let matched: Vec<&String> = matched
        .iter()
        .copied()
        .filter(|l| {
            let ll = l.to_lowercase();
            !matched
                .iter()
                .any(|o| o.len() > l.len() && contains_word(&o.to_lowercase(), &ll))
        })
        .collect();
    match matched.as_slice() {
        [one] => ParseOutcome::found(
            LabelSet::single(one.as_str()),
            vec![format!("label found inside response")],
        ),
        [] => ParseOutcome::failed("no class name found"),
        many => ParseOutcome::failed(format!(
            "ambiguous: response names {}",
            many.iter()
                .map(|s| s.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn statutes() -> LabelSpace {
        LabelSpace::new(
            "statute",
            TaskKind::Multilabel,
            [
                "Indian Penal Code, 1860_302",
                "Indian Penal Code, 1860_307",
                "Indian Penal Code, 1860_34",
            ],
        )
        .unwrap()
    }

    #[test]
    fn semicolon_list_clean_and_salvaged() {
        let out = parse_semicolon_list(
            "Indian Penal Code, 1860_307; Indian Penal Code, 1860_302",
            &statutes(),
        );
        assert_eq!(out.status, ParseStatus::Clean);
        assert_eq!(out.labels.len(), 2);

        let out = parse_semicolon_list(
            "Here is the response: X; Indian Penal Code, 1860_302",
            &statutes(),
        );
        assert_eq!(out.status, ParseStatus::Salvaged);
        assert_eq!(out.labels, LabelSet::single("Indian Penal Code, 1860_302"));
        assert!(
            out.note.contains("`X`") && out.note.contains("preamble"),
            "{}",
            out.note
        );

        assert!(parse_semicolon_list("", &statutes()).is_failed());
        assert!(parse_semicolon_list("None of them", &statutes()).is_failed());
    }

    #[test]
    fn label_that_is_a_prefix_of_another_is_not_confused() {
        let out = parse_semicolon_list("Indian Penal Code, 1860_34", &statutes());
        assert_eq!(out.labels, LabelSet::single("Indian Penal Code, 1860_34"));
    }

    #[test]
    fn binary_first_line() {
        let space = LabelSpace::binary("hr");
        let out = parse_binary_first_line("1\nArticles violated: Article 3", &space);
        assert_eq!(
            (out.labels, out.status),
            (LabelSet::single("1"), ParseStatus::Clean)
        );
        assert_eq!(
            parse_binary_first_line("0", &space).status,
            ParseStatus::Clean
        );
        let out = parse_binary_first_line("Prediction: 0 (no violation)", &space);
        assert_eq!(
            (out.labels, out.status),
            (LabelSet::single("0"), ParseStatus::Salvaged)
        );
        assert!(parse_binary_first_line("I cannot determine this.", &space).is_failed());
        assert!(parse_binary_first_line("either 0 or 1", &space).is_failed());
        // only the first line counts
        assert!(parse_binary_first_line("Unsure.\n1", &space).is_failed());
    }

    #[test]
    fn single_class() {
        let space = LabelSpace::new(
            "sev",
            TaskKind::Multiclass,
            ["Minimum", "Mild", "Moderate", "Severe"],
        )
        .unwrap();
        assert_eq!(
            parse_single_class("Moderate", &space).status,
            ParseStatus::Clean
        );
        assert_eq!(
            parse_single_class(" moderate \n", &space).labels,
            LabelSet::single("Moderate")
        );
        let out = parse_single_class("The severity is severe.", &space);
        assert_eq!(
            (out.labels, out.status),
            (LabelSet::single("Severe"), ParseStatus::Salvaged)
        );
        let out = parse_single_class("Mild or Moderate", &space);
        assert!(out.is_failed());
        assert!(out.note.contains("ambiguous"));
        assert!(parse_single_class("Mildly annoyed", &space).is_failed());
    }

    #[test]
    fn nested_class_names_prefer_the_longer() {
        let space = LabelSpace::new(
            "x",
            TaskKind::Multiclass,
            ["Depression", "Severe Depression"],
        )
        .unwrap();
        let out = parse_single_class("Answer: severe depression", &space);
        assert_eq!(out.labels, LabelSet::single("Severe Depression"));
    }
}
