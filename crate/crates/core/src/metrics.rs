//! Scoring functions: one-vs-rest Macro-F1, Jaccard overlap, PerRR and PreRR.
//!
//! Everything here is a pure function over immutable inputs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::{GoldStandard, LabelError, LabelSet, LabelSpace, Predictions};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("prediction and reference id sets differ (missing: {missing:?}, unexpected: {unexpected:?})")]
    IdMismatch {
        missing: Vec<String>,
        unexpected: Vec<String>,
    },
    #[error(transparent)]
    UnknownLabel(#[from] LabelError),
    #[error("label `{label}` is outside label space `{task_id}`")]
    SpaceMismatch { task_id: String, label: String },
    #[error("PerRR is undefined for a reference Macro-F1 of zero")]
    ZeroReference,
    #[error("Macro-F1 value {0} is outside [0, 1]")]
    InvalidScore(f64),
    #[error("cannot average over an empty run")]
    EmptyRun,
}

/// Per-class F1 over the full label space plus their unweighted mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroF1Result {
    pub per_class_f1: BTreeMap<String, f64>,
    pub macro_f1: f64,
}

/// PerRR (percentage, may be negative) and PreRR (ratio in `[0, 1]`) for one run pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReproScores {
    pub perrr: f64,
    pub prerr: f64,
}

/// True/false positive and false negative counts for one class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ClassCounts {
    /// `2TP / (2TP + FP + FN)`, which equals the harmonic mean of precision and
    /// recall whenever both are defined and is 0 otherwise.
    pub fn f1(self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 || self.tp == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

fn check_ids<A, B>(
    left: &BTreeMap<String, A>,
    right: &BTreeMap<String, B>,
) -> Result<(), MetricError> {
    if left.len() == right.len() && left.keys().zip(right.keys()).all(|(a, b)| a == b) {
        return Ok(());
    }
    let missing = right
        .keys()
        .filter(|k| !left.contains_key(*k))
        .cloned()
        .collect();
    let unexpected = left
        .keys()
        .filter(|k| !right.contains_key(*k))
        .cloned()
        .collect();
    Err(MetricError::IdMismatch {
        missing,
        unexpected,
    })
}

/// One-vs-rest Macro-F1 of `predictions` against `gold`, averaged over every
/// label in the gold standard's space (labels absent from both sides score 0).
pub fn macro_f1(
    predictions: &Predictions,
    gold: &GoldStandard,
) -> Result<MacroF1Result, MetricError> {
    check_ids(predictions, gold.entries())?;
    let space = gold.space();
    let mut counts = vec![ClassCounts::default(); space.len()];
    for (id, gold_set) in gold.entries() {
        let pred = &predictions[id];
        space.validate_set(pred)?;
        for (class, label) in space.labels().iter().enumerate() {
            match (pred.contains(label), gold_set.contains(label)) {
                (true, true) => counts[class].tp += 1,
                (true, false) => counts[class].fp += 1,
                (false, true) => counts[class].fn_ += 1,
                (false, false) => {}
            }
        }
    }
    Ok(summarize(space, &counts))
}

fn summarize(space: &LabelSpace, counts: &[ClassCounts]) -> MacroF1Result {
    let mut per_class_f1 = BTreeMap::new();
    let mut sum = 0.0;
    for (label, c) in space.labels().iter().zip(counts) {
        let f1 = c.f1();
        sum += f1;
        per_class_f1.insert(label.clone(), f1);
    }
    MacroF1Result {
        per_class_f1,
        macro_f1: sum / space.len() as f64,
    }
}

/// `|a ∩ b| / |a ∪ b|`, with two empty sets counting as full agreement.
pub fn jaccard(a: &LabelSet, b: &LabelSet) -> f64 {
    let union = a.union_len(b);
    if union == 0 {
        return 1.0;
    }
    a.intersection_len(b) as f64 / union as f64
}

/// [`jaccard`] that first checks both sets belong to `space`.
pub fn jaccard_in(space: &LabelSpace, a: &LabelSet, b: &LabelSet) -> Result<f64, MetricError> {
    for label in a.iter().chain(b.iter()) {
        if !space.contains(label) {
            return Err(MetricError::SpaceMismatch {
                task_id: space.task_id().to_string(),
                label: label.to_string(),
            });
        }
    }
    Ok(jaccard(a, b))
}

/// Performance Reproduction Ratio: `100 - |ref - other| / ref * 100`.
///
/// The first argument is the reference run and sits in the denominator, so the
/// ratio is not symmetric. The result is not clamped and can go negative.
pub fn perrr(macf1_ref: f64, macf1_other: f64) -> Result<f64, MetricError> {
    for v in [macf1_ref, macf1_other] {
        if !(0.0..=1.0).contains(&v) {
            return Err(MetricError::InvalidScore(v));
        }
    }
    if macf1_ref == 0.0 {
        return Err(MetricError::ZeroReference);
    }
    Ok(100.0 - (macf1_ref - macf1_other).abs() / macf1_ref * 100.0)
}

/// Prediction Reproduction Ratio: mean per-datapoint Jaccard overlap of two runs.
pub fn prerr(run_a: &Predictions, run_b: &Predictions) -> Result<f64, MetricError> {
    check_ids(run_a, run_b)?;
    if run_a.is_empty() {
        return Err(MetricError::EmptyRun);
    }
    let total: f64 = run_a.iter().map(|(id, a)| jaccard(a, &run_b[id])).sum();
    Ok(total / run_a.len() as f64)
}

/// PerRR and PreRR of `other` measured against `reference`.
pub fn repro_scores(
    reference: &Predictions,
    other: &Predictions,
    gold: &GoldStandard,
) -> Result<ReproScores, MetricError> {
    let ref_f1 = macro_f1(reference, gold)?.macro_f1;
    let other_f1 = macro_f1(other, gold)?.macro_f1;
    Ok(ReproScores {
        perrr: perrr(ref_f1, other_f1)?,
        prerr: prerr(reference, other)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::{predictions_from_sequence, TaskKind};

    fn binary_gold(seq: &[&str]) -> GoldStandard {
        GoldStandard::from_sequence(LabelSpace::binary("bin"), seq).unwrap()
    }

    #[test]
    fn appendix_pred_set_scores() {
        let gold = binary_gold(&["1", "0", "1", "0", "1", "0"]);
        let pred = predictions_from_sequence(&["0", "0", "0", "0", "1", "1"]);
        let r = macro_f1(&pred, &gold).unwrap();
        assert!((r.per_class_f1["1"] - 0.4).abs() < 1e-12);
        assert!((r.per_class_f1["0"] - 4.0 / 7.0).abs() < 1e-12);
        assert!((r.macro_f1 - 0.4857).abs() < 5e-5);
    }

    #[test]
    fn identity_gives_one_when_every_class_occurs() {
        let gold = binary_gold(&["1", "0", "0"]);
        let pred = predictions_from_sequence(&["1", "0", "0"]);
        assert_eq!(macro_f1(&pred, &gold).unwrap().macro_f1, 1.0);
    }

    #[test]
    fn classes_absent_everywhere_score_zero() {
        let space = LabelSpace::new("m", TaskKind::Multiclass, ["a", "b", "c"]).unwrap();
        let gold = GoldStandard::from_sequence(space, &["a", "b"]).unwrap();
        let r = macro_f1(&predictions_from_sequence(&["a", "b"]), &gold).unwrap();
        assert_eq!(r.per_class_f1["c"], 0.0);
        assert!((r.macro_f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_prediction_costs_recall() {
        let gold = binary_gold(&["1", "0"]);
        let mut pred = predictions_from_sequence(&["1", "0"]);
        pred.insert("1".into(), LabelSet::empty());
        let r = macro_f1(&pred, &gold).unwrap();
        assert_eq!(r.per_class_f1["1"], 1.0);
        assert_eq!(r.per_class_f1["0"], 0.0);
    }

    #[test]
    fn macro_f1_rejects_mismatched_ids_and_labels() {
        let gold = binary_gold(&["1", "0"]);
        let short = predictions_from_sequence(&["1"]);
        assert!(matches!(
            macro_f1(&short, &gold),
            Err(MetricError::IdMismatch { ref missing, .. }) if missing == &["1".to_string()]
        ));
        let alien = predictions_from_sequence(&["1", "7"]);
        assert!(matches!(
            macro_f1(&alien, &gold),
            Err(MetricError::UnknownLabel(_))
        ));
    }

    #[test]
    fn jaccard_cases() {
        let a: LabelSet = ["c1", "c2"].into_iter().collect();
        let b: LabelSet = ["c1", "c2", "c3"].into_iter().collect();
        assert!((jaccard(&a, &b) - 2.0 / 3.0).abs() < 1e-15);
        assert!((jaccard(&a, &b) - 0.667).abs() < 5e-4);
        assert_eq!(jaccard(&a, &a), 1.0);
        assert_eq!(
            jaccard(&LabelSet::single("c1"), &LabelSet::single("c2")),
            0.0
        );
        assert_eq!(jaccard(&LabelSet::empty(), &LabelSet::empty()), 1.0);
    }

    #[test]
    fn jaccard_in_checks_space() {
        let space = LabelSpace::new("m", TaskKind::Multilabel, ["c1", "c2"]).unwrap();
        let err = jaccard_in(&space, &LabelSet::single("c1"), &LabelSet::single("c9")).unwrap_err();
        assert!(matches!(err, MetricError::SpaceMismatch { .. }));
    }

    #[test]
    fn perrr_cases() {
        assert!((perrr(0.2912, 0.2967).unwrap() - 98.111).abs() < 1e-3);
        assert_eq!(perrr(0.37, 0.37).unwrap(), 100.0);
        assert_eq!(perrr(0.5, 0.25).unwrap(), 50.0);
        assert!(perrr(0.1, 0.35).unwrap() < 0.0);
        assert_eq!(perrr(0.0, 0.3), Err(MetricError::ZeroReference));
        assert!(matches!(perrr(1.2, 0.3), Err(MetricError::InvalidScore(_))));
        assert!(matches!(
            perrr(f64::NAN, 0.3),
            Err(MetricError::InvalidScore(_))
        ));
    }

    #[test]
    fn prerr_cases() {
        let p1 = predictions_from_sequence(&["0", "0", "0", "0", "1", "1"]);
        let p2 = predictions_from_sequence(&["0", "0", "0", "1", "1", "0"]);
        assert!((prerr(&p1, &p2).unwrap() - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(prerr(&p1, &p1).unwrap(), 1.0);
        assert_eq!(
            prerr(&Predictions::new(), &Predictions::new()),
            Err(MetricError::EmptyRun)
        );
        assert!(matches!(
            prerr(&p1, &predictions_from_sequence(&["0"])),
            Err(MetricError::IdMismatch { .. })
        ));
    }

    #[test]
    fn multilabel_prerr_matches_hand_sheet() {
        // Per-point Jaccards: 1/2, 1, 0, 1 (both empty), 2/3.
        let run = |rows: &[&[&str]]| -> Predictions {
            rows.iter()
                .enumerate()
                .map(|(i, r)| (format!("d{i}"), r.iter().copied().collect()))
                .collect()
        };
        let a = run(&[&["s1", "s2"], &["s3"], &["s1"], &[], &["s1", "s2", "s4"]]);
        let b = run(&[&["s1"], &["s3"], &["s2"], &[], &["s1", "s2"]]);
        let expected = (0.5 + 1.0 + 0.0 + 1.0 + 2.0 / 3.0) / 5.0;
        assert!((prerr(&a, &b).unwrap() - expected).abs() < 1e-15);
    }
}
