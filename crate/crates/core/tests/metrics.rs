use std::collections::BTreeMap;

use proptest::prelude::*;
use request_harness::labels::{GoldStandard, LabelSet, LabelSpace, Predictions, TaskKind};
use request_harness::metrics::{jaccard, macro_f1, perrr, prerr, MetricError};

const CASES: u32 = 1000;

fn label(i: usize) -> String {
    format!("L{i}")
}

fn set_of(mask: u8, k: usize) -> LabelSet {
    (0..k).filter(|i| mask & (1 << i) != 0).map(label).collect()
}

fn space(k: usize, kind: TaskKind) -> LabelSpace {
    LabelSpace::new("prop", kind, (0..k).map(label)).unwrap()
}

/// Per-class precision and recall, F1 as their harmonic mean (0 when undefined),
/// averaged over the whole space. Written independently of the library.
fn oracle_macro_f1(gold: &[LabelSet], pred: &[LabelSet], labels: &[String]) -> f64 {
    let mut sum = 0.0;
    for l in labels {
        let mut tp = 0.0;
        let mut predicted = 0.0;
        let mut actual = 0.0;
        for (g, p) in gold.iter().zip(pred) {
            let (in_g, in_p) = (g.contains(l), p.contains(l));
            if in_p {
                predicted += 1.0;
            }
            if in_g {
                actual += 1.0;
            }
            if in_g && in_p {
                tp += 1.0;
            }
        }
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = if actual > 0.0 { tp / actual } else { 0.0 };
        sum += if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
    }
    sum / labels.len() as f64
}

fn keyed(sets: &[LabelSet], ids: &[String]) -> Predictions {
    ids.iter().cloned().zip(sets.iter().cloned()).collect()
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("d{i:03}")).collect()
}

/// Label-space size and paired multilabel gold/prediction masks.
fn multilabel_case() -> impl Strategy<Value = (usize, Vec<(u8, u8)>)> {
    (1usize..=6).prop_flat_map(|k| {
        let top = 1u8 << k;
        (Just(k), prop::collection::vec((0..top, 0..top), 1..=16))
    })
}

/// Single-label gold and prediction class indices.
fn single_label_case() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
    (2usize..=6).prop_flat_map(|k| (Just(k), prop::collection::vec((0..k, 0..k), 1..=16)))
}

fn label_set() -> impl Strategy<Value = LabelSet> {
    prop::collection::btree_set(0usize..8, 0..=8).prop_map(|s| s.into_iter().map(label).collect())
}

fn run_pair() -> impl Strategy<Value = (Vec<LabelSet>, Vec<LabelSet>)> {
    (1usize..=16).prop_flat_map(|n| {
        (
            prop::collection::vec(label_set(), n),
            prop::collection::vec(label_set(), n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(CASES))]

    #[test]
    fn jaccard_is_symmetric(a in label_set(), b in label_set()) {
        prop_assert_eq!(jaccard(&a, &b), jaccard(&b, &a));
    }

    #[test]
    fn jaccard_is_a_ratio(a in label_set(), b in label_set()) {
        let j = jaccard(&a, &b);
        prop_assert!((0.0..=1.0).contains(&j), "{}", j);
        if a != b {
            prop_assert!(j < 1.0);
        }
    }

    #[test]
    fn jaccard_identity(a in label_set()) {
        prop_assert_eq!(jaccard(&a, &a), 1.0);
    }

    #[test]
    fn prerr_is_symmetric((a, b) in run_pair()) {
        let ids = ids(a.len());
        let (ra, rb) = (keyed(&a, &ids), keyed(&b, &ids));
        prop_assert_eq!(prerr(&ra, &rb).unwrap(), prerr(&rb, &ra).unwrap());
    }

    #[test]
    fn prerr_is_a_ratio_and_one_on_itself((a, b) in run_pair()) {
        let ids = ids(a.len());
        let (ra, rb) = (keyed(&a, &ids), keyed(&b, &ids));
        let p = prerr(&ra, &rb).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert_eq!(prerr(&ra, &ra).unwrap(), 1.0);
    }

    #[test]
    fn perrr_of_itself_is_100(x in 1e-9f64..=1.0) {
        prop_assert_eq!(perrr(x, x).unwrap(), 100.0);
    }

    #[test]
    fn perrr_never_exceeds_100(r in 1e-9f64..=1.0, o in 0.0f64..=1.0) {
        let p = perrr(r, o).unwrap();
        prop_assert!(p <= 100.0, "{}", p);
    }

    #[test]
    fn perrr_is_asymmetric_off_the_diagonal(a in 0.01f64..=1.0, b in 0.01f64..=1.0) {
        prop_assume!((a - b).abs() > 1e-6);
        prop_assert!(perrr(a, b).unwrap() != perrr(b, a).unwrap());
    }

    #[test]
    fn macro_f1_matches_oracle_multilabel((k, rows) in multilabel_case()) {
        let space = space(k, TaskKind::Multilabel);
        let gold_sets: Vec<LabelSet> = rows.iter().map(|&(g, _)| set_of(g, k)).collect();
        let pred_sets: Vec<LabelSet> = rows.iter().map(|&(_, p)| set_of(p, k)).collect();
        let ids = ids(rows.len());
        let gold = GoldStandard::new(space.clone(), keyed(&gold_sets, &ids)).unwrap();
        let got = macro_f1(&keyed(&pred_sets, &ids), &gold).unwrap().macro_f1;
        let want = oracle_macro_f1(&gold_sets, &pred_sets, space.labels());
        prop_assert!((got - want).abs() <= 1e-12, "{} vs {}", got, want);
    }

    #[test]
    fn macro_f1_matches_oracle_single_label((k, rows) in single_label_case()) {
        let space = space(k, TaskKind::Multiclass);
        let gold_sets: Vec<LabelSet> = rows.iter().map(|&(g, _)| LabelSet::single(label(g))).collect();
        let pred_sets: Vec<LabelSet> = rows.iter().map(|&(_, p)| LabelSet::single(label(p))).collect();
        let ids = ids(rows.len());
        let gold = GoldStandard::new(space.clone(), keyed(&gold_sets, &ids)).unwrap();
        let got = macro_f1(&keyed(&pred_sets, &ids), &gold).unwrap().macro_f1;
        let want = oracle_macro_f1(&gold_sets, &pred_sets, space.labels());
        prop_assert!((got - want).abs() <= 1e-12, "{} vs {}", got, want);
        prop_assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn macro_f1_is_permutation_invariant(
        (k, rows, order) in multilabel_case().prop_flat_map(|(k, rows)| {
            let n = rows.len();
            (Just(k), Just(rows), Just((0..n).collect::<Vec<_>>()).prop_shuffle())
        })
    ) {
        let space = space(k, TaskKind::Multilabel);
        let ids = ids(rows.len());
        let score = |rows: &[(u8, u8)]| {
            let g: Vec<LabelSet> = rows.iter().map(|&(g, _)| set_of(g, k)).collect();
            let p: Vec<LabelSet> = rows.iter().map(|&(_, p)| set_of(p, k)).collect();
            let gold = GoldStandard::new(space.clone(), keyed(&g, &ids)).unwrap();
            macro_f1(&keyed(&p, &ids), &gold).unwrap().macro_f1
        };
        let shuffled: Vec<(u8, u8)> = order.iter().map(|&i| rows[i]).collect();
        prop_assert!((score(&rows) - score(&shuffled)).abs() <= 1e-12);
    }

    #[test]
    fn macro_f1_ignores_label_order((k, rows) in single_label_case()) {
        let forward = space(k, TaskKind::Multiclass);
        let reversed = LabelSpace::new("prop", TaskKind::Multiclass, (0..k).rev().map(label)).unwrap();
        let ids = ids(rows.len());
        let g: Vec<LabelSet> = rows.iter().map(|&(g, _)| LabelSet::single(label(g))).collect();
        let p = keyed(&rows.iter().map(|&(_, p)| LabelSet::single(label(p))).collect::<Vec<_>>(), &ids);
        let a = macro_f1(&p, &GoldStandard::new(forward, keyed(&g, &ids)).unwrap()).unwrap();
        let b = macro_f1(&p, &GoldStandard::new(reversed, keyed(&g, &ids)).unwrap()).unwrap();
        prop_assert!((a.macro_f1 - b.macro_f1).abs() <= 1e-12);
        prop_assert_eq!(a.per_class_f1, b.per_class_f1);
    }
}

#[test]
fn perrr_asymmetry_witness() {
    // Reference 0.5, other 0.25: half the reference lost.
    assert_eq!(perrr(0.5, 0.25).unwrap(), 50.0);
    // Swapped, the gap is measured against 0.25 and the whole reference is lost.
    assert_eq!(perrr(0.25, 0.5).unwrap(), 0.0);
}

#[test]
fn perrr_can_go_negative_and_rejects_a_zero_reference() {
    assert!((perrr(0.2, 0.9).unwrap() - -250.0).abs() < 1e-9);
    assert_eq!(perrr(0.0, 0.4), Err(MetricError::ZeroReference));
    assert_eq!(perrr(1.2, 0.4), Err(MetricError::InvalidScore(1.2)));
}

#[test]
fn absent_labels_still_count_in_the_average() {
    let space = space(4, TaskKind::Multiclass);
    let ids = ids(2);
    let g = vec![LabelSet::single("L0"), LabelSet::single("L1")];
    let gold = GoldStandard::new(space, keyed(&g, &ids)).unwrap();
    let r = macro_f1(&keyed(&g, &ids), &gold).unwrap();
    assert_eq!(r.macro_f1, 0.5);
    assert_eq!(r.per_class_f1["L3"], 0.0);
}

#[test]
fn mismatched_ids_are_rejected() {
    let space = space(2, TaskKind::Multiclass);
    let gold = GoldStandard::new(space, keyed(&[LabelSet::single("L0")], &ids(1))).unwrap();
    let pred: Predictions = BTreeMap::from([("other".to_string(), LabelSet::single("L0"))]);
    assert!(matches!(
        macro_f1(&pred, &gold),
        Err(MetricError::IdMismatch { .. })
    ));
    assert!(matches!(
        prerr(&pred, gold.entries()),
        Err(MetricError::IdMismatch { .. })
    ));
}

#[test]
fn two_empty_sets_agree_fully() {
    assert_eq!(jaccard(&LabelSet::empty(), &LabelSet::empty()), 1.0);
    assert_eq!(jaccard(&LabelSet::empty(), &LabelSet::single("a")), 0.0);
}
