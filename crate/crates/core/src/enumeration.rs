//! Exhaustive enumeration of prediction sets against a small gold standard.
//!
//! Every assignment of labels to datapoints is scored with Macro-F1 and the
//! scores are bucketed, which shows how many distinct prediction sets share a
//! given Macro-F1 (and therefore a PerRR of 100 against each other).

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::labels::{GoldStandard, LabelSet, Predictions, TaskKind};
use crate::metrics::{self, ClassCounts, MetricError};

pub const DEFAULT_MAX_POINTS: usize = 12;
pub const DEFAULT_MAX_ASSIGNMENTS: u64 = 10_000_000;
/// Macro-F1 values are rounded to this many decimals before bucketing.
pub const BUCKET_DECIMALS: u32 = 9;
const BUCKET_SCALE: f64 = 1e9;
const F1_TOLERANCE: f64 = 1e-9;
/// Multi-label enumeration needs one bitmask per datapoint.
const MAX_MULTILABEL_LABELS: usize = 16;

#[derive(Debug, Error)]
pub enum EnumerationError {
    #[error("enumeration too large: {reason}")]
    TooLarge { reason: String },
    #[error("multi-label enumeration must be enabled explicitly")]
    MultilabelDisabled,
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("malformed histogram file {path}: {reason}")]
    Malformed { path: String, reason: String },
}

/// A gold standard small enough to enumerate every prediction set over it.
#[derive(Debug, Clone)]
pub struct EnumerationSpec {
    gold: GoldStandard,
    gold_masks: Vec<u64>,
    choices: Vec<u64>,
    assignments: u64,
    parallel: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct EnumerationCaps {
    pub max_points: usize,
    pub max_assignments: u64,
    pub allow_multilabel: bool,
}

impl Default for EnumerationCaps {
    fn default() -> Self {
        Self {
            max_points: DEFAULT_MAX_POINTS,
            max_assignments: DEFAULT_MAX_ASSIGNMENTS,
            allow_multilabel: false,
        }
    }
}

impl EnumerationSpec {
    pub fn new(gold: GoldStandard) -> Result<Self, EnumerationError> {
        Self::with_caps(gold, EnumerationCaps::default())
    }

    pub fn with_caps(gold: GoldStandard, caps: EnumerationCaps) -> Result<Self, EnumerationError> {
        let space = gold.space();
        let k = space.len();
        let choices: Vec<u64> = match space.kind() {
            TaskKind::Binary | TaskKind::Multiclass => (0..k).map(|c| 1u64 << c).collect(),
            TaskKind::Multilabel => {
                if !caps.allow_multilabel {
                    return Err(EnumerationError::MultilabelDisabled);
                }
                if k > MAX_MULTILABEL_LABELS {
                    return Err(EnumerationError::TooLarge {
                        reason: format!(
                            "{k} labels exceed the multi-label limit of {MAX_MULTILABEL_LABELS}"
                        ),
                    });
                }
                (0..(1u64 << k)).collect()
            }
        };
        let n = gold.len();
        if n > caps.max_points {
            return Err(EnumerationError::TooLarge {
                reason: format!("{n} datapoints exceed the cap of {}", caps.max_points),
            });
        }
        let assignments = (choices.len() as u64)
            .checked_pow(n as u32)
            .filter(|&a| a <= caps.max_assignments)
            .ok_or_else(|| EnumerationError::TooLarge {
                reason: format!(
                    "{}^{n} prediction sets exceed the cap of {}",
                    choices.len(),
                    caps.max_assignments
                ),
            })?;
        let gold_masks = gold
            .entries()
            .values()
            .map(|set| mask_of(&gold, set))
            .collect();
        Ok(Self {
            gold,
            gold_masks,
            choices,
            assignments,
            parallel: true,
        })
    }

    /// Switches between rayon and a plain sequential loop; results are identical.
    pub fn parallel(mut self, parallel: bool) -> Self {
        self.parallel = parallel;
        self
    }

    pub fn gold(&self) -> &GoldStandard {
        &self.gold
    }

    /// Number of distinct prediction sets, `choices^n`.
    pub fn assignments(&self) -> u64 {
        self.assignments
    }

    fn decode(&self, mut index: u64, out: &mut [u64]) {
        let base = self.choices.len() as u64;
        for slot in out.iter_mut().rev() {
            *slot = self.choices[(index % base) as usize];
            index /= base;
        }
    }

    fn score(&self, pred: &[u64], counts: &mut [ClassCounts]) -> f64 {
        counts.iter_mut().for_each(|c| *c = ClassCounts::default());
        for (&p, &g) in pred.iter().zip(&self.gold_masks) {
            for (class, c) in counts.iter_mut().enumerate() {
                let bit = 1u64 << class;
                match (p & bit != 0, g & bit != 0) {
                    (true, true) => c.tp += 1,
                    (true, false) => c.fp += 1,
                    (false, true) => c.fn_ += 1,
                    (false, false) => {}
                }
            }
        }
        counts.iter().map(|c| c.f1()).sum::<f64>() / counts.len() as f64
    }

    /// Folds `f` over the Macro-F1 of every assignment in `range`.
    fn fold_range<T>(
        &self,
        range: std::ops::Range<u64>,
        init: T,
        mut f: impl FnMut(&mut T, f64),
    ) -> T {
        let mut acc = init;
        let mut pred = vec![0u64; self.gold_masks.len()];
        let mut counts = vec![ClassCounts::default(); self.gold.space().len()];
        for index in range {
            self.decode(index, &mut pred);
            let f1 = self.score(&pred, &mut counts);
            f(&mut acc, f1);
        }
        acc
    }

    fn chunks(&self) -> Vec<std::ops::Range<u64>> {
        const CHUNK: u64 = 1 << 14;
        (0..self.assignments.div_ceil(CHUNK))
            .map(|i| i * CHUNK..((i + 1) * CHUNK).min(self.assignments))
            .collect()
    }

    fn map_reduce<T: Send>(
        &self,
        init: impl Fn() -> T + Sync,
        step: impl Fn(&mut T, f64) + Sync,
        merge: impl Fn(T, T) -> T + Sync,
    ) -> T {
        if self.parallel {
            self.chunks()
                .into_par_iter()
                .map(|r| self.fold_range(r, init(), &step))
                .reduce(&init, &merge)
        } else {
            self.fold_range(0..self.assignments, init(), &step)
        }
    }
}

fn mask_of(gold: &GoldStandard, set: &LabelSet) -> u64 {
    set.iter()
        .filter_map(|l| gold.space().index_of(l))
        .fold(0, |m, i| m | (1u64 << i))
}

/// Bucket key: Macro-F1 scaled by 10^9 and rounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BucketKey(i64);

impl BucketKey {
    pub fn from_f1(f1: f64) -> Self {
        Self((f1 * BUCKET_SCALE).round() as i64)
    }

    pub fn value(self) -> f64 {
        self.0 as f64 / BUCKET_SCALE
    }
}

/// Number of distinct prediction sets per (rounded) Macro-F1 value.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct F1Histogram {
    buckets: BTreeMap<BucketKey, u64>,
    total: u64,
}

impl F1Histogram {
    fn add(&mut self, f1: f64) {
        *self.buckets.entry(BucketKey::from_f1(f1)).or_default() += 1;
        self.total += 1;
    }

    fn merge(mut self, other: F1Histogram) -> F1Histogram {
        for (k, v) in other.buckets {
            *self.buckets.entry(k).or_default() += v;
        }
        self.total += other.total;
        self
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn len(&self) -> usize {
        self.buckets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }

    /// `(macro_f1, count)` pairs in ascending Macro-F1 order.
    pub fn iter(&self) -> impl Iterator<Item = (f64, u64)> + '_ {
        self.buckets.iter().map(|(k, &v)| (k.value(), v))
    }

    pub fn buckets(&self) -> &BTreeMap<BucketKey, u64> {
        &self.buckets
    }

    /// Count of the bucket that `f1` rounds into.
    pub fn count_at(&self, f1: f64) -> u64 {
        self.buckets
            .get(&BucketKey::from_f1(f1))
            .copied()
            .unwrap_or(0)
    }

    /// Count-weighted mean Macro-F1 over all prediction sets.
    pub fn mean(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        self.iter().map(|(f, c)| f * c as f64).sum::<f64>() / self.total as f64
    }

    /// The most populated bucket; ties go to the lower Macro-F1.
    pub fn peak(&self) -> Option<(f64, u64)> {
        self.iter()
            .fold(None, |best: Option<(f64, u64)>, (f, c)| match best {
                Some((_, bc)) if bc >= c => best,
                _ => Some((f, c)),
            })
    }
}

/// Scores every prediction set over `spec` and buckets the Macro-F1 values.
pub fn enumerate_histogram(spec: &EnumerationSpec) -> F1Histogram {
    spec.map_reduce(F1Histogram::default, |h, f1| h.add(f1), F1Histogram::merge)
}

/// How many enumerated prediction sets tie a reference run on Macro-F1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerrrEqualCount {
    /// Every prediction set within tolerance, the reference itself included.
    pub inclusive: u64,
    /// Same count with the reference assignment removed.
    pub exclusive: u64,
    pub reference_f1: f64,
}

/// Counts prediction sets whose Macro-F1 equals that of `reference` to within
/// 1e-9, i.e. the sets that would score a PerRR of 100 against it.
pub fn count_perrr_equal(
    spec: &EnumerationSpec,
    reference: &Predictions,
) -> Result<PerrrEqualCount, EnumerationError> {
    let reference_f1 = metrics::macro_f1(reference, spec.gold())?.macro_f1;
    let inclusive = spec.map_reduce(
        || 0u64,
        |n, f1| {
            if (f1 - reference_f1).abs() <= F1_TOLERANCE {
                *n += 1;
            }
        },
        |a, b| a + b,
    );
    let enumerated = reference
        .values()
        .all(|set| spec.choices.contains(&mask_of(spec.gold(), set)));
    Ok(PerrrEqualCount {
        inclusive,
        exclusive: inclusive - u64::from(enumerated && inclusive > 0),
        reference_f1,
    })
}

/// `macro_f1,count` rows sorted by Macro-F1, 9 decimals, LF line endings.
pub fn histogram_csv(h: &F1Histogram) -> String {
    let mut out = String::from("macro_f1,count\n");
    for (f1, count) in h.iter() {
        out.push_str(&format!("{f1:.9},{count}\n"));
    }
    out
}

/// Writes [`histogram_csv`] to `path`.
pub fn export_histogram(h: &F1Histogram, path: &Path) -> Result<(), EnumerationError> {
    fs::write(path, histogram_csv(h)).map_err(|source| EnumerationError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads a file written by [`export_histogram`].
pub fn read_histogram(path: &Path) -> Result<F1Histogram, EnumerationError> {
    let malformed = |reason: String| EnumerationError::Malformed {
        path: path.display().to_string(),
        reason,
    };
    let text = fs::read_to_string(path).map_err(|source| EnumerationError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut lines = text.lines();
    if lines.next() != Some("macro_f1,count") {
        return Err(malformed("missing `macro_f1,count` header".into()));
    }
    let mut h = F1Histogram::default();
    for (i, line) in lines.enumerate() {
        let (f1, count) = line
            .split_once(',')
            .ok_or_else(|| malformed(format!("line {}: expected two columns", i + 2)))?;
        let f1: f64 = f1
            .parse()
            .map_err(|e| malformed(format!("line {}: {e}", i + 2)))?;
        let count: u64 = count
            .parse()
            .map_err(|e| malformed(format!("line {}: {e}", i + 2)))?;
        *h.buckets.entry(BucketKey::from_f1(f1)).or_default() += count;
        h.total += count;
    }
    Ok(h)
}
