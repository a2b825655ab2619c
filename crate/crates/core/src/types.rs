//! Domain types shared across the crate: datasets, bags, predictions,
//! pseudo-labels and per-instance confidence weights.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Absolute tolerance for sums of exact rationals (bag proportions).
pub const RATIONAL_SUM_TOL: f64 = 1e-12;
/// Absolute tolerance for sums of softmax outputs.
pub const PROB_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Feature matrix with per-row class labels.
///
/// Labels are only read to derive bag counts and to score predictions; the
/// training objective never sees them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    class_count: usize,
    split: Split,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, class_count: usize, split: Split) -> Result<Self> {
        if class_count < 2 {
            return Err(Error::InvalidDataset(format!(
                "class count must be at least 2, got {class_count}"
            )));
        }
        if features.cols() < 1 {
            return Err(Error::InvalidDataset("feature dimension must be at least 1".into()));
        }
        if features.rows() != labels.len() {
            return Err(Error::InvalidDataset(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= class_count) {
            return Err(Error::InvalidDataset(format!(
                "label {l} at row {i} is outside [0, {class_count})"
            )));
        }
        Ok(Self {
            features,
            labels,
            class_count,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    /// Stable 64-bit FNV-1a fingerprint of labels and feature bits, rendered as hex.
    pub fn fingerprint(&self) -> String {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h = OFFSET;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(PRIME);
            }
        };
        feed(&(self.class_count as u64).to_le_bytes());
        feed(&(self.dim() as u64).to_le_bytes());
        for &l in &self.labels {
            feed(&(l as u64).to_le_bytes());
        }
        for v in self.features.as_slice() {
            feed(&v.to_bits().to_le_bytes());
        }
        format!("{h:016x}")
    }

    /// Per-class instance counts.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// A group of instances labelled only with its per-class counts.
///
/// Counts are canonical; `proportions` is derived from them. The fields are
/// public so that externally sourced bags can be checked with [`validate_bag`].
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub indices: Vec<usize>,
    pub proportions: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Bag {
    pub fn from_counts(indices: Vec<usize>, counts: Vec<usize>) -> Result<Self> {
        let proportions = proportions_from_counts(&counts)?;
        Ok(Self {
            indices,
            proportions,
            counts,
        })
    }

    /// Builds a bag over `indices`, counting classes from `labels`.
    pub fn from_labels(indices: Vec<usize>, labels: &[usize], class_count: usize) -> Result<Self> {
        let mut counts = vec![0; class_count];
        for &i in &indices {
            let l = *labels.get(i).ok_or_else(|| {
                Error::InvalidArgument(format!("index {i} outside dataset of {} rows", labels.len()))
            })?;
            counts[l] += 1;
        }
        Self::from_counts(indices, counts)
    }

    pub fn size(&self) -> usize {
        self.indices.len()
    }

    pub fn class_count(&self) -> usize {
        self.counts.len()
    }
}

/// Disjoint bags drawn from one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct BagCollection {
    pub bags: Vec<Bag>,
    pub source_dataset_id: String,
}

impl BagCollection {
    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    /// Common bag size, if every bag has the same number of instances.
    pub fn bag_size(&self) -> Option<usize> {
        let m = self.bags.first()?.size();
        self.bags.iter().all(|b| b.size() == m).then_some(m)
    }

    /// Returns the first dataset index found in more than one bag.
    pub fn find_overlap(&self) -> Option<usize> {
        let mut seen = HashSet::new();
        self.bags
            .iter()
            .flat_map(|b| b.indices.iter().copied())
            .find(|&i| !seen.insert(i))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    IndexOutOfRange { index: usize, dataset_len: usize },
    DuplicateIndex(usize),
    ClassCountMismatch { counts: usize, proportions: usize, dataset: usize },
    CountsSumMismatch { sum: usize, bag_size: usize },
    ProportionsSum(f64),
    ProportionCountMismatch { class: usize },
    CountsDisagreeWithLabels { class: usize, stated: usize, actual: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::IndexOutOfRange { index, dataset_len } => {
                write!(f, "index {index} out of range for dataset of {dataset_len} rows")
            }
            Violation::DuplicateIndex(i) => write!(f, "indices not unique: {i} repeats"),
            Violation::ClassCountMismatch {
                counts,
                proportions,
                dataset,
            } => write!(
                f,
                "class dimension mismatch: counts {counts}, proportions {proportions}, dataset {dataset}"
            ),
            Violation::CountsSumMismatch { sum, bag_size } => {
                write!(f, "counts sum to {sum} but bag holds {bag_size} indices")
            }
            Violation::ProportionsSum(s) => write!(f, "proportions sum to {s}, not 1"),
            Violation::ProportionCountMismatch { class } => {
                write!(f, "proportions[{class}]×M ≠ counts[{class}]")
            }
            Violation::CountsDisagreeWithLabels {
                class,
                stated,
                actual,
            } => write!(f, "counts[{class}] = {stated} but labels give {actual}"),
        }
    }
}

/// Every invariant a bag failed.
#[derive(Debug, Clone, PartialEq)]
pub struct ViolationReport(pub Vec<Violation>);

impl fmt::Display for ViolationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ViolationReport {}

/// Checks every bag invariant against `dataset`, collecting all failures.
pub fn validate_bag(bag: &Bag, dataset: &Dataset) -> std::result::Result<(), ViolationReport> {
    let mut v = Vec::new();
    let m = bag.indices.len();
    let c = dataset.class_count();

    let mut seen = HashSet::with_capacity(m);
    for &i in &bag.indices {
        if i >= dataset.len() {
            v.push(Violation::IndexOutOfRange {
                index: i,
                dataset_len: dataset.len(),
            });
        }
        if !seen.insert(i) {
            v.push(Violation::DuplicateIndex(i));
        }
    }

    if bag.counts.len() != c || bag.proportions.len() != c {
        v.push(Violation::ClassCountMismatch {
            counts: bag.counts.len(),
            proportions: bag.proportions.len(),
            dataset: c,
        });
        return Err(ViolationReport(v));
    }

    let sum: usize = bag.counts.iter().sum();
    if sum != m {
        v.push(Violation::CountsSumMismatch { sum, bag_size: m });
    }
    let psum: f64 = bag.proportions.iter().sum();
    if (psum - 1.0).abs() > RATIONAL_SUM_TOL {
        v.push(Violation::ProportionsSum(psum));
    }
    for (class, (&p, &k)) in bag.proportions.iter().zip(&bag.counts).enumerate() {
        if (p * m as f64 - k as f64).abs() > RATIONAL_SUM_TOL * m.max(1) as f64 {
            v.push(Violation::ProportionCountMismatch { class });
        }
    }

    let mut actual = vec![0usize; c];
    for &i in bag.indices.iter().filter(|&&i| i < dataset.len()) {
        actual[dataset.labels()[i]] += 1;
    }
    for (class, (&stated, &actual)) in bag.counts.iter().zip(&actual).enumerate() {
        if stated != actual {
            v.push(Violation::CountsDisagreeWithLabels {
                class,
                stated,
                actual,
            });
        }
    }

    if v.is_empty() {
        Ok(())
    } else {
        Err(ViolationReport(v))
    }
}

/// Per-class counts divided by their total.
pub fn proportions_from_counts(counts: &[usize]) -> Result<Vec<f64>> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::EmptyBag);
    }
    let total = total as f64;
    Ok(counts.iter().map(|&k| k as f64 / total).collect())
}

/// A probability vector over classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction(Vec<f64>);

impl Prediction {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument("probabilities must lie in [0, 1]".into()));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::InvalidArgument(format!("probabilities sum to {s}")));
        }
        Ok(Self(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for Prediction {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Hard one-hot target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabel {
    pub class_index: usize,
    pub onehot: Vec<u8>,
}

impl PseudoLabel {
    pub fn new(class_index: usize, class_count: usize) -> Self {
        let mut onehot = vec![0; class_count];
        onehot[class_index] = 1;
        Self { class_index, onehot }
    }
}

/// Per-instance confidence: `combined = bag_weight × instance_weight`.
///
/// A factor disabled by an ablation switch is stored as 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DewWeights {
    pub bag_weight: f64,
    pub instance_weight: f64,
    pub combined: f64,
}
