//! Weak-supervision data model: label matrices, feature matrices, gold labels
//! and the train/valid/test bundle, plus CSV ingestion and a synthetic corpus
//! generator.
//!
//! Votes are kept in their external encoding (`-1` for abstain, `1..=C` for
//! classes). Everything downstream addresses the vote axis of a label-model
//! tensor through [`LabelMatrix::vote_row`], which maps abstain to row 0 and
//! class `c` to row `c`.

mod io;
mod synth;

pub use io::{
    load_bundle, load_features, load_gold_labels, load_label_matrix, save_bundle, save_features,
    save_gold_labels, save_label_matrix, TEST_FEATURES, TEST_GOLD, TRAIN_FEATURES, TRAIN_GOLD,
    TRAIN_VOTES, VALID_FEATURES, VALID_GOLD,
};
pub use synth::{generate_synthetic, split, SyntheticSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// External encoding of an abstaining vote.
pub const ABSTAIN: i32 = -1;

/// N×M grid of labeling-function votes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMatrix {
    votes: Vec<i32>,
    n: usize,
    m: usize,
    num_classes: usize,
}

impl LabelMatrix {
    /// Builds a label matrix from a row-major vote buffer.
    pub fn new(n: usize, m: usize, num_classes: usize, votes: Vec<i32>) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::shape(format!("label matrix must be non-empty, got {n}x{m}")));
        }
        if num_classes < 2 {
            return Err(Error::domain(format!("need at least 2 classes, got {num_classes}")));
        }
        if votes.len() != n * m {
            return Err(Error::shape(format!(
                "vote buffer has {} entries, expected {}",
                votes.len(),
                n * m
            )));
        }
        for (idx, &v) in votes.iter().enumerate() {
            if v != ABSTAIN && !(1..=num_classes as i32).contains(&v) {
                return Err(Error::domain(format!(
                    "vote {v} at ({}, {}) outside {{-1}} ∪ [1, {num_classes}]",
                    idx / m,
                    idx % m
                )));
            }
        }
        Ok(Self { votes, n, m, num_classes })
    }

    pub fn from_rows(rows: &[Vec<i32>], num_classes: usize) -> Result<Self> {
        let m = rows.first().map_or(0, Vec::len);
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != m) {
            return Err(Error::shape(format!("row {i} has {} columns, expected {m}", r.len())));
        }
        Self::new(rows.len(), m, num_classes, rows.concat())
    }

    /// Number of data points.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of labeling functions.
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, i: usize, j: usize) -> i32 {
        self.votes[i * self.m + j]
    }

    pub fn row(&self, i: usize) -> &[i32] {
        &self.votes[i * self.m..(i + 1) * self.m]
    }

    /// Index into the (C+1)-long vote axis: 0 for abstain, `c` for class `c`.
    #[inline]
    pub fn vote_row(&self, i: usize, j: usize) -> usize {
        let v = self.get(i, j);
        if v == ABSTAIN {
            0
        } else {
            v as usize
        }
    }

    /// Zero-based class voted by LF `j` on point `i`, or `None` on abstain.
    #[inline]
    pub fn class_of(&self, i: usize, j: usize) -> Option<usize> {
        match self.get(i, j) {
            ABSTAIN => None,
            v => Some(v as usize - 1),
        }
    }

    pub fn as_slice(&self) -> &[i32] {
        &self.votes
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let votes = idx.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        Self { votes, n: idx.len(), m: self.m, num_classes: self.num_classes }
    }

    /// Copy with every vote of the listed LFs replaced by abstain.
    pub fn with_abstained(&self, lfs: &[usize]) -> Self {
        let mut out = self.clone();
        for i in 0..self.n {
            for &j in lfs {
                out.votes[i * self.m + j] = ABSTAIN;
            }
        }
        out
    }

    /// Copy with the LF columns reordered so that new column `k` is old column `perm[k]`.
    pub fn permute_lfs(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.m);
        let mut votes = Vec::with_capacity(self.votes.len());
        for i in 0..self.n {
            votes.extend(perm.iter().map(|&j| self.get(i, j)));
        }
        Self { votes, ..self.clone() }
    }
}

/// N×d grid of finite real features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    values: Vec<f64>,
    n: usize,
    d: usize,
}

impl FeatureMatrix {
    pub fn new(n: usize, d: usize, values: Vec<f64>) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::shape(format!("feature matrix must be non-empty, got {n}x{d}")));
        }
        if values.len() != n * d {
            return Err(Error::shape(format!(
                "feature buffer has {} entries, expected {}",
                values.len(),
                n * d
            )));
        }
        if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!(
                "non-finite feature at ({}, {})",
                idx / d,
                idx % d
            )));
        }
        Ok(Self { values, n, d })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != d) {
            return Err(Error::shape(format!("row {i} has {} columns, expected {d}", r.len())));
        }
        Self::new(rows.len(), d, rows.concat())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let values = idx.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        Self { values, n: idx.len(), d: self.d }
    }
}

/// Ground-truth classes, stored zero-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldLabels {
    labels: Vec<usize>,
    num_classes: usize,
}

impl GoldLabels {
    /// From zero-based class indices.
    pub fn new(labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::domain(format!("gold label {} outside [1, {num_classes}]", bad + 1)));
        }
        Ok(Self { labels, num_classes })
    }

    /// From the external one-based encoding.
    pub fn from_one_based(labels: &[i32], num_classes: usize) -> Result<Self> {
        let mut out = Vec::with_capacity(labels.len());
        for &y in labels {
            if !(1..=num_classes as i32).contains(&y) {
                return Err(Error::domain(format!("gold label {y} outside [1, {num_classes}]")));
            }
            out.push(y as usize - 1);
        }
        Ok(Self { labels: out, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.labels
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self { labels: idx.iter().map(|&i| self.labels[i]).collect(), num_classes: self.num_classes }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSplit {
    pub features: FeatureMatrix,
    pub votes: LabelMatrix,
    /// Evaluation only; never used for fitting.
    pub gold: Option<GoldLabels>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSplit {
    pub features: FeatureMatrix,
    pub gold: GoldLabels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub train: TrainSplit,
    pub valid: EvalSplit,
    pub test: EvalSplit,
    pub seed: u64,
}

impl DatasetBundle {
    /// Checks the cross-split invariants.
    pub fn new(train: TrainSplit, valid: EvalSplit, test: EvalSplit, seed: u64) -> Result<Self> {
        let d = train.features.dim();
        if valid.features.dim() != d || test.features.dim() != d {
            return Err(Error::shape("feature dimension differs across splits"));
        }
        if train.features.n() != train.votes.n() {
            return Err(Error::shape(format!(
                "train features have {} rows but label matrix has {}",
                train.features.n(),
                train.votes.n()
            )));
        }
        if let Some(g) = &train.gold {
            if g.len() != train.votes.n() {
                return Err(Error::shape("train gold labels do not match train rows"));
            }
        }
        for (name, s) in [("valid", &valid), ("test", &test)] {
            if s.gold.len() != s.features.n() {
                return Err(Error::shape(format!("{name} gold labels do not match {name} rows")));
            }
        }
        let c = train.votes.num_classes();
        if valid.gold.num_classes() != c || test.gold.num_classes() != c {
            return Err(Error::shape("class count differs across splits"));
        }
        Ok(Self { train, valid, test, seed })
    }

    pub fn num_classes(&self) -> usize {
        self.train.votes.num_classes()
    }

    pub fn dim(&self) -> usize {
        self.train.features.dim()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vote_row_mapping() {
        let l = LabelMatrix::from_rows(&[vec![1, -1, 2]], 2).unwrap();
        assert_eq!(l.vote_row(0, 0), 1);
        assert_eq!(l.vote_row(0, 1), 0);
        assert_eq!(l.vote_row(0, 2), 2);
        assert_eq!(l.class_of(0, 2), Some(1));
        assert_eq!(l.class_of(0, 1), None);
    }

    #[test]
    fn rejects_out_of_range_votes() {
        assert!(matches!(LabelMatrix::from_rows(&[vec![1, 3]], 2), Err(Error::Domain(_))));
        assert!(matches!(LabelMatrix::from_rows(&[vec![0]], 2), Err(Error::Domain(_))));
        assert!(matches!(LabelMatrix::from_rows(&[vec![1]], 1), Err(Error::Domain(_))));
    }

    #[test]
    fn ragged_and_empty_are_shape_errors() {
        assert!(matches!(
            LabelMatrix::from_rows(&[vec![1, 2], vec![1]], 2),
            Err(Error::Shape(_))
        ));
        assert!(matches!(LabelMatrix::from_rows(&[], 2), Err(Error::Shape(_))));
        assert!(matches!(FeatureMatrix::from_rows(&[]), Err(Error::Shape(_))));
    }

    #[test]
    fn abstaining_and_permuting_columns() {
        let l = LabelMatrix::from_rows(&[vec![1, 2, 2], vec![2, -1, 1]], 2).unwrap();
        let a = l.with_abstained(&[0, 2]);
        assert_eq!(a.row(0), &[-1, 2, -1]);
        assert_eq!(a.row(1), &[-1, -1, -1]);
        let p = l.permute_lfs(&[2, 0, 1]);
        assert_eq!(p.row(1), &[1, 2, -1]);
    }

    #[test]
    fn features_reject_non_finite() {
        assert!(matches!(
            FeatureMatrix::from_rows(&[vec![1.0, f64::NAN]]),
            Err(Error::Domain(_))
        ));
    }
}
