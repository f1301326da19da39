use serde::{Deserialize, Serialize};

use super::metrics::average_precision;
use crate::endmodel::EndModel;
use crate::error::{Error, Result};
use crate::influence::InfluenceTensor;
use crate::labelmodel::LabelGrid;
use crate::wsdata::{FeatureMatrix, GoldLabels, LabelMatrix};

/// Per-(i, j) scores; abstaining cells hold `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGrid {
    n: usize,
    m: usize,
    values: Vec<Option<f64>>,
}

impl ScoreGrid {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.values[i * self.m + j]
    }

    fn from_fn(votes: &LabelMatrix, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let (n, m) = (votes.n(), votes.m());
        let mut values = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                values.push(votes.class_of(i, j).map(|c| f(i, j, c)));
            }
        }
        Self { n, m, values }
    }
}

/// `1 − probs[i][L_ij]` for every non-abstain vote.
pub fn discrepancy_scores(votes: &LabelMatrix, probs: &LabelGrid) -> Result<ScoreGrid> {
    if probs.n() != votes.n() || probs.num_classes() != votes.num_classes() {
        return Err(Error::shape("probabilities do not match the label matrix"));
    }
    Ok(ScoreGrid::from_fn(votes, |i, _, c| 1.0 - probs.row(i)[c]))
}

/// End-model class probabilities for every row of `x`.
pub fn end_model_probs(model: &EndModel, x: &FeatureMatrix) -> Result<LabelGrid> {
    let mut values = Vec::with_capacity(x.n() * model.num_classes());
    for i in 0..x.n() {
        values.extend(model.predict_proba(x.row(i))?);
    }
    LabelGrid::new(x.n(), model.num_classes(), values)
}

/// Class frequencies among the `k` Euclidean-nearest validation points.
pub fn knn_probs(train_x: &FeatureMatrix, valid_x: &FeatureMatrix, valid_gold: &GoldLabels, k: usize) -> Result<LabelGrid> {
    if k == 0 || k > valid_x.n() {
        return Err(Error::domain(format!("K = {k} must lie in 1..={}", valid_x.n())));
    }
    if valid_x.n() != valid_gold.len() || train_x.dim() != valid_x.dim() {
        return Err(Error::shape("validation split does not match the training features"));
    }
    let c = valid_gold.num_classes();
    let mut values = Vec::with_capacity(train_x.n() * c);
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(valid_x.n());
    for i in 0..train_x.n() {
        dist.clear();
        let xi = train_x.row(i);
        for v in 0..valid_x.n() {
            let d: f64 = xi.iter().zip(valid_x.row(v)).map(|(a, b)| (a - b) * (a - b)).sum();
            dist.push((d, v));
        }
        dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut p = vec![0.0; c];
        for &(_, v) in &dist[..k] {
            p[valid_gold.get(v)] += 1.0 / k as f64;
        }
        values.extend(p);
    }
    LabelGrid::new(train_x.n(), c, values)
}

pub fn knn_discrepancy_scores(
    votes: &LabelMatrix,
    train_x: &FeatureMatrix,
    valid_x: &FeatureMatrix,
    valid_gold: &GoldLabels,
    k: usize,
) -> Result<ScoreGrid> {
    discrepancy_scores(votes, &knn_probs(train_x, valid_x, valid_gold, k)?)
}

/// Vote-level influence `Σ_c φ_ijc` as a mislabel detector.
pub fn mislabel_scores(t: &InfluenceTensor, votes: &LabelMatrix) -> Result<ScoreGrid> {
    let (n, m, c) = t.shape();
    if votes.n() != n || votes.m() != m || votes.num_classes() != c {
        return Err(Error::shape("label matrix does not match the tensor"));
    }
    Ok(ScoreGrid::from_fn(votes, |i, j, _| t.slice(i, j).iter().sum()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MislabelReport {
    pub method: String,
    /// AP per LF; `None` for LFs without a single wrong vote.
    pub per_lf_ap: Vec<Option<f64>>,
    /// Mean of the defined per-LF APs.
    pub macro_ap: Option<f64>,
    pub skipped_lfs: usize,
    /// AP over all votes pooled together.
    pub pooled_ap: Option<f64>,
}

/// Evaluates a detector against gold labels: a vote is positive when it disagrees with gold.
pub fn mislabel_report(method: &str, scores: &ScoreGrid, votes: &LabelMatrix, gold: &GoldLabels) -> Result<MislabelReport> {
    if scores.n != votes.n() || scores.m != votes.m() || gold.len() != votes.n() {
        return Err(Error::shape("scores, votes and gold labels disagree in shape"));
    }
    let mut per_lf_ap = Vec::with_capacity(votes.m());
    let (mut all_s, mut all_t) = (Vec::new(), Vec::new());
    for j in 0..votes.m() {
        let (mut s, mut t) = (Vec::new(), Vec::new());
        for i in 0..votes.n() {
            if let (Some(c), Some(v)) = (votes.class_of(i, j), scores.get(i, j)) {
                if !v.is_finite() {
                    return Err(Error::numerical("mislabel scores must be finite"));
                }
                s.push(v);
                t.push(c != gold.get(i));
            }
        }
        per_lf_ap.push(average_precision(&s, &t)?);
        all_s.extend(s);
        all_t.extend(t);
    }
    let defined: Vec<f64> = per_lf_ap.iter().flatten().copied().collect();
    let macro_ap = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(MislabelReport {
        method: method.to_string(),
        skipped_lfs: per_lf_ap.len() - defined.len(),
        per_lf_ap,
        macro_ap,
        pooled_ap: average_precision(&all_s, &all_t)?,
    })
}
