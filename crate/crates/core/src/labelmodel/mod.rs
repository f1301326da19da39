//! Label models expressed in the unified weight-tensor form.
//!
//! A label model is an `M × (C+1) × C` tensor `W` plus an aggregation kind.
//! The probabilistic label of point `i` is
//!
//! ```text
//! ŷ_c ∝ σ( Σ_j W[j, L_ij, c] + prior_c )
//! ```
//!
//! where `σ` is the identity (vote-counting models) or `exp` (softmax-form
//! models such as Dawid–Skene). For exponential tensors `prior_c = ln p_c`;
//! for identity tensors the prior is an always-present pseudo-LF whose raw
//! nonnegative weights are added to the sums.

mod approx;
mod ds;
mod mv;

pub use approx::{approximate_identity, ApproxConfig, ApproxReport};
pub use ds::{
    dawid_skene_m_step, fit_dawid_skene, fit_metal, metal_moments, Confusion, EmConfig, EmReport,
    SMOOTHING,
};
pub use mv::fit_majority_vote;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::wsdata::LabelMatrix;

/// Aggregation function applied to the per-class parameter sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sigma {
    Identity,
    Exponential,
}

/// Label-model parameters `W[j, k, c]`, `k = 0` being the abstain row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WTensorRepr", into = "WTensorRepr")]
pub struct WTensor {
    sigma: Sigma,
    m: usize,
    c: usize,
    weights: Vec<f64>,
    class_prior: Option<Vec<f64>>,
}

impl WTensor {
    pub fn new(
        sigma: Sigma,
        m: usize,
        c: usize,
        weights: Vec<f64>,
        class_prior: Option<Vec<f64>>,
    ) -> Result<Self> {
        if m == 0 || c < 2 {
            return Err(Error::shape(format!("invalid tensor shape M={m}, C={c}")));
        }
        if weights.len() != m * (c + 1) * c {
            return Err(Error::shape(format!(
                "weight buffer has {} entries, expected {}",
                weights.len(),
                m * (c + 1) * c
            )));
        }
        if let Some(p) = &class_prior {
            if p.len() != c {
                return Err(Error::shape(format!("class prior has {} entries, expected {c}", p.len())));
            }
        }
        let all = weights.iter().chain(class_prior.iter().flatten());
        match sigma {
            Sigma::Identity => {
                if let Some(v) = all.clone().find(|v| !(v.is_finite() && **v >= 0.0)) {
                    return Err(Error::domain(format!("identity tensor entry {v} is not a finite nonnegative number")));
                }
            }
            Sigma::Exponential => {
                if all.clone().any(|v| !v.is_finite()) {
                    return Err(Error::domain("exponential tensor entries must be finite"));
                }
                if let Some(p) = &class_prior {
                    if p.iter().any(|&v| v <= 0.0) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                        return Err(Error::domain("class prior must be a positive simplex vector"));
                    }
                }
            }
        }
        Ok(Self { sigma, m, c, weights, class_prior })
    }

    pub fn sigma(&self) -> Sigma {
        self.sigma
    }

    pub fn num_lfs(&self) -> usize {
        self.m
    }

    pub fn num_classes(&self) -> usize {
        self.c
    }

    #[inline]
    fn idx(&self, j: usize, k: usize, c: usize) -> usize {
        (j * (self.c + 1) + k) * self.c + c
    }

    /// `W[j, k, c]` with `k` on the vote axis (0 = abstain).
    #[inline]
    pub fn get(&self, j: usize, k: usize, c: usize) -> f64 {
        self.weights[self.idx(j, k, c)]
    }

    /// The C-long slab `W[j, k, ·]`.
    #[inline]
    pub fn slab(&self, j: usize, k: usize) -> &[f64] {
        let s = self.idx(j, k, 0);
        &self.weights[s..s + self.c]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn class_prior(&self) -> Option<&[f64]> {
        self.class_prior.as_deref()
    }

    /// Additive per-class offset contributed by the prior.
    pub fn prior_term(&self, c: usize) -> f64 {
        match (&self.class_prior, self.sigma) {
            (None, _) => 0.0,
            (Some(p), Sigma::Identity) => p[c],
            (Some(p), Sigma::Exponential) => p[c].ln(),
        }
    }

    /// Multiplies every entry (prior included) by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let weights = self.weights.iter().map(|w| w * factor).collect();
        let prior = self.class_prior.as_ref().map(|p| p.iter().map(|w| w * factor).collect());
        Self::new(self.sigma, self.m, self.c, weights, prior)
    }

    /// Zeroes every parameter of the listed LFs, removing them from aggregation.
    pub fn without_lfs(&self, lfs: &[usize]) -> Self {
        let mut out = self.clone();
        let width = (self.c + 1) * self.c;
        for &j in lfs {
            out.weights[j * width..(j + 1) * width].fill(0.0);
        }
        out
    }

    pub fn permute_lfs(&self, perm: &[usize]) -> Self {
        let width = (self.c + 1) * self.c;
        let weights = perm
            .iter()
            .flat_map(|&j| self.weights[j * width..(j + 1) * width].iter().copied())
            .collect();
        Self { weights, ..self.clone() }
    }

    pub(crate) fn check_votes(&self, votes: &LabelMatrix) -> Result<()> {
        if votes.m() != self.m || votes.num_classes() != self.c {
            return Err(Error::shape(format!(
                "label model expects M={}, C={} but votes have M={}, C={}",
                self.m,
                self.c,
                votes.m(),
                votes.num_classes()
            )));
        }
        Ok(())
    }

    /// Pre-σ per-class sums for point `i`. `mask` drops the single occurrence
    /// `W[j', L_ij', c']` from the class-`c'` sum.
    pub fn class_sums(&self, votes: &LabelMatrix, i: usize, mask: Option<(usize, usize)>) -> Vec<f64> {
        let mut s: Vec<f64> = (0..self.c).map(|c| self.prior_term(c)).collect();
        for j in 0..self.m {
            let slab = self.slab(j, votes.vote_row(i, j));
            for (c, w) in slab.iter().enumerate() {
                if mask != Some((j, c)) {
                    s[c] += w;
                }
            }
        }
        s
    }

    /// Turns pre-σ sums into a simplex vector; `None` when the identity-σ
    /// denominator vanishes.
    pub fn normalize_sums(&self, sums: &[f64]) -> Option<Vec<f64>> {
        match self.sigma {
            Sigma::Identity => {
                let den: f64 = sums.iter().sum();
                (den > 0.0).then(|| sums.iter().map(|s| s / den).collect())
            }
            Sigma::Exponential => {
                let mx = sums.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = sums.iter().map(|s| (s - mx).exp()).collect();
                let den: f64 = e.iter().sum();
                Some(renormalize(e.into_iter().map(|v| v / den).collect()))
            }
        }
    }
}

fn renormalize(mut v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    if s > 0.0 && s != 1.0 {
        v.iter_mut().for_each(|x| *x /= s);
    }
    v
}

#[derive(Serialize, Deserialize)]
struct WTensorRepr {
    sigma: Sigma,
    #[serde(rename = "M")]
    m: usize,
    #[serde(rename = "C")]
    c: usize,
    class_prior: Option<Vec<f64>>,
    weights: Vec<Vec<Vec<f64>>>,
}

impl From<WTensor> for WTensorRepr {
    fn from(w: WTensor) -> Self {
        let weights = (0..w.m)
            .map(|j| (0..=w.c).map(|k| w.slab(j, k).to_vec()).collect())
            .collect();
        Self { sigma: w.sigma, m: w.m, c: w.c, class_prior: w.class_prior, weights }
    }
}

impl TryFrom<WTensorRepr> for WTensor {
    type Error = Error;

    fn try_from(r: WTensorRepr) -> Result<Self> {
        if r.weights.len() != r.m || r.weights.iter().any(|s| s.len() != r.c + 1 || s.iter().any(|row| row.len() != r.c)) {
            return Err(Error::shape("nested weights do not match M and C"));
        }
        let flat = r.weights.into_iter().flatten().flatten().collect();
        WTensor::new(r.sigma, r.m, r.c, flat, r.class_prior)
    }
}

/// N×C grid of per-class label weights. Rows of probabilistic labels sum to
/// one; perturbed training targets need not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelGrid {
    n: usize,
    c: usize,
    values: Vec<f64>,
}

impl LabelGrid {
    pub fn new(n: usize, c: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * c {
            return Err(Error::shape(format!("label grid has {} entries, expected {}", values.len(), n * c)));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("label weights must be finite"));
        }
        Ok(Self { n, c, values })
    }

    pub fn zeros(n: usize, c: usize) -> Self {
        Self { n, c, values: vec![0.0; n * c] }
    }

    /// One-hot rows from zero-based classes.
    pub fn one_hot(labels: &[usize], c: usize) -> Self {
        let mut g = Self::zeros(labels.len(), c);
        for (i, &y) in labels.iter().enumerate() {
            g.values[i * c + y] = 1.0;
        }
        g
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_classes(&self) -> usize {
        self.c
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.c..(i + 1) * self.c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.c..(i + 1) * self.c]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn scaled(&self, f: f64) -> Self {
        Self { values: self.values.iter().map(|v| v * f).collect(), ..self.clone() }
    }
}

/// Row-stochastic probabilistic labels plus the rows that fell back to uniform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbLabels {
    grid: LabelGrid,
    degenerate: Vec<usize>,
}

impl ProbLabels {
    pub fn new(grid: LabelGrid, degenerate: Vec<usize>) -> Result<Self> {
        for i in 0..grid.n() {
            let r = grid.row(i);
            if r.iter().any(|&v| v < 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::domain(format!("label row {i} is not a probability vector")));
            }
        }
        Ok(Self { grid, degenerate })
    }

    pub fn from_one_hot(labels: &[usize], c: usize) -> Self {
        Self { grid: LabelGrid::one_hot(labels, c), degenerate: Vec::new() }
    }

    pub fn n(&self) -> usize {
        self.grid.n()
    }

    pub fn num_classes(&self) -> usize {
        self.grid.num_classes()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.grid.row(i)
    }

    pub fn grid(&self) -> &LabelGrid {
        &self.grid
    }

    pub fn into_grid(self) -> LabelGrid {
        self.grid
    }

    /// Indices of rows with no usable evidence (uniform fallback).
    pub fn degenerate_rows(&self) -> &[usize] {
        &self.degenerate
    }

    pub fn argmax(&self, i: usize) -> usize {
        argmax(self.row(i))
    }
}

/// Index of the largest entry, ties to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = k;
        }
    }
    best
}

/// Probabilistic labels for every row of `votes`.
pub fn infer_labels(w: &WTensor, votes: &LabelMatrix) -> Result<ProbLabels> {
    w.check_votes(votes)?;
    let c = w.num_classes();
    let mut values = Vec::with_capacity(votes.n() * c);
    let mut degenerate = Vec::new();
    for i in 0..votes.n() {
        match w.normalize_sums(&w.class_sums(votes, i, None)) {
            Some(p) => values.extend(p),
            None => {
                degenerate.push(i);
                values.extend(std::iter::repeat_n(1.0 / c as f64, c));
            }
        }
    }
    ProbLabels::new(LabelGrid::new(votes.n(), c, values)?, degenerate)
}

/// Probabilistic label of point `i` with the single parameter occurrence
/// `W[j', L_ij', c']` removed from class `c'`, renormalized. Returns the
/// label and whether it fell back to uniform.
pub fn label_without(
    w: &WTensor,
    votes: &LabelMatrix,
    i: usize,
    j_masked: usize,
    c_masked: usize,
) -> Result<(Vec<f64>, bool)> {
    w.check_votes(votes)?;
    if i >= votes.n() || j_masked >= w.num_lfs() || c_masked >= w.num_classes() {
        return Err(Error::shape(format!("index ({i}, {j_masked}, {c_masked}) out of range")));
    }
    let sums = w.class_sums(votes, i, Some((j_masked, c_masked)));
    Ok(match w.normalize_sums(&sums) {
        Some(p) => (p, false),
        None => (vec![1.0 / w.num_classes() as f64; w.num_classes()], true),
    })
}

/// Per-term weights of the identity-σ loss decomposition for one point:
/// `W[j, L_ij, c] / Σ_k Σ_j' W[j', L_ij', k]`, plus the pseudo-LF prior terms.
#[derive(Debug, Clone, PartialEq)]
pub struct TermWeights {
    m: usize,
    c: usize,
    lf: Vec<f64>,
    prior: Vec<f64>,
}

impl TermWeights {
    #[inline]
    pub fn get(&self, j: usize, c: usize) -> f64 {
        self.lf[j * self.c + c]
    }

    /// Weights of LF `j` across classes.
    pub fn lf(&self, j: usize) -> &[f64] {
        &self.lf[j * self.c..(j + 1) * self.c]
    }

    /// Prior pseudo-LF weights (all zero without a prior).
    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn num_lfs(&self) -> usize {
        self.m
    }

    /// Per-class label weights, i.e. the probabilistic label when nothing is removed.
    pub fn class_totals(&self) -> Vec<f64> {
        let mut t = self.prior.clone();
        for j in 0..self.m {
            for (k, v) in self.lf(j).iter().enumerate() {
                t[k] += v;
            }
        }
        t
    }
}

/// Decomposition weights of point `i`; `None` when the identity denominator is
/// zero (the point has no usable evidence and contributes uniform labels).
pub fn term_weights(w: &WTensor, votes: &LabelMatrix, i: usize) -> Result<Option<TermWeights>> {
    if w.sigma() != Sigma::Identity {
        return Err(Error::domain(
            "the loss decomposition needs an identity label model; approximate the exponential one first",
        ));
    }
    w.check_votes(votes)?;
    let (m, c) = (w.num_lfs(), w.num_classes());
    let den: f64 = w.class_sums(votes, i, None).iter().sum();
    if den <= 0.0 {
        return Ok(None);
    }
    let mut lf = Vec::with_capacity(m * c);
    for j in 0..m {
        lf.extend(w.slab(j, votes.vote_row(i, j)).iter().map(|v| v / den));
    }
    let prior = (0..c).map(|k| w.prior_term(k) / den).collect();
    Ok(Some(TermWeights { m, c, lf, prior }))
}
