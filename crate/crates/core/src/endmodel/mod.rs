//! Multinomial logistic-regression end model trained with the noise-aware
//! (expected cross-entropy) loss.
//!
//! Parameters are a `C × (d+1)` grid, the last column being the bias, and
//! are flattened row-major: coordinate `c * (d+1) + k`. Label weights are
//! arbitrary finite vectors, not only probability vectors; with `s = Σ_c y_c`
//! the per-point loss `−Σ_c y_c log f(x)_c` has gradient `(s·f(x) − y) ⊗ [x; 1]`
//! and Hessian `s·(diag f − f fᵀ) ⊗ [x; 1][x; 1]ᵀ`.

mod hessian;
mod train;

pub use hessian::{hessian, hessian_with_limit, HessianOperator, DENSE_LIMIT};
pub(crate) use hessian::add_point_hvp;

pub use train::{objective, objective_gradient, train_end_model, train_from, TrainConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelmodel::{term_weights, WTensor};
use crate::wsdata::{FeatureMatrix, GoldLabels, LabelMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epochs_run: usize,
    pub newton_steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub final_grad_norm: f64,
    pub grad_tol: f64,
    pub converged: bool,
    /// Largest epoch-to-epoch objective increase seen during gradient descent
    /// (zero or negative when the descent phase was monotone).
    pub max_objective_increase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EndModelRepr", into = "EndModelRepr")]
pub struct EndModel {
    c: usize,
    d: usize,
    theta: Vec<f64>,
    l2: f64,
    meta: TrainMeta,
}

impl EndModel {
    /// Builds a model from flattened row-major parameters.
    pub fn from_theta(c: usize, d: usize, theta: Vec<f64>, l2: f64, meta: TrainMeta) -> Result<Self> {
        if theta.len() != c * (d + 1) {
            return Err(Error::shape(format!("theta has {} entries, expected {}", theta.len(), c * (d + 1))));
        }
        if !(l2 >= 0.0) {
            return Err(Error::domain("l2 must be nonnegative"));
        }
        Ok(Self { c, d, theta, l2, meta })
    }

    /// The all-zero model.
    pub fn zeros(c: usize, d: usize, l2: f64) -> Self {
        let meta = TrainMeta {
            epochs_run: 0,
            newton_steps: 0,
            lr: 0.0,
            seed: 0,
            initial_objective: 0.0,
            final_objective: 0.0,
            final_grad_norm: 0.0,
            grad_tol: 0.0,
            converged: false,
            max_objective_increase: 0.0,
        };
        Self { c, d, theta: vec![0.0; c * (d + 1)], l2, meta }
    }

    pub fn num_classes(&self) -> usize {
        self.c
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Number of parameters `C · (d+1)`.
    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn l2(&self) -> f64 {
        self.l2
    }

    pub fn meta(&self) -> &TrainMeta {
        &self.meta
    }

    /// Whether flattened coordinate `p` is a bias (unpenalized) coordinate.
    #[inline]
    pub fn is_bias(&self, p: usize) -> bool {
        p % (self.d + 1) == self.d
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d {
            return Err(Error::shape(format!("feature vector has length {}, model expects {}", x.len(), self.d)));
        }
        Ok(())
    }

    pub(crate) fn logits(&self, x: &[f64]) -> Vec<f64> {
        let w = self.d + 1;
        (0..self.c)
            .map(|c| {
                let row = &self.theta[c * w..(c + 1) * w];
                row[..self.d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + row[self.d]
            })
            .collect()
    }

    pub(crate) fn proba(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.logits(x))
    }

    /// Softmax class probabilities `f(x)`.
    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok(self.proba(x))
    }

    /// Arg-max class, ties to the lowest index.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(crate::labelmodel::argmax(&self.predict_proba(x)?))
    }
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// `−Σ_c y_c log f(x)_c` without the ridge term.
pub fn noise_aware_loss(model: &EndModel, x: &[f64], ylabel: &[f64]) -> Result<f64> {
    model.check_dim(x)?;
    Ok(loss_unchecked(model, x, ylabel))
}

pub(crate) fn loss_unchecked(model: &EndModel, x: &[f64], ylabel: &[f64]) -> f64 {
    let lp = log_softmax(&model.logits(x));
    -ylabel.iter().zip(&lp).filter(|(y, _)| **y != 0.0).map(|(y, l)| y * l).sum::<f64>()
}

/// Gradient of [`noise_aware_loss`] with respect to the flattened parameters.
pub fn loss_gradient(model: &EndModel, x: &[f64], ylabel: &[f64]) -> Result<Vec<f64>> {
    model.check_dim(x)?;
    let mut g = vec![0.0; model.num_params()];
    add_loss_gradient(model, x, ylabel, 1.0, &mut g);
    Ok(g)
}

/// Logit-space gradient `s·f(x) − y` given precomputed probabilities.
#[inline]
pub(crate) fn logit_gradient(p: &[f64], ylabel: &[f64]) -> Vec<f64> {
    let s: f64 = ylabel.iter().sum();
    p.iter().zip(ylabel).map(|(p, y)| s * p - y).collect()
}

/// `out += scale · (logit gradient) ⊗ [x; 1]`.
pub(crate) fn add_outer(model: &EndModel, x: &[f64], dz: &[f64], scale: f64, out: &mut [f64]) {
    let w = model.d + 1;
    for (c, &g) in dz.iter().enumerate() {
        let g = g * scale;
        if g == 0.0 {
            continue;
        }
        let row = &mut out[c * w..(c + 1) * w];
        for (o, xv) in row[..model.d].iter_mut().zip(x) {
            *o += g * xv;
        }
        row[model.d] += g;
    }
}

pub(crate) fn add_loss_gradient(model: &EndModel, x: &[f64], ylabel: &[f64], scale: f64, out: &mut [f64]) {
    let dz = logit_gradient(&model.proba(x), ylabel);
    add_outer(model, x, &dz, scale, out);
}

/// One decomposed loss term `−(W[j, L_ij, c] / den_i) · log f(x_i)_c`.
/// Points whose identity denominator vanishes contribute nothing.
pub fn per_term_loss(
    model: &EndModel,
    w: &WTensor,
    votes: &LabelMatrix,
    x: &FeatureMatrix,
    i: usize,
    j: usize,
    c: usize,
) -> Result<f64> {
    if x.n() != votes.n() {
        return Err(Error::shape("features and votes differ in row count"));
    }
    model.check_dim(x.row(i))?;
    let Some(tw) = term_weights(w, votes, i)? else {
        return Ok(0.0);
    };
    let weight = tw.get(j, c);
    if weight == 0.0 {
        return Ok(0.0);
    }
    Ok(-weight * log_softmax(&model.logits(x.row(i)))[c])
}

/// Mean one-hot cross-entropy over a gold-labeled split.
pub fn mean_log_loss(model: &EndModel, x: &FeatureMatrix, gold: &GoldLabels) -> Result<f64> {
    if x.n() != gold.len() || x.n() == 0 {
        return Err(Error::shape("features and gold labels differ in row count"));
    }
    model.check_dim(x.row(0))?;
    let total: f64 = (0..x.n()).map(|i| -log_softmax(&model.logits(x.row(i)))[gold.get(i)]).sum();
    Ok(total / x.n() as f64)
}

pub fn accuracy(model: &EndModel, x: &FeatureMatrix, gold: &GoldLabels) -> Result<f64> {
    if x.n() != gold.len() || x.n() == 0 {
        return Err(Error::shape("features and gold labels differ in row count"));
    }
    let mut hits = 0usize;
    for i in 0..x.n() {
        hits += usize::from(model.predict(x.row(i))? == gold.get(i));
    }
    Ok(hits as f64 / x.n() as f64)
}

#[derive(Serialize, Deserialize)]
struct EndModelRepr {
    theta: Vec<Vec<f64>>,
    l2: f64,
    metadata: TrainMeta,
}

impl From<EndModel> for EndModelRepr {
    fn from(m: EndModel) -> Self {
        let w = m.d + 1;
        Self { theta: m.theta.chunks(w).map(<[f64]>::to_vec).collect(), l2: m.l2, metadata: m.meta }
    }
}

impl TryFrom<EndModelRepr> for EndModel {
    type Error = Error;

    fn try_from(r: EndModelRepr) -> Result<Self> {
        let c = r.theta.len();
        let w = r.theta.first().map_or(0, Vec::len);
        if c < 2 || w < 2 || r.theta.iter().any(|row| row.len() != w) {
            return Err(Error::shape("theta must be a C x (d+1) grid with C >= 2 and d >= 1"));
        }
        EndModel::from_theta(c, w - 1, r.theta.concat(), r.l2, r.metadata)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labelmodel::{fit_majority_vote, infer_labels};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(c: usize, d: usize, theta: Vec<f64>) -> EndModel {
        let mut m = EndModel::zeros(c, d, 0.0);
        m.theta = theta;
        m
    }

    #[test]
    fn zero_theta_is_uniform() {
        let m = EndModel::zeros(4, 3, 0.0);
        assert_eq!(m.predict_proba(&[1.0, -2.0, 0.5]).unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn logit_arithmetic() {
        // bias-only logits (ln 3, 0)
        let m = model(2, 1, vec![0.0, 3f64.ln(), 0.0, 0.0]);
        let p = m.predict_proba(&[5.0]).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch() {
        let m = EndModel::zeros(2, 3, 0.0);
        assert!(matches!(m.predict_proba(&[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn loss_special_cases() {
        let m = model(3, 2, vec![0.3, -0.1, 0.2, 1.0, 0.5, -0.4, -0.7, 0.0, 0.1]);
        let x = [0.4, -1.2];
        let p = m.predict_proba(&x).unwrap();
        let ce = noise_aware_loss(&m, &x, &[0.0, 1.0, 0.0]).unwrap();
        assert!((ce + p[1].ln()).abs() < 1e-14);
        assert_eq!(noise_aware_loss(&m, &x, &[0.0; 3]).unwrap(), 0.0);
        let z = EndModel::zeros(3, 2, 0.0);
        let u = noise_aware_loss(&z, &x, &[1.0 / 3.0; 3]).unwrap();
        assert!((u - 3f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn gradient_vanishes_at_matched_softmax() {
        let m = model(3, 2, vec![0.3, -0.1, 0.2, 1.0, 0.5, -0.4, -0.7, 0.0, 0.1]);
        let x = [0.4, -1.2];
        let p = m.predict_proba(&x).unwrap();
        let g = loss_gradient(&m, &x, &p).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
        assert!(loss_gradient(&m, &x, &[0.0; 3]).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn term_loss_counting() {
        let votes = LabelMatrix::from_rows(&[vec![1, 2]], 2).unwrap();
        let w = fit_majority_vote(&votes).unwrap();
        let x = FeatureMatrix::from_rows(&[vec![0.7]]).unwrap();
        let m = model(2, 1, vec![0.2, -0.3, -0.5, 0.4]);
        let p = m.predict_proba(x.row(0)).unwrap();
        let t = per_term_loss(&m, &w, &votes, &x, 0, 0, 0).unwrap();
        assert!((t + 0.5 * p[0].ln()).abs() < 1e-15);
        assert_eq!(per_term_loss(&m, &w, &votes, &x, 0, 0, 1).unwrap(), 0.0);
    }

    #[test]
    fn abstaining_lf_has_zero_terms() {
        let votes = LabelMatrix::from_rows(&[vec![1, -1, 2]], 2).unwrap();
        let w = fit_majority_vote(&votes).unwrap();
        let x = FeatureMatrix::from_rows(&[vec![0.7, 0.1]]).unwrap();
        let m = model(2, 2, vec![0.2, -0.3, 0.1, -0.5, 0.4, 0.0]);
        for c in 0..2 {
            assert_eq!(per_term_loss(&m, &w, &votes, &x, 0, 1, c).unwrap(), 0.0);
        }
    }

    #[test]
    fn finite_difference_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (c, d) = (3, 4);
            let theta: Vec<f64> = (0..c * (d + 1)).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let y: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..1.0)).collect();
            let m = model(c, d, theta.clone());
            let g = loss_gradient(&m, &x, &y).unwrap();
            for p in 0..theta.len() {
                let h = 1e-5;
                let mut tp = theta.clone();
                tp[p] += h;
                let mut tm = theta.clone();
                tm[p] -= h;
                let fd = (noise_aware_loss(&model(c, d, tp), &x, &y).unwrap()
                    - noise_aware_loss(&model(c, d, tm), &x, &y).unwrap())
                    / (2.0 * h);
                assert!((fd - g[p]).abs() < 1e-6, "coord {p}: fd {fd} vs {}", g[p]);
            }
        }
    }

    #[test]
    fn json_round_trip() {
        let m = model(2, 1, vec![0.2, -0.3, -0.5, 0.4]);
        let v = serde_json::to_value(&m).unwrap();
        assert_eq!(v["theta"][1], serde_json::json!([-0.5, 0.4]));
        let back: EndModel = serde_json::from_value(v).unwrap();
        assert_eq!(back.theta(), m.theta());
    }

    proptest! {
        #[test]
        fn softmax_shift_invariance(
            theta in prop::collection::vec(-3.0f64..3.0, 8),
            x in prop::collection::vec(-3.0f64..3.0, 3),
            shift in prop::collection::vec(-5.0f64..5.0, 4),
        ) {
            let a = model(2, 3, theta.clone());
            let mut t2 = theta;
            for c in 0..2 {
                for k in 0..4 {
                    t2[c * 4 + k] += shift[k];
                }
            }
            let pa = a.predict_proba(&x).unwrap();
            let pb = model(2, 3, t2).predict_proba(&x).unwrap();
            for c in 0..2 {
                prop_assert!((pa[c] - pb[c]).abs() < 1e-12);
            }
        }

        #[test]
        fn decomposition_is_exact(
            rows in prop::collection::vec(prop::collection::vec(-1i32..=3, 4), 1..6),
            theta in prop::collection::vec(-2.0f64..2.0, 9),
        ) {
            let rows: Vec<Vec<i32>> = rows.into_iter().map(|r| r.into_iter().map(|v| if v == 0 { -1 } else { v }).collect()).collect();
            let votes = LabelMatrix::from_rows(&rows, 3).unwrap();
            let w = fit_majority_vote(&votes).unwrap();
            let y = infer_labels(&w, &votes).unwrap();
            let x = FeatureMatrix::new(votes.n(), 2, (0..votes.n() * 2).map(|v| (v as f64).sin()).collect()).unwrap();
            let m = model(3, 2, theta);
            for i in 0..votes.n() {
                if y.degenerate_rows().contains(&i) {
                    continue;
                }
                let mut total = 0.0;
                for j in 0..4 {
                    for c in 0..3 {
                        total += per_term_loss(&m, &w, &votes, &x, i, j, c).unwrap();
                    }
                }
                let full = noise_aware_loss(&m, x.row(i), y.row(i)).unwrap();
                prop_assert!((total - full).abs() < 1e-10);
            }
        }
    }
}
