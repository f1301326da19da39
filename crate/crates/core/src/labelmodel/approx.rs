//! Least-squares refit of an exponential label model as an identity one.
//!
//! Minimizes `Σ_i Σ_c (ŷ_ic − q_ic(W̄))²`, where `ŷ` are the labels of the
//! exponential model and `q(W̄)` the identity-σ labels of the candidate
//! tensor, by projected gradient descent with backtracking onto
//! `W̄ ≥ FLOOR`. A class prior, when present, is refitted as an extra
//! always-voting pseudo-LF.

use serde::{Deserialize, Serialize};

use super::{infer_labels, Sigma, WTensor};
use crate::error::{Error, Result};
use crate::wsdata::LabelMatrix;

const FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApproxConfig {
    pub iters: usize,
    /// Initial step size; adapted by backtracking.
    pub step: f64,
    /// Stop when the largest parameter move falls below this.
    pub tol: f64,
}

impl Default for ApproxConfig {
    fn default() -> Self {
        Self { iters: 5000, step: 1.0, tol: 1e-10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproxReport {
    pub iterations: usize,
    pub initial_objective: f64,
    pub final_objective: f64,
    /// Objective after every accepted step, starting with the initial value.
    pub objective_trace: Vec<f64>,
    /// Mean over rows of the L1 distance between original and refitted labels.
    pub mean_l1: f64,
}

struct Problem<'a> {
    votes: &'a LabelMatrix,
    target: Vec<f64>,
    m: usize,
    c: usize,
    has_prior: bool,
}

impl Problem<'_> {
    fn slab_offset(&self, j: usize, k: usize) -> usize {
        (j * (self.c + 1) + k) * self.c
    }

    fn prior_offset(&self) -> usize {
        self.m * (self.c + 1) * self.c
    }

    fn sums(&self, x: &[f64], i: usize) -> Vec<f64> {
        let c = self.c;
        let mut num = if self.has_prior { x[self.prior_offset()..].to_vec() } else { vec![0.0; c] };
        for j in 0..self.m {
            let o = self.slab_offset(j, self.votes.vote_row(i, j));
            for k in 0..c {
                num[k] += x[o + k];
            }
        }
        num
    }

    fn objective(&self, x: &[f64]) -> f64 {
        let c = self.c;
        (0..self.votes.n())
            .map(|i| {
                let num = self.sums(x, i);
                let den: f64 = num.iter().sum();
                let t = &self.target[i * c..(i + 1) * c];
                num.iter().zip(t).map(|(v, t)| (v / den - t).powi(2)).sum::<f64>()
            })
            .sum()
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let c = self.c;
        let mut g = vec![0.0; x.len()];
        for i in 0..self.votes.n() {
            let num = self.sums(x, i);
            let den: f64 = num.iter().sum();
            let q: Vec<f64> = num.iter().map(|v| v / den).collect();
            let t = &self.target[i * c..(i + 1) * c];
            let r: Vec<f64> = q.iter().zip(t).map(|(a, b)| a - b).collect();
            let rq: f64 = r.iter().zip(&q).map(|(a, b)| a * b).sum();
            let d: Vec<f64> = r.iter().map(|rk| 2.0 * (rk - rq) / den).collect();
            for j in 0..self.m {
                let o = self.slab_offset(j, self.votes.vote_row(i, j));
                for k in 0..c {
                    g[o + k] += d[k];
                }
            }
            if self.has_prior {
                let o = self.prior_offset();
                for k in 0..c {
                    g[o + k] += d[k];
                }
            }
        }
        g
    }
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn optimize(problem: &Problem<'_>, mut x: Vec<f64>, cfg: &ApproxConfig) -> (Vec<f64>, Vec<f64>, usize) {
    let mut f = problem.objective(&x);
    let mut trace = vec![f];
    let mut step = cfg.step;
    let mut iterations = 0;
    while iterations < cfg.iters && f > 1e-30 {
        iterations += 1;
        let g = problem.gradient(&x);
        let mut accepted = None;
        while step > 1e-30 {
            let cand: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| (xi - step * gi).max(FLOOR)).collect();
            let (mut lin, mut sq) = (0.0, 0.0);
            for ((a, b), gi) in cand.iter().zip(&x).zip(&g) {
                lin += gi * (a - b);
                sq += (a - b) * (a - b);
            }
            let fc = problem.objective(&cand);
            if fc <= f + lin + sq / (2.0 * step) {
                accepted = Some((cand, fc));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, fc)) = accepted else { break };
        let moved = cand.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        x = cand;
        f = fc;
        trace.push(f);
        step *= 2.0;
        if moved < cfg.tol {
            break;
        }
    }

    (x, trace, iterations)
}

/// Identity-σ tensor reproducing the labels of exponential tensor `w` on `votes`.
pub fn approximate_identity(
    w: &WTensor,
    votes: &LabelMatrix,
    cfg: &ApproxConfig,
) -> Result<(WTensor, ApproxReport)> {
    if w.sigma() != Sigma::Exponential {
        return Err(Error::domain("approximate_identity expects an exponential label model"));
    }
    if !(cfg.step > 0.0) || !(cfg.tol > 0.0) {
        return Err(Error::domain("approximation step and tolerance must be positive"));
    }
    w.check_votes(votes)?;
    let (m, c) = (w.num_lfs(), w.num_classes());
    let target = infer_labels(w, votes)?;
    let problem = Problem {
        votes,
        target: target.grid().as_slice().to_vec(),
        m,
        c,
        has_prior: w.class_prior().is_some(),
    };

    let mut x = Vec::with_capacity(m * (c + 1) * c + c);
    for j in 0..m {
        for k in 0..=c {
            x.extend(softmax(w.slab(j, k)).into_iter().map(|v| v.max(FLOOR)));
        }
    }
    if let Some(p) = w.class_prior() {
        x.extend(p.iter().map(|v| v.max(FLOOR)));
    }

    let (x, trace, iterations) = optimize(&problem, x, cfg);
    let f = *trace.last().expect("trace starts with the initial objective");
    let mut x = x;
    let prior = problem.has_prior.then(|| x[problem.prior_offset()..].to_vec());
    x.truncate(m * (c + 1) * c);
    let approx = WTensor::new(Sigma::Identity, m, c, x, prior)?;
    let refit = infer_labels(&approx, votes)?;
    let mean_l1 = (0..votes.n())
        .map(|i| refit.row(i).iter().zip(target.row(i)).map(|(a, b)| (a - b).abs()).sum::<f64>())
        .sum::<f64>()
        / votes.n() as f64;
    let report = ApproxReport {
        iterations,
        initial_objective: trace[0],
        final_objective: f,
        objective_trace: trace,
        mean_l1,
    };
    Ok((approx, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labelmodel::{fit_dawid_skene, fit_majority_vote, EmConfig};
    use crate::wsdata::{generate_synthetic, SyntheticSpec};

    #[test]
    fn rejects_identity_input() {
        let l = LabelMatrix::from_rows(&[vec![1, 2]], 2).unwrap();
        let w = fit_majority_vote(&l).unwrap();
        assert!(matches!(approximate_identity(&w, &l, &ApproxConfig::default()), Err(Error::Domain(_))));
    }

    #[test]
    fn symmetric_model_has_zero_objective() {
        let l = LabelMatrix::from_rows(&[vec![1, 2], vec![-1, 1], vec![2, 2]], 2).unwrap();
        // per-class sums equal for every vote pattern: each slab is constant
        let mut w = Vec::new();
        for j in 0..2 {
            for k in 0..3 {
                let v = 0.3 * j as f64 - 0.2 * k as f64;
                w.extend([v, v]);
            }
        }
        let w = WTensor::new(Sigma::Exponential, 2, 2, w, None).unwrap();
        let (a, rep) = approximate_identity(&w, &l, &ApproxConfig::default()).unwrap();
        assert_eq!(rep.final_objective, 0.0);
        let p = infer_labels(&a, &l).unwrap();
        assert!(p.grid().as_slice().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn single_lf_softmax_is_matched_exactly() {
        let l = LabelMatrix::from_rows(&[vec![1], vec![2], vec![-1]], 2).unwrap();
        let mut w = vec![0.0; 6];
        for k in 0..3 {
            w[k * 2] = 3f64.ln();
        }
        let w = WTensor::new(Sigma::Exponential, 1, 2, w, None).unwrap();
        let (a, rep) = approximate_identity(&w, &l, &ApproxConfig::default()).unwrap();
        assert!(rep.final_objective < 1e-28);
        for k in 0..3 {
            let s = a.slab(0, k);
            assert!((s[0] / (s[0] + s[1]) - 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn ds_refit_is_close_and_monotone() {
        let b = generate_synthetic(&SyntheticSpec {
            n_train: 200,
            n_valid: 5,
            n_test: 5,
            dim: 4,
            num_classes: 3,
            class_separation: 2.0,
            lf_accuracy: vec![0.95, 0.95, 0.95, 0.95, 0.95, 0.7, 0.7, 0.34],
            lf_coverage: vec![0.85; 8],
            seed: 11,
        })
        .unwrap();
        let (w, _) = fit_dawid_skene(&b.train.votes, &EmConfig::default()).unwrap();
        let (a, rep) = approximate_identity(&w, &b.train.votes, &ApproxConfig::default()).unwrap();
        assert_eq!(a.sigma(), Sigma::Identity);
        assert!(rep.final_objective <= rep.initial_objective);
        for t in rep.objective_trace.windows(2) {
            assert!(t[1] <= t[0]);
        }
        assert!(rep.mean_l1 < 0.05, "mean L1 {}", rep.mean_l1);
    }
}
