//! Dawid–Skene (EM over per-LF confusion matrices) and the moment-based
//! MeTaL estimator, both reparameterized as exponential tensors.

use serde::{Deserialize, Serialize};

use super::{infer_labels, ProbLabels, Sigma, WTensor};
use crate::error::{Error, Result};
use crate::wsdata::LabelMatrix;

/// Pseudo-count added to every probability estimate before taking logs.
pub const SMOOTHING: f64 = 1e-6;

/// Per-LF confusion matrices `π_j(y, l) = P(L_j = l | y)`, `l` on the vote axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    m: usize,
    c: usize,
    pi: Vec<f64>,
}

impl Confusion {
    pub fn get(&self, j: usize, y: usize, l: usize) -> f64 {
        self.pi[(j * self.c + y) * (self.c + 1) + l]
    }

    fn to_tensor(&self, prior: &[f64]) -> Result<WTensor> {
        let (m, c) = (self.m, self.c);
        let mut w = vec![0.0; m * (c + 1) * c];
        for j in 0..m {
            for k in 0..=c {
                for y in 0..c {
                    w[(j * (c + 1) + k) * c + y] = self.get(j, y, k).ln();
                }
            }
        }
        WTensor::new(Sigma::Exponential, m, c, w, Some(prior.to_vec()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Stop once no posterior entry moves by more than this.
    pub tol: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { max_iters: 100, tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmReport {
    pub iterations: usize,
    pub converged: bool,
    /// Marginal log-likelihood plus the log-density of the smoothing
    /// pseudo-counts, recorded after every M-step. EM never decreases it.
    pub objective_trace: Vec<f64>,
    /// All posterior mass ended up on a single class.
    pub degenerate_posterior: bool,
    pub degenerate_rows: Vec<usize>,
}

fn check_rows(votes: &LabelMatrix, posteriors: &ProbLabels) -> Result<()> {
    if posteriors.n() != votes.n() || posteriors.num_classes() != votes.num_classes() {
        return Err(Error::shape(format!(
            "posteriors are {}x{} but votes are {}x{} with C={}",
            posteriors.n(),
            posteriors.num_classes(),
            votes.n(),
            votes.m(),
            votes.num_classes()
        )));
    }
    Ok(())
}

/// Soft-count M-step: confusion rows and class prior from fixed posteriors.
pub fn dawid_skene_m_step(votes: &LabelMatrix, posteriors: &ProbLabels) -> Result<(Confusion, Vec<f64>)> {
    check_rows(votes, posteriors)?;
    let (n, m, c) = (votes.n(), votes.m(), votes.num_classes());
    let mut counts = vec![0.0; m * c * (c + 1)];
    let mut mass = vec![0.0; c];
    for i in 0..n {
        let t = posteriors.row(i);
        for (y, &ty) in t.iter().enumerate() {
            mass[y] += ty;
        }
        for j in 0..m {
            let l = votes.vote_row(i, j);
            for (y, &ty) in t.iter().enumerate() {
                counts[(j * c + y) * (c + 1) + l] += ty;
            }
        }
    }
    let mut pi = counts;
    for j in 0..m {
        for y in 0..c {
            let den = mass[y] + (c + 1) as f64 * SMOOTHING;
            for l in 0..=c {
                let e = &mut pi[(j * c + y) * (c + 1) + l];
                *e = (*e + SMOOTHING) / den;
            }
        }
    }
    let prior = mass.iter().map(|&s| (s + SMOOTHING) / (n as f64 + c as f64 * SMOOTHING)).collect();
    Ok((Confusion { m, c, pi }, prior))
}

fn objective(conf: &Confusion, prior: &[f64], votes: &LabelMatrix) -> f64 {
    let c = conf.c;
    let mut total = 0.0;
    for i in 0..votes.n() {
        let z: Vec<f64> = (0..c)
            .map(|y| prior[y].ln() + (0..conf.m).map(|j| conf.get(j, y, votes.vote_row(i, j)).ln()).sum::<f64>())
            .collect();
        let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        total += mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    }
    let log_prior: f64 = conf.pi.iter().map(|p| p.ln()).sum::<f64>() + prior.iter().map(|p| p.ln()).sum::<f64>();
    total + SMOOTHING * log_prior
}

fn majority_posteriors(votes: &LabelMatrix) -> Result<ProbLabels> {
    infer_labels(&super::fit_majority_vote(votes)?, votes)
}

/// Dawid–Skene EM started from majority-vote posteriors. Returns the
/// exponential tensor `W[j, k, c] = ln π_j(c, k)` with `class_prior = p`.
pub fn fit_dawid_skene(votes: &LabelMatrix, cfg: &EmConfig) -> Result<(WTensor, EmReport)> {
    if cfg.max_iters == 0 || !(cfg.tol > 0.0) {
        return Err(Error::domain("EM needs max_iters >= 1 and tol > 0"));
    }
    let mut post = majority_posteriors(votes)?;
    let mut report = EmReport {
        iterations: 0,
        converged: false,
        objective_trace: Vec::new(),
        degenerate_posterior: false,
        degenerate_rows: Vec::new(),
    };
    let mut tensor;
    loop {
        let (conf, prior) = dawid_skene_m_step(votes, &post)?;
        report.objective_trace.push(objective(&conf, &prior, votes));
        tensor = conf.to_tensor(&prior)?;
        let next = infer_labels(&tensor, votes)?;
        report.iterations += 1;
        let delta = next
            .grid()
            .as_slice()
            .iter()
            .zip(post.grid().as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        post = next;
        if delta < cfg.tol {
            report.converged = true;
            break;
        }
        if report.iterations >= cfg.max_iters {
            break;
        }
    }
    let n = votes.n() as f64;
    report.degenerate_posterior = (0..votes.num_classes())
        .any(|y| (0..votes.n()).map(|i| post.row(i)[y]).sum::<f64>() / n > 1.0 - 1e-6);
    report.degenerate_rows = post.degenerate_rows().to_vec();
    if report.degenerate_posterior {
        log::warn!("Dawid-Skene posterior collapsed onto a single class");
    }
    Ok((tensor, report))
}

/// Moment estimates `μ[j][c][k] = (1/N) Σ_i post_ic 1{L_ij = k}` and
/// `p_c = (1/N) Σ_i post_ic`, each with [`SMOOTHING`] added. `μ` is laid out
/// `(j * C + c) * (C + 1) + k`.
pub fn metal_moments(votes: &LabelMatrix, posteriors: &ProbLabels) -> Result<(Vec<f64>, Vec<f64>)> {
    check_rows(votes, posteriors)?;
    let (n, m, c) = (votes.n(), votes.m(), votes.num_classes());
    let mut mu = vec![0.0; m * c * (c + 1)];
    let mut p = vec![0.0; c];
    for i in 0..n {
        let t = posteriors.row(i);
        for y in 0..c {
            p[y] += t[y];
        }
        for j in 0..m {
            let k = votes.vote_row(i, j);
            for y in 0..c {
                mu[(j * c + y) * (c + 1) + k] += t[y];
            }
        }
    }
    let nf = n as f64;
    mu.iter_mut().for_each(|v| *v = (*v + SMOOTHING) / nf);
    let total: f64 = p.iter().map(|v| v + SMOOTHING).sum();
    p.iter_mut().for_each(|v| *v = (*v + SMOOTHING) / total);
    Ok((mu, p))
}

/// MeTaL reparameterization `W[j, k, c] = ln(μ[j][c][k] / p_c)`.
pub fn fit_metal(votes: &LabelMatrix, posteriors: &ProbLabels) -> Result<WTensor> {
    let (mu, p) = metal_moments(votes, posteriors)?;
    let (m, c) = (votes.m(), votes.num_classes());
    let mut w = vec![0.0; m * (c + 1) * c];
    for j in 0..m {
        for k in 0..=c {
            for y in 0..c {
                w[(j * (c + 1) + k) * c + y] = (mu[(j * c + y) * (c + 1) + k] / p[y]).ln();
            }
        }
    }
    WTensor::new(Sigma::Exponential, m, c, w, Some(p))
}
