use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::endmodel::{add_point_hvp, EndModel, HessianOperator};
use crate::error::{Error, Result};
use crate::labelmodel::LabelGrid;
use crate::wsdata::FeatureMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Exact,
    Lissa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LissaConfig {
    pub batch: usize,
    pub depth: usize,
    pub repeats: usize,
    /// Divisor that brings the damped Hessian's spectral norm below one.
    pub scale: f64,
    pub seed: u64,
}

impl Default for LissaConfig {
    fn default() -> Self {
        Self { batch: 16, depth: 5000, repeats: 10, scale: 10.0 * (1.0 + 1e-3), seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IhvpSolverConfig {
    pub kind: SolverKind,
    pub damping: f64,
    pub lissa: LissaConfig,
}

impl Default for IhvpSolverConfig {
    fn default() -> Self {
        Self { kind: SolverKind::Exact, damping: 1e-3, lissa: LissaConfig::default() }
    }
}

impl IhvpSolverConfig {
    pub fn exact(damping: f64) -> Self {
        Self { kind: SolverKind::Exact, damping, lissa: LissaConfig { scale: 10.0 * (1.0 + damping), ..Default::default() } }
    }

    pub fn lissa(damping: f64, lissa: LissaConfig) -> Self {
        Self { kind: SolverKind::Lissa, damping, lissa }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping.is_finite()) {
            return Err(Error::domain("damping must be positive"));
        }
        let l = &self.lissa;
        if l.batch == 0 || l.depth == 0 || l.repeats == 0 || !(l.scale >= 1.0) {
            return Err(Error::domain("LiSSA needs batch, depth, repeats >= 1 and scale >= 1"));
        }
        Ok(())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Solves `H u = v` by Cholesky and checks the residual.
pub fn ihvp_exact(h: &HessianOperator, v: &[f64]) -> Result<Vec<f64>> {
    let u = h.solve(v).map_err(|_| {
        let eig = h.matrix().clone().symmetric_eigenvalues();
        Error::numerical(format!(
            "Cholesky factorization failed (eigenvalue range [{:.3e}, {:.3e}])",
            eig.min(),
            eig.max()
        ))
    })?;
    let resid: Vec<f64> = h.apply(&u).iter().zip(v).map(|(a, b)| a - b).collect();
    let (r, nv) = (norm(&resid), norm(v));
    if r > 1e-8 * nv.max(f64::MIN_POSITIVE) && nv > 0.0 {
        return Err(Error::numerical(format!("iHVP residual {r:.3e} exceeds tolerance for |v| = {nv:.3e}")));
    }
    Ok(u)
}

/// Stochastic inverse-HVP: `u_k = v + (I − H_B / scale) u_{k−1}`, returning
/// `u_J / scale` averaged over repeats. `H_B` is the damped objective Hessian
/// estimated on a uniformly sampled batch of training points; a batch of at
/// least `N` uses every point.
pub fn ihvp_lissa(
    model: &EndModel,
    x: &FeatureMatrix,
    y: &LabelGrid,
    v: &[f64],
    cfg: &IhvpSolverConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let p = model.num_params();
    if v.len() != p {
        return Err(Error::shape(format!("vector has length {}, model has {p} parameters", v.len())));
    }
    if x.n() != y.n() || x.n() == 0 {
        return Err(Error::shape("features and labels differ in row count"));
    }
    let l = &cfg.lissa;
    let n = x.n();
    let sums: Vec<f64> = (0..n).map(|i| y.row(i).iter().sum()).collect();
    let runs: Vec<Result<Vec<f64>>> = (0..l.repeats)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(l.seed);
            rng.set_stream(r as u64);
            let mut u = v.to_vec();
            let mut hu = vec![0.0; p];
            for step in 0..l.depth {
                hu.iter_mut().for_each(|h| *h = 0.0);
                if l.batch >= n {
                    for i in 0..n {
                        add_point_hvp(model, x.row(i), sums[i], &u, 1.0 / n as f64, &mut hu);
                    }
                } else {
                    for _ in 0..l.batch {
                        let i = rng.random_range(0..n);
                        add_point_hvp(model, x.row(i), sums[i], &u, 1.0 / l.batch as f64, &mut hu);
                    }
                }
                for k in 0..p {
                    let ridge = cfg.damping + if model.is_bias(k) { 0.0 } else { model.l2() };
                    hu[k] += ridge * u[k];
                }
                for k in 0..p {
                    u[k] = v[k] + u[k] - hu[k] / l.scale;
                }
                let un = norm(&u);
                if !(un <= 1e8) {
                    return Err(Error::numerical(format!(
                        "LiSSA diverged at step {step} of repeat {r} (iterate norm {un:.3e}); increase the scale"
                    )));
                }
            }
            Ok(u)
        })
        .collect();
    let mut out = vec![0.0; p];
    for run in runs {
        for (o, u) in out.iter_mut().zip(run?) {
            *o += u;
        }
    }
    let denom = l.repeats as f64 * l.scale;
    out.iter_mut().for_each(|o| *o /= denom);
    Ok(out)
}

/// Power-iteration estimate of the damped Hessian's largest eigenvalue using
/// full-batch products. Useful for choosing a LiSSA scale.
pub fn spectral_norm_estimate(model: &EndModel, x: &FeatureMatrix, y: &LabelGrid, damping: f64, iters: usize) -> f64 {
    let p = model.num_params();
    let mut v: Vec<f64> = (0..p).map(|k| 1.0 + (k as f64 * 0.37).sin()).collect();
    let mut lambda = 0.0;
    for _ in 0..iters.max(1) {
        let nv = norm(&v);
        v.iter_mut().for_each(|a| *a /= nv);
        let mut hv = vec![0.0; p];
        for i in 0..x.n() {
            add_point_hvp(model, x.row(i), y.row(i).iter().sum(), &v, 1.0 / x.n() as f64, &mut hv);
        }
        for k in 0..p {
            hv[k] += (damping + if model.is_bias(k) { 0.0 } else { model.l2() }) * v[k];
        }
        lambda = norm(&hv);
        v = hv;
    }
    lambda
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::endmodel::{hessian, train_end_model, TrainConfig};
    use nalgebra::DMatrix;

    fn random_spd(rng: &mut ChaCha8Rng, p: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(p, p) * 0.1
    }

    #[test]
    fn exact_on_scaled_identity() {
        let h = crate::endmodel::HessianOperator::from_matrix(DMatrix::identity(3, 3) * 2.0, 1.0).unwrap();
        let u = ihvp_exact(&h, &[1.0, 0.0, 0.0]).unwrap();
        assert!((u[0] - 0.5).abs() < 1e-15 && u[1] == 0.0 && u[2] == 0.0);
        assert_eq!(ihvp_exact(&h, &[0.0; 3]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn exact_residual_on_random_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let m = random_spd(&mut rng, 12);
            let h = crate::endmodel::HessianOperator::from_matrix(m, 0.1).unwrap();
            let v: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            let u = ihvp_exact(&h, &v).unwrap();
            let r: Vec<f64> = h.apply(&u).iter().zip(&v).map(|(a, b)| a - b).collect();
            assert!(norm(&r) <= 1e-8 * norm(&v));
        }
    }

    fn small_problem() -> (EndModel, FeatureMatrix, LabelGrid) {
        let spec = crate::wsdata::SyntheticSpec {
            n_train: 60,
            n_valid: 10,
            n_test: 10,
            dim: 3,
            num_classes: 3,
            class_separation: 2.0,
            lf_accuracy: vec![0.9, 0.8, 0.7],
            lf_coverage: vec![0.9, 0.9, 0.9],
            seed: 4,
        };
        let b = crate::wsdata::generate_synthetic(&spec).unwrap();
        let w = crate::labelmodel::fit_majority_vote(&b.train.votes).unwrap();
        let y = crate::labelmodel::infer_labels(&w, &b.train.votes).unwrap().into_grid();
        let m = train_end_model(&b.train.features, &y, &TrainConfig { epochs: 200, ..Default::default() }).unwrap();
        (m, b.train.features, y)
    }

    #[test]
    fn lissa_full_batch_fixed_point() {
        let (m, x, y) = small_problem();
        let damping = 1e-2;
        let h = hessian(&m, &x, &y, damping).unwrap();
        let mut v: Vec<f64> = (0..m.num_params()).map(|k| (k as f64).cos()).collect();
        // keep v out of the softmax shift directions, like every loss gradient
        let w = m.dim() + 1;
        for k in 0..w {
            let mean: f64 = (0..3).map(|c| v[c * w + k]).sum::<f64>() / 3.0;
            (0..3).for_each(|c| v[c * w + k] -= mean);
        }
        let exact = ihvp_exact(&h, &v).unwrap();
        let scale = (1.1 * spectral_norm_estimate(&m, &x, &y, damping, 100)).max(1.0);
        let cfg = IhvpSolverConfig::lissa(damping, LissaConfig { batch: x.n(), depth: 20_000, repeats: 1, scale, seed: 1 });
        let approx = ihvp_lissa(&m, &x, &y, &v, &cfg).unwrap();
        let err: f64 = norm(&approx.iter().zip(&exact).map(|(a, b)| a - b).collect::<Vec<_>>()) / norm(&exact);
        assert!(err < 1e-4, "relative error {err}");
        assert!(ihvp_lissa(&m, &x, &y, &vec![0.0; v.len()], &cfg).unwrap().iter().all(|&u| u == 0.0));
    }

    #[test]
    fn lissa_divergence_guard() {
        let (m, x, y) = small_problem();
        let v = vec![1.0; m.num_params()];
        let cfg = IhvpSolverConfig::lissa(1e-3, LissaConfig { scale: 1.0, depth: 5000, repeats: 1, ..Default::default() });
        let y2 = y.scaled(1000.0);
        assert!(matches!(ihvp_lissa(&m, &x, &y2, &v, &cfg), Err(Error::Numerical(_))));
    }

    #[test]
    fn config_validation() {
        let mut cfg = IhvpSolverConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.lissa.scale = 0.5;
        assert!(cfg.validate().is_err());
    }
}
