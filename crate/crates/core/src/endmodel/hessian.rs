use nalgebra::{DMatrix, DVector};

use super::EndModel;
use crate::error::{Error, Result};
use crate::labelmodel::LabelGrid;
use crate::wsdata::FeatureMatrix;

/// Largest parameter count for which a dense Hessian is built.
pub const DENSE_LIMIT: usize = 4096;

/// Damped objective Hessian at a fitted model.
#[derive(Debug, Clone)]
pub struct HessianOperator {
    matrix: DMatrix<f64>,
    damping: f64,
}

impl HessianOperator {
    /// Wraps an explicit symmetric matrix whose diagonal already includes `damping`.
    pub fn from_matrix(matrix: DMatrix<f64>, damping: f64) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::shape("Hessian must be square"));
        }
        if (&matrix - matrix.transpose()).abs().max() > 1e-10 {
            return Err(Error::domain("Hessian must be symmetric"));
        }
        Ok(Self { matrix, damping })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn damping(&self) -> f64 {
        self.damping
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        (&self.matrix * DVector::from_column_slice(v)).as_slice().to_vec()
    }

    /// Solves `H u = v` by Cholesky.
    pub fn solve(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim() {
            return Err(Error::shape(format!("vector has length {}, Hessian is {}", v.len(), self.dim())));
        }
        let chol = self
            .matrix
            .clone()
            .cholesky()
            .ok_or_else(|| Error::numerical("Hessian is not positive definite"))?;
        Ok(chol.solve(&DVector::from_column_slice(v)).as_slice().to_vec())
    }

    /// Cholesky factor for repeated solves.
    pub fn factor(&self) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
        self.matrix.clone().cholesky().ok_or_else(|| Error::numerical("Hessian is not positive definite"))
    }
}

/// `(1/N) Σ_i s_i (diag p_i − p_i p_iᵀ) ⊗ x̃_i x̃_iᵀ` without ridge or damping.
pub(crate) fn data_hessian(model: &EndModel, x: &FeatureMatrix, y: &LabelGrid) -> DMatrix<f64> {
    let p = model.num_params();
    let w = model.d + 1;
    let mut h = DMatrix::<f64>::zeros(p, p);
    let inv_n = 1.0 / x.n() as f64;
    let mut xt = vec![1.0; w];
    for i in 0..x.n() {
        let s: f64 = y.row(i).iter().sum();
        if s == 0.0 {
            continue;
        }
        xt[..model.d].copy_from_slice(x.row(i));
        let pr = model.proba(x.row(i));
        for c in 0..model.c {
            for c2 in 0..model.c {
                let k = s * inv_n * (if c == c2 { pr[c] } else { 0.0 } - pr[c] * pr[c2]);
                if k == 0.0 {
                    continue;
                }
                for a in 0..w {
                    let ka = k * xt[a];
                    for b in 0..w {
                        h[(c * w + a, c2 * w + b)] += ka * xt[b];
                    }
                }
            }
        }
    }
    h
}

/// Per-point curvature-vector product `s (diag p − p pᵀ) ⊗ x̃x̃ᵀ · v`, accumulated into `out` with `scale`.
pub(crate) fn add_point_hvp(model: &EndModel, x: &[f64], s: f64, v: &[f64], scale: f64, out: &mut [f64]) {
    if s == 0.0 {
        return;
    }
    let w = model.d + 1;
    let pr = model.proba(x);
    let a: Vec<f64> = (0..model.c)
        .map(|c| {
            let row = &v[c * w..(c + 1) * w];
            row[..model.d].iter().zip(x).map(|(r, xv)| r * xv).sum::<f64>() + row[model.d]
        })
        .collect();
    let pa: f64 = pr.iter().zip(&a).map(|(p, a)| p * a).sum();
    for c in 0..model.c {
        let b = scale * s * pr[c] * (a[c] - pa);
        let row = &mut out[c * w..(c + 1) * w];
        for (o, xv) in row[..model.d].iter_mut().zip(x) {
            *o += b * xv;
        }
        row[model.d] += b;
    }
}

/// Dense damped Hessian: data curvature plus `(l2 + damping)·I` on weights and `damping·I` on biases.
pub fn hessian(model: &EndModel, x: &FeatureMatrix, y: &LabelGrid, damping: f64) -> Result<HessianOperator> {
    hessian_with_limit(model, x, y, damping, DENSE_LIMIT)
}

pub fn hessian_with_limit(
    model: &EndModel,
    x: &FeatureMatrix,
    y: &LabelGrid,
    damping: f64,
    limit: usize,
) -> Result<HessianOperator> {
    if !(damping > 0.0 && damping.is_finite()) {
        return Err(Error::domain("damping must be positive"));
    }
    let p = model.num_params();
    if p > limit {
        return Err(Error::domain(format!(
            "{p} parameters exceed the dense Hessian limit of {limit}; use the LiSSA solver"
        )));
    }
    if x.n() != y.n() || x.n() == 0 || x.dim() != model.d || y.num_classes() != model.c {
        return Err(Error::shape("model, features and labels disagree in shape"));
    }
    let mut h = data_hessian(model, x, y);
    for k in 0..p {
        h[(k, k)] += damping + if model.is_bias(k) { 0.0 } else { model.l2 };
    }
    // exact symmetry
    let h = (&h + h.transpose()) * 0.5;
    Ok(HessianOperator { matrix: h, damping })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::endmodel::{objective_gradient, TrainMeta};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_case(rng: &mut ChaCha8Rng, n: usize, c: usize, d: usize, l2: f64) -> (EndModel, FeatureMatrix, LabelGrid) {
        let theta: Vec<f64> = (0..c * (d + 1)).map(|_| rng.random_range(-1.0..1.0)).collect();
        let meta = EndModel::zeros(c, d, l2).meta().clone();
        let m = EndModel::from_theta(c, d, theta, l2, meta).unwrap();
        let x = FeatureMatrix::new(n, d, (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let y = LabelGrid::new(n, c, (0..n * c).map(|_| rng.random_range(0.0..1.5)).collect()).unwrap();
        (m, x, y)
    }

    fn with_theta(m: &EndModel, theta: Vec<f64>) -> EndModel {
        let meta: TrainMeta = m.meta().clone();
        EndModel::from_theta(m.num_classes(), m.dim(), theta, m.l2(), meta).unwrap()
    }

    #[test]
    fn finite_difference_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let (m, x, y) = random_case(&mut rng, 4, 3, 2, 0.1);
            let damp = 1e-3;
            let h = hessian(&m, &x, &y, damp).unwrap();
            let eps = 1e-5;
            for p in 0..m.num_params() {
                let mut tp = m.theta().to_vec();
                tp[p] += eps;
                let mut tm = m.theta().to_vec();
                tm[p] -= eps;
                let gp = objective_gradient(&with_theta(&m, tp), &x, &y).unwrap();
                let gm = objective_gradient(&with_theta(&m, tm), &x, &y).unwrap();
                for q in 0..m.num_params() {
                    let fd = (gp[q] - gm[q]) / (2.0 * eps) + if p == q { damp } else { 0.0 };
                    let an = h.matrix()[(q, p)];
                    assert!((fd - an).abs() <= 1e-5 * an.abs().max(1.0), "({q},{p}) fd {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn zero_features_only_touch_biases() {
        // one point at the origin, one-hot label on class 0, C = 2, d = 1
        let m = EndModel::zeros(2, 1, 0.5);
        let x = FeatureMatrix::new(1, 1, vec![0.0]).unwrap();
        let y = LabelGrid::one_hot(&[0], 2);
        let damp = 0.01;
        let h = hessian(&m, &x, &y, damp).unwrap();
        // p = (1/2, 1/2): curvature block [[1/4, -1/4], [-1/4, 1/4]] on bias coordinates 1 and 3
        let expected = DMatrix::from_row_slice(
            4,
            4,
            &[
                0.5 + damp, 0.0, 0.0, 0.0,
                0.0, 0.25 + damp, 0.0, -0.25,
                0.0, 0.0, 0.5 + damp, 0.0,
                0.0, -0.25, 0.0, 0.25 + damp,
            ],
        );
        assert!((h.matrix() - expected).abs().max() < 1e-15);
    }

    #[test]
    fn linear_in_label_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (m, x, y) = random_case(&mut rng, 5, 3, 2, 0.0);
        let a = data_hessian(&m, &x, &y);
        let b = data_hessian(&m, &x, &y.scaled(2.0));
        assert_eq!(b, a * 2.0);
    }

    #[test]
    fn positive_definite_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let (m, x, y) = random_case(&mut rng, 6, 4, 3, 1e-4);
            let damp = 1e-3;
            let h = hessian(&m, &x, &y, damp).unwrap();
            assert!((h.matrix() - h.matrix().transpose()).abs().max() < 1e-10);
            let eig = h.matrix().clone().symmetric_eigen();
            assert!(eig.eigenvalues.min() >= damp - 1e-10);
        }
    }

    #[test]
    fn point_hvp_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (m, x, y) = random_case(&mut rng, 5, 3, 2, 0.0);
        let v: Vec<f64> = (0..m.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dense = data_hessian(&m, &x, &y) * DVector::from_column_slice(&v);
        let mut out = vec![0.0; v.len()];
        for i in 0..x.n() {
            add_point_hvp(&m, x.row(i), y.row(i).iter().sum(), &v, 1.0 / x.n() as f64, &mut out);
        }
        for (a, b) in out.iter().zip(dense.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_limit_refuses() {
        let m = EndModel::zeros(3, 4, 0.0);
        let x = FeatureMatrix::new(1, 4, vec![0.0; 4]).unwrap();
        let y = LabelGrid::one_hot(&[0], 3);
        assert!(hessian_with_limit(&m, &x, &y, 1e-3, 10).is_err());
        assert!(hessian(&m, &x, &y, 0.0).is_err());
    }
}
