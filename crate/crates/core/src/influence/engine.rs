use nalgebra::{Cholesky, DVector, Dyn};
use rayon::prelude::*;

use super::solver::{ihvp_exact, ihvp_lissa};
use super::tensor::{InfluenceTensor, Method, TensorMeta};
use super::{IhvpSolverConfig, SolverKind};
use crate::endmodel::{hessian, logit_gradient, EndModel, HessianOperator, DENSE_LIMIT};
use crate::error::{Error, Result};
use crate::labelmodel::{label_without, term_weights, LabelGrid, Sigma, WTensor};
use crate::wsdata::{FeatureMatrix, GoldLabels, LabelMatrix};

/// Gold-labeled points whose mean loss is being explained.
#[derive(Debug, Clone, PartialEq)]
pub struct Holdout {
    pub id: String,
    pub features: FeatureMatrix,
    pub gold: GoldLabels,
}

impl Holdout {
    pub fn new(id: impl Into<String>, features: FeatureMatrix, gold: GoldLabels) -> Result<Self> {
        if features.n() != gold.len() {
            return Err(Error::shape("holdout features and labels differ in row count"));
        }
        if features.n() == 0 {
            return Err(Error::domain("holdout set is empty"));
        }
        Ok(Self { id: id.into(), features, gold })
    }

    /// A single test point.
    pub fn single(id: impl Into<String>, x: &[f64], label: usize, num_classes: usize) -> Result<Self> {
        Self::new(id, FeatureMatrix::new(1, x.len(), x.to_vec())?, GoldLabels::new(vec![label], num_classes)?)
    }
}

/// `H⁻¹ · (mean holdout-loss gradient)` for one holdout set.
#[derive(Debug, Clone, PartialEq)]
pub struct HoldoutDirection {
    pub id: String,
    pub u: Vec<f64>,
}

/// A fitted model together with the data it was trained on and an iHVP solver.
pub struct InfluenceEngine<'a> {
    model: &'a EndModel,
    x: &'a FeatureMatrix,
    y: &'a LabelGrid,
    solver: IhvpSolverConfig,
    hessian: Option<HessianOperator>,
    factor: Option<Cholesky<f64, Dyn>>,
}

impl<'a> InfluenceEngine<'a> {
    /// `y` must be the label grid `model` was trained on.
    pub fn new(model: &'a EndModel, x: &'a FeatureMatrix, y: &'a LabelGrid, solver: IhvpSolverConfig) -> Result<Self> {
        solver.validate()?;
        if x.n() != y.n() || x.dim() != model.dim() || y.num_classes() != model.num_classes() {
            return Err(Error::shape("model, features and labels disagree in shape"));
        }
        let (hessian, factor) = if model.num_params() <= DENSE_LIMIT {
            let h = hessian(model, x, y, solver.damping)?;
            let f = h.factor()?;
            (Some(h), Some(f))
        } else if solver.kind == SolverKind::Exact {
            return Err(Error::domain(format!(
                "{} parameters exceed the dense Hessian limit; use the LiSSA solver",
                model.num_params()
            )));
        } else {
            (None, None)
        };
        Ok(Self { model, x, y, solver, hessian, factor })
    }

    pub fn model(&self) -> &EndModel {
        self.model
    }

    pub fn solver(&self) -> &IhvpSolverConfig {
        &self.solver
    }

    pub fn n(&self) -> usize {
        self.x.n()
    }

    pub fn hessian(&self) -> Option<&HessianOperator> {
        self.hessian.as_ref()
    }

    /// `H⁻¹ v` with the configured solver.
    pub fn ihvp(&self, v: &[f64]) -> Result<Vec<f64>> {
        match self.solver.kind {
            SolverKind::Exact => ihvp_exact(self.hessian.as_ref().expect("exact solver has a dense Hessian"), v),
            SolverKind::Lissa => ihvp_lissa(self.model, self.x, self.y, v, &self.solver),
        }
    }

    /// Mean gradient of the one-hot cross-entropy over the holdout.
    pub fn holdout_gradient(&self, holdout: &Holdout) -> Result<Vec<f64>> {
        if holdout.features.dim() != self.model.dim() || holdout.gold.num_classes() != self.model.num_classes() {
            return Err(Error::shape("holdout does not match the model"));
        }
        let c = self.model.num_classes();
        let n = holdout.features.n() as f64;
        let mut g = vec![0.0; self.model.num_params()];
        let mut onehot = vec![0.0; c];
        for t in 0..holdout.features.n() {
            onehot.iter_mut().for_each(|v| *v = 0.0);
            onehot[holdout.gold.get(t)] = 1.0;
            crate::endmodel::add_loss_gradient(self.model, holdout.features.row(t), &onehot, 1.0 / n, &mut g);
        }
        Ok(g)
    }

    pub fn direction(&self, holdout: &Holdout) -> Result<HoldoutDirection> {
        let g = self.holdout_gradient(holdout)?;
        Ok(HoldoutDirection { id: holdout.id.clone(), u: self.ihvp(&g)? })
    }

    /// `a_c = U_c · [x_i; 1]` with `U` the direction reshaped to `C × (d+1)`.
    fn project(&self, u: &[f64], i: usize) -> Vec<f64> {
        let d = self.model.dim();
        let xi = self.x.row(i);
        u.chunks(d + 1).map(|row| row[..d].iter().zip(xi).map(|(a, b)| a * b).sum::<f64>() + row[d]).collect()
    }

    fn check_votes(&self, w: &WTensor, votes: &LabelMatrix) -> Result<()> {
        if votes.n() != self.x.n() {
            return Err(Error::shape("label matrix and training features differ in row count"));
        }
        if w.num_classes() != self.model.num_classes() {
            return Err(Error::shape("label model and end model differ in class count"));
        }
        Ok(())
    }

    fn meta(&self, method: Method, id: &str, m: usize) -> TensorMeta {
        TensorMeta {
            method,
            holdout_id: id.to_string(),
            solver: self.solver.clone(),
            n: self.x.n(),
            m,
            c: self.model.num_classes(),
            has_unattributed: false,
        }
    }

    /// Point-level influence of every training point.
    pub fn ordinary(&self, dir: &HoldoutDirection) -> Vec<f64> {
        (0..self.x.n())
            .into_par_iter()
            .map(|i| {
                let a = self.project(&dir.u, i);
                let p = self.model.proba(self.x.row(i));
                -dot(&logit_gradient(&p, self.y.row(i)), &a)
            })
            .collect()
    }

    /// Reweighting influence of every decomposed loss term (identity σ).
    pub fn rw(&self, dir: &HoldoutDirection, w: &WTensor, votes: &LabelMatrix) -> Result<InfluenceTensor> {
        if w.sigma() != Sigma::Identity {
            return Err(Error::domain(
                "rw influence needs an identity label model; use rw_exp or approximate the label model first",
            ));
        }
        self.check_votes(w, votes)?;
        let (m, c) = (w.num_lfs(), w.num_classes());
        let rows: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..self.x.n())
            .into_par_iter()
            .map(|i| {
                let a = self.project(&dir.u, i);
                let p = self.model.proba(self.x.row(i));
                let pa = dot(&p, &a);
                let term = |wt: f64, k: usize| if wt == 0.0 { 0.0 } else { -wt * (pa - a[k]) };
                let mut scores = vec![0.0; m * c];
                let mut rest = vec![0.0; c];
                match term_weights(w, votes, i)? {
                    Some(tw) => {
                        for j in 0..m {
                            for k in 0..c {
                                scores[j * c + k] = term(tw.get(j, k), k);
                            }
                        }
                        for k in 0..c {
                            rest[k] = term(tw.prior()[k], k);
                        }
                    }
                    None => {
                        for k in 0..c {
                            rest[k] = term(self.y.row(i)[k], k);
                        }
                    }
                }
                Ok((scores, rest))
            })
            .collect();
        self.assemble(Method::Rw, &dir.id, m, rows)
    }

    fn assemble(
        &self,
        method: Method,
        id: &str,
        m: usize,
        rows: Vec<Result<(Vec<f64>, Vec<f64>)>>,
    ) -> Result<InfluenceTensor> {
        let c = self.model.num_classes();
        let mut scores = Vec::with_capacity(self.x.n() * m * c);
        let mut rest = Vec::with_capacity(self.x.n() * c);
        for r in rows {
            let (s, u) = r?;
            scores.extend(s);
            rest.extend(u);
        }
        let unattributed = rest.iter().any(|&v| v != 0.0).then_some(rest);
        InfluenceTensor::new(self.meta(method, id, m), scores, unattributed)
    }

    /// Reweighting influence for an exponential label model, first order in the weight.
    pub fn rw_exp(&self, dir: &HoldoutDirection, w: &WTensor, votes: &LabelMatrix) -> Result<InfluenceTensor> {
        if w.sigma() != Sigma::Exponential {
            return Err(Error::domain("rw_exp influence needs an exponential label model; use rw"));
        }
        self.check_votes(w, votes)?;
        let (m, c) = (w.num_lfs(), w.num_classes());
        let rows: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..self.x.n())
            .into_par_iter()
            .map(|i| {
                let a = self.project(&dir.u, i);
                let p = self.model.proba(self.x.row(i));
                let pa = dot(&p, &a);
                let y = self.y.row(i);
                let mut scores = vec![0.0; m * c];
                for j in 0..m {
                    let slab = w.slab(j, votes.vote_row(i, j));
                    for k in 0..c {
                        let wt = slab[k] * y[k];
                        scores[j * c + k] = if wt == 0.0 { 0.0 } else { -wt * (pa - a[k]) };
                    }
                }
                Ok((scores, vec![0.0; c]))
            })
            .collect();
        self.assemble(Method::RwExp, &dir.id, m, rows)
    }

    /// Label differences `ŷ − ŷ₋ⱼ꜀` for point `i`, flattened `j*C + c` then class.
    fn wm_diffs(&self, w: &WTensor, votes: &LabelMatrix, i: usize) -> Result<Vec<Vec<f64>>> {
        let (m, c) = (w.num_lfs(), w.num_classes());
        let y = self.y.row(i);
        let mut out = Vec::with_capacity(m * c);
        for j in 0..m {
            for k in 0..c {
                if w.get(j, votes.vote_row(i, j), k) == 0.0 {
                    out.push(vec![0.0; c]);
                    continue;
                }
                let (without, _) = label_without(w, votes, i, j, k)?;
                out.push(y.iter().zip(&without).map(|(a, b)| a - b).collect());
            }
        }
        Ok(out)
    }

    /// Weight-moving influence; works for both σ kinds.
    pub fn wm(&self, dir: &HoldoutDirection, w: &WTensor, votes: &LabelMatrix) -> Result<InfluenceTensor> {
        self.check_votes(w, votes)?;
        let (m, c) = (w.num_lfs(), w.num_classes());
        let rows: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..self.x.n())
            .into_par_iter()
            .map(|i| {
                let a = self.project(&dir.u, i);
                let p = self.model.proba(self.x.row(i));
                let scores = self
                    .wm_diffs(w, votes, i)?
                    .into_iter()
                    .map(|diff| if diff.iter().all(|&v| v == 0.0) { 0.0 } else { -dot(&logit_gradient(&p, &diff), &a) })
                    .collect();
                Ok((scores, vec![0.0; c]))
            })
            .collect();
        self.assemble(Method::Wm, &dir.id, m, rows)
    }

    fn exact_factor(&self) -> Result<&Cholesky<f64, Dyn>> {
        self.factor
            .as_ref()
            .ok_or_else(|| Error::domain("self-influence needs a dense Hessian; the model is too large"))
    }

    /// `K[c][c'] = (e_c ⊗ x̃)ᵀ H⁻¹ (e_c' ⊗ x̃)` for point `i`, so that any
    /// gradient `v ⊗ x̃` has self-influence `vᵀ K v`.
    fn point_kernel(&self, i: usize) -> Result<Vec<f64>> {
        let f = self.exact_factor()?;
        let c = self.model.num_classes();
        let w = self.model.dim() + 1;
        let mut xt = self.x.row(i).to_vec();
        xt.push(1.0);
        let mut k = vec![0.0; c * c];
        for a in 0..c {
            let mut e = DVector::zeros(c * w);
            e.rows_mut(a * w, w).copy_from_slice(&xt);
            let s = f.solve(&e);
            for b in 0..c {
                k[a * c + b] = s.rows(b * w, w).iter().zip(&xt).map(|(u, x)| u * x).sum();
            }
        }
        for a in 0..c {
            for b in 0..a {
                let m = 0.5 * (k[a * c + b] + k[b * c + a]);
                k[a * c + b] = m;
                k[b * c + a] = m;
            }
        }
        Ok(k)
    }

    /// Point-level self-influence `∇ℓᵢᵀ H⁻¹ ∇ℓᵢ`.
    pub fn self_ordinary(&self) -> Result<Vec<f64>> {
        (0..self.x.n())
            .into_par_iter()
            .map(|i| {
                let k = self.point_kernel(i)?;
                let p = self.model.proba(self.x.row(i));
                Ok(quad(&k, &logit_gradient(&p, self.y.row(i))))
            })
            .collect()
    }

    /// Self-influence of every reweighting term (identity σ).
    pub fn self_rw(&self, w: &WTensor, votes: &LabelMatrix) -> Result<InfluenceTensor> {
        if w.sigma() != Sigma::Identity {
            return Err(Error::domain("term self-influence needs an identity label model"));
        }
        self.check_votes(w, votes)?;
        let (m, c) = (w.num_lfs(), w.num_classes());
        let rows: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..self.x.n())
            .into_par_iter()
            .map(|i| {
                let k = self.point_kernel(i)?;
                let p = self.model.proba(self.x.row(i));
                // self-influence of the unit-weight term for each class
                let unit: Vec<f64> = (0..c)
                    .map(|cc| {
                        let mut v = p.clone();
                        v[cc] -= 1.0;
                        quad(&k, &v)
                    })
                    .collect();
                let mut scores = vec![0.0; m * c];
                let mut rest = vec![0.0; c];
                match term_weights(w, votes, i)? {
                    Some(tw) => {
                        for j in 0..m {
                            for cc in 0..c {
                                let wt = tw.get(j, cc);
                                scores[j * c + cc] = wt * wt * unit[cc];
                            }
                        }
                        for cc in 0..c {
                            rest[cc] = tw.prior()[cc].powi(2) * unit[cc];
                        }
                    }
                    None => {
                        for cc in 0..c {
                            rest[cc] = self.y.row(i)[cc].powi(2) * unit[cc];
                        }
                    }
                }
                Ok((scores, rest))
            })
            .collect();
        self.assemble(Method::SelfRw, "self", m, rows)
    }

    /// Self-influence of every weight-moving perturbation.
    pub fn self_wm(&self, w: &WTensor, votes: &LabelMatrix) -> Result<InfluenceTensor> {
        self.check_votes(w, votes)?;
        let (m, c) = (w.num_lfs(), w.num_classes());
        let rows: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..self.x.n())
            .into_par_iter()
            .map(|i| {
                let k = self.point_kernel(i)?;
                let p = self.model.proba(self.x.row(i));
                let scores = self
                    .wm_diffs(w, votes, i)?
                    .into_iter()
                    .map(|diff| if diff.iter().all(|&v| v == 0.0) { 0.0 } else { quad(&k, &logit_gradient(&p, &diff)) })
                    .collect();
                Ok((scores, vec![0.0; c]))
            })
            .collect();
        self.assemble(Method::SelfWm, "self", m, rows)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn quad(k: &[f64], v: &[f64]) -> f64 {
    let c = v.len();
    let mut s = 0.0;
    for a in 0..c {
        for b in 0..c {
            s += v[a] * k[a * c + b] * v[b];
        }
    }
    s.max(0.0)
}

/// Influence of training point `i` on the mean holdout loss.
pub fn ordinary_influence(engine: &InfluenceEngine<'_>, i: usize, holdout: &Holdout) -> Result<f64> {
    if i >= engine.n() {
        return Err(Error::shape(format!("point {i} out of range")));
    }
    let dir = engine.direction(holdout)?;
    let a = engine.project(&dir.u, i);
    let p = engine.model.proba(engine.x.row(i));
    Ok(-dot(&logit_gradient(&p, engine.y.row(i)), &a))
}

pub fn rw_influence(
    engine: &InfluenceEngine<'_>,
    w: &WTensor,
    votes: &LabelMatrix,
    holdout: &Holdout,
) -> Result<InfluenceTensor> {
    engine.rw(&engine.direction(holdout)?, w, votes)
}

pub fn rw_influence_exp(
    engine: &InfluenceEngine<'_>,
    w: &WTensor,
    votes: &LabelMatrix,
    holdout: &Holdout,
) -> Result<InfluenceTensor> {
    engine.rw_exp(&engine.direction(holdout)?, w, votes)
}

pub fn wm_influence(
    engine: &InfluenceEngine<'_>,
    w: &WTensor,
    votes: &LabelMatrix,
    holdout: &Holdout,
) -> Result<InfluenceTensor> {
    engine.wm(&engine.direction(holdout)?, w, votes)
}

/// Self-influence of one reweighting term, nonnegative.
pub fn self_influence(
    engine: &InfluenceEngine<'_>,
    w: &WTensor,
    votes: &LabelMatrix,
    i: usize,
    j: usize,
    c: usize,
) -> Result<f64> {
    engine.check_votes(w, votes)?;
    if i >= votes.n() || j >= w.num_lfs() || c >= w.num_classes() {
        return Err(Error::shape(format!("index ({i}, {j}, {c}) out of range")));
    }
    let Some(tw) = term_weights(w, votes, i)? else {
        return Ok(0.0);
    };
    let wt = tw.get(j, c);
    if wt == 0.0 {
        return Ok(0.0);
    }
    let k = engine.point_kernel(i)?;
    let mut v = engine.model.proba(engine.x.row(i));
    v[c] -= 1.0;
    Ok(wt * wt * quad(&k, &v))
}

/// `φ / √(φ_self + 1e-12)`, zero where the self-influence is zero.
pub fn relatif_scores(scores: &[f64], selfinf: &[f64]) -> Result<Vec<f64>> {
    if scores.len() != selfinf.len() {
        return Err(Error::shape("influence and self-influence differ in length"));
    }
    if selfinf.iter().any(|&s| !(s >= 0.0)) {
        return Err(Error::domain("self-influence must be nonnegative"));
    }
    Ok(scores.iter().zip(selfinf).map(|(&f, &s)| if s == 0.0 { 0.0 } else { f / (s + 1e-12).sqrt() }).collect())
}

/// Elementwise RelatIF of a tensor against its self-influence tensor.
pub fn relatif(influence: &InfluenceTensor, selfinf: &InfluenceTensor) -> Result<InfluenceTensor> {
    if influence.shape() != selfinf.shape() {
        return Err(Error::shape("influence and self-influence tensors differ in shape"));
    }
    let method = match influence.method() {
        Method::Rw => Method::RelatifRw,
        Method::Wm => Method::RelatifWm,
        other => return Err(Error::domain(format!("RelatIF is defined for rw and wm tensors, not {}", other.name()))),
    };
    let scores = relatif_scores(influence.as_slice(), selfinf.as_slice())?;
    let rest = match (influence.unattributed(), selfinf.unattributed()) {
        (Some(a), Some(b)) => Some(relatif_scores(a, b)?),
        (Some(a), None) => Some(vec![0.0; a.len()]),
        _ => None,
    };
    let meta = TensorMeta { method, ..influence.meta().clone() };
    InfluenceTensor::new(meta, scores, rest)
}
