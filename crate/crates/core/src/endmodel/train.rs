use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{hessian::data_hessian, EndModel, TrainMeta};
use crate::error::{Error, Result};
use crate::labelmodel::LabelGrid;
use crate::wsdata::FeatureMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub l2: f64,
    pub seed: u64,
    /// Newton steps run after gradient descent; zero disables the phase.
    pub polish_steps: usize,
    /// Gradient-norm threshold for the converged flag.
    pub grad_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 0.001, epochs: 10_000, l2: 1e-4, seed: 0, polish_steps: 100, grad_tol: 1e-10 }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::domain("learning rate must be positive"));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::domain("l2 must be nonnegative"));
        }
        if !(self.grad_tol >= 0.0) {
            return Err(Error::domain("grad_tol must be nonnegative"));
        }
        Ok(())
    }
}

fn check_inputs(x: &FeatureMatrix, y: &LabelGrid) -> Result<()> {
    if x.n() != y.n() {
        return Err(Error::shape(format!("{} feature rows but {} label rows", x.n(), y.n())));
    }
    if x.n() == 0 {
        return Err(Error::shape("empty training set"));
    }
    if y.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("label weights must be finite"));
    }
    Ok(())
}

/// Mean noise-aware loss plus `(l2/2)·‖weights‖²`.
pub fn objective(model: &EndModel, x: &FeatureMatrix, y: &LabelGrid) -> Result<f64> {
    check_inputs(x, y)?;
    if x.dim() != model.d || y.num_classes() != model.c {
        return Err(Error::shape("model and data dimensions differ"));
    }
    Ok(eval(model, x, y, false).0)
}

/// Gradient of [`objective`].
pub fn objective_gradient(model: &EndModel, x: &FeatureMatrix, y: &LabelGrid) -> Result<Vec<f64>> {
    check_inputs(x, y)?;
    if x.dim() != model.d || y.num_classes() != model.c {
        return Err(Error::shape("model and data dimensions differ"));
    }
    Ok(eval(model, x, y, true).1)
}

fn eval(model: &EndModel, x: &FeatureMatrix, y: &LabelGrid, with_grad: bool) -> (f64, Vec<f64>) {
    let (c, d) = (model.c, model.d);
    let w = d + 1;
    let n = x.n() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; if with_grad { model.num_params() } else { 0 }];
    let mut z = vec![0.0; c];
    let mut e = vec![0.0; c];
    for i in 0..x.n() {
        let (xi, yi) = (x.row(i), y.row(i));
        for (k, zk) in z.iter_mut().enumerate() {
            let row = &model.theta[k * w..(k + 1) * w];
            *zk = row[..d].iter().zip(xi).map(|(a, b)| a * b).sum::<f64>() + row[d];
        }
        let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (ek, zk) in e.iter_mut().zip(&z) {
            *ek = (zk - mx).exp();
        }
        let sum: f64 = e.iter().sum();
        let lse = mx + sum.ln();
        let mut total = 0.0;
        for (yk, zk) in yi.iter().zip(&z) {
            if *yk != 0.0 {
                loss -= yk * (zk - lse);
            }
            total += yk;
        }
        if with_grad {
            for k in 0..c {
                let dz = (total * e[k] / sum - yi[k]) / n;
                let g = &mut grad[k * w..(k + 1) * w];
                for (gv, xv) in g[..d].iter_mut().zip(xi) {
                    *gv += dz * xv;
                }
                g[d] += dz;
            }
        }
    }
    loss /= n;
    let mut ridge = 0.0;
    for (p, t) in model.theta.iter().enumerate() {
        if !model.is_bias(p) {
            ridge += t * t;
            if with_grad {
                grad[p] += model.l2 * t;
            }
        }
    }
    (loss + 0.5 * model.l2 * ridge, grad)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Full-batch gradient descent from θ = 0 followed by Newton polishing.
pub fn train_end_model(x: &FeatureMatrix, y: &LabelGrid, cfg: &TrainConfig) -> Result<EndModel> {
    check_inputs(x, y)?;
    let init = EndModel::zeros(y.num_classes(), x.dim(), cfg.l2);
    train_from(&init, x, y, cfg)
}

/// Same as [`train_end_model`] but starting from `init`'s parameters.
pub fn train_from(init: &EndModel, x: &FeatureMatrix, y: &LabelGrid, cfg: &TrainConfig) -> Result<EndModel> {
    cfg.validate()?;
    check_inputs(x, y)?;
    if x.dim() != init.d || y.num_classes() != init.c {
        return Err(Error::shape(format!(
            "model expects d={}, C={} but data has d={}, C={}",
            init.d,
            init.c,
            x.dim(),
            y.num_classes()
        )));
    }
    let mut model = init.clone();
    model.l2 = cfg.l2;

    let (mut obj, mut grad) = eval(&model, x, y, true);
    let initial = obj;
    let mut max_increase = f64::NEG_INFINITY;
    for epoch in 0..cfg.epochs {
        for (t, g) in model.theta.iter_mut().zip(&grad) {
            *t -= cfg.lr * g;
        }
        let (next, g) = eval(&model, x, y, true);
        if !next.is_finite() {
            return Err(Error::numerical(format!(
                "objective became non-finite at epoch {epoch} (previous value {obj}, gradient norm {})",
                norm(&grad)
            )));
        }
        max_increase = max_increase.max(next - obj);
        obj = next;
        grad = g;
    }

    let mut newton_steps = 0;
    for _ in 0..cfg.polish_steps {
        if norm(&grad) <= cfg.grad_tol {
            break;
        }
        let Some(step) = newton_direction(&model, x, y, &grad) else {
            break;
        };
        let slope: f64 = step.iter().zip(&grad).map(|(a, b)| a * b).sum();
        let base = model.theta.clone();
        let mut t = 1.0;
        let mut accepted = None;
        while t > 1e-12 {
            for ((th, b), s) in model.theta.iter_mut().zip(&base).zip(&step) {
                *th = b + t * s;
            }
            let (trial, g) = eval(&model, x, y, true);
            let sufficient = trial <= obj + 1e-4 * t * slope;
            // near the optimum the objective stalls at rounding level while the gradient still shrinks
            if trial.is_finite() && (sufficient || (trial <= obj + 1e-14 * obj.abs().max(1.0) && norm(&g) < norm(&grad))) {
                accepted = Some((trial, g));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((o, g)) => {
                obj = o;
                grad = g;
                newton_steps += 1;
            }
            None => {
                model.theta = base;
                break;
            }
        }
    }

    let final_grad_norm = norm(&grad);
    model.meta = TrainMeta {
        epochs_run: cfg.epochs,
        newton_steps,
        lr: cfg.lr,
        seed: cfg.seed,
        initial_objective: initial,
        final_objective: obj,
        final_grad_norm,
        grad_tol: cfg.grad_tol,
        converged: final_grad_norm <= cfg.grad_tol,
        max_objective_increase: if cfg.epochs == 0 { 0.0 } else { max_increase },
    };
    Ok(model)
}

fn newton_direction(model: &EndModel, x: &FeatureMatrix, y: &LabelGrid, grad: &[f64]) -> Option<Vec<f64>> {
    let p = model.num_params();
    let mut h: DMatrix<f64> = data_hessian(model, x, y);
    for k in 0..p {
        h[(k, k)] += if model.is_bias(k) { 0.0 } else { model.l2 } + 1e-12;
    }
    let chol = h.cholesky()?;
    let step = chol.solve(&DVector::from_column_slice(grad));
    let step: Vec<f64> = step.iter().map(|v| -v).collect();
    step.iter().all(|v| v.is_finite()).then_some(step)
}
