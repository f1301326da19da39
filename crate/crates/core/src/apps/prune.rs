use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::endmodel::{mean_log_loss, train_end_model, EndModel, TrainConfig};
use crate::error::{Error, Result};
use crate::influence::{InfluenceTensor, Method};
use crate::labelmodel::{infer_labels, term_weights, LabelGrid, Sigma, WTensor};
use crate::wsdata::DatasetBundle;

/// A decomposed loss term `(i, j, c)`.
pub type Term = (usize, usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub valid: f64,
    pub test: f64,
}

pub fn holdout_losses(model: &EndModel, bundle: &DatasetBundle) -> Result<Losses> {
    Ok(Losses {
        valid: mean_log_loss(model, &bundle.valid.features, &bundle.valid.gold)?,
        test: mean_log_loss(model, &bundle.test.features, &bundle.test.gold)?,
    })
}

/// Terms scoring strictly above `alpha`. Exactly-zero scores mark terms with
/// no weight (abstains, off-vote classes) and are never selected.
pub fn select_harmful_terms(t: &InfluenceTensor, alpha: f64) -> Result<Vec<Term>> {
    if !matches!(t.method(), Method::Rw | Method::RelatifRw) {
        return Err(Error::domain(format!("term discarding needs an rw tensor, got {}", t.method().name())));
    }
    if alpha.is_nan() {
        return Err(Error::domain("alpha must not be NaN"));
    }
    let (n, m, c) = t.shape();
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..m {
            for k in 0..c {
                let s = t.get(i, j, k);
                if s != 0.0 && s > alpha {
                    out.push((i, j, k));
                }
            }
        }
    }
    Ok(out)
}

/// Training label weights with the listed terms removed and the decomposition
/// denominator frozen. Returns the grid and the points left with no weight.
pub fn pruned_labels(w: &WTensor, bundle: &DatasetBundle, terms: &[Term]) -> Result<(LabelGrid, Vec<usize>)> {
    let votes = &bundle.train.votes;
    let mut y = infer_labels(w, votes)?.into_grid();
    let (m, c) = (w.num_lfs(), w.num_classes());
    let mut removed: Vec<Vec<bool>> = vec![Vec::new(); votes.n()];
    for &(i, j, k) in terms {
        if i >= votes.n() || j >= m || k >= c {
            return Err(Error::shape(format!("term ({i}, {j}, {k}) out of range")));
        }
        let r = &mut removed[i];
        if r.is_empty() {
            r.resize(m * c, false);
        }
        r[j * c + k] = true;
    }
    let mut emptied = Vec::new();
    for (i, r) in removed.iter().enumerate() {
        if r.is_empty() {
            continue;
        }
        let Some(tw) = term_weights(w, votes, i)? else { continue };
        let mut row = tw.prior().to_vec();
        for j in 0..m {
            for k in 0..c {
                if !r[j * c + k] {
                    row[k] += tw.get(j, k);
                }
            }
        }
        if row.iter().all(|&v| v == 0.0) {
            emptied.push(i);
        }
        y.row_mut(i).copy_from_slice(&row);
    }
    Ok((y, emptied))
}

/// Training labels where each listed `(j, c)` occurrence is masked from its
/// point's label and the label renormalized (weight moving).
pub fn moved_labels(w: &WTensor, bundle: &DatasetBundle, terms: &[Term]) -> Result<LabelGrid> {
    let votes = &bundle.train.votes;
    let mut y = infer_labels(w, votes)?.into_grid();
    let mut by_point: Vec<Vec<(usize, usize)>> = vec![Vec::new(); votes.n()];
    for &(i, j, k) in terms {
        if i >= votes.n() || j >= w.num_lfs() || k >= w.num_classes() {
            return Err(Error::shape(format!("term ({i}, {j}, {k}) out of range")));
        }
        by_point[i].push((j, k));
    }
    for (i, masks) in by_point.iter().enumerate() {
        if masks.is_empty() {
            continue;
        }
        let mut sums = w.class_sums(votes, i, None);
        for &(j, k) in masks {
            sums[k] -= w.get(j, votes.vote_row(i, j), k);
        }
        if w.sigma() == Sigma::Identity {
            sums.iter_mut().for_each(|s| *s = s.max(0.0));
        }
        let row = w.normalize_sums(&sums).unwrap_or_else(|| vec![1.0 / w.num_classes() as f64; w.num_classes()]);
        y.row_mut(i).copy_from_slice(&row);
    }
    Ok(y)
}

fn retrain(bundle: &DatasetBundle, y: &LabelGrid, cfg: &TrainConfig) -> Result<(EndModel, Losses)> {
    let model = train_end_model(&bundle.train.features, y, cfg)?;
    let losses = holdout_losses(&model, bundle)?;
    Ok((model, losses))
}

#[derive(Debug, Clone)]
pub struct PruneResult {
    /// Threshold that produced this result; `None` means no pruning.
    pub alpha: Option<f64>,
    pub discarded: Vec<Term>,
    pub emptied_points: Vec<usize>,
    pub model: EndModel,
    pub before: Losses,
    pub after: Losses,
}

/// Removes `terms` from the training objective and retrains from scratch.
pub fn discard_and_retrain(
    bundle: &DatasetBundle,
    w: &WTensor,
    terms: &[Term],
    baseline: &EndModel,
    cfg: &TrainConfig,
) -> Result<PruneResult> {
    let before = holdout_losses(baseline, bundle)?;
    let (y, emptied_points) = pruned_labels(w, bundle, terms)?;
    let (model, after) = retrain(bundle, &y, cfg)?;
    Ok(PruneResult { alpha: None, discarded: terms.to_vec(), emptied_points, model, before, after })
}

/// Replaces the labels per weight moving for `terms` and retrains from scratch.
pub fn move_and_retrain(
    bundle: &DatasetBundle,
    w: &WTensor,
    terms: &[Term],
    baseline: &EndModel,
    cfg: &TrainConfig,
) -> Result<PruneResult> {
    let before = holdout_losses(baseline, bundle)?;
    let y = moved_labels(w, bundle, terms)?;
    let (model, after) = retrain(bundle, &y, cfg)?;
    Ok(PruneResult { alpha: None, discarded: terms.to_vec(), emptied_points: Vec::new(), model, before, after })
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Quantiles {0, 50, 80, 90, 95, 99}% of the positive scores, then +∞.
pub fn default_alpha_grid(scores: &[f64]) -> Vec<f64> {
    let mut pos: Vec<f64> = scores.iter().copied().filter(|&s| s > 0.0).collect();
    pos.sort_by(f64::total_cmp);
    let mut grid: Vec<f64> = if pos.is_empty() {
        Vec::new()
    } else {
        [0.0, 0.5, 0.8, 0.9, 0.95, 0.99].iter().map(|&q| quantile(&pos, q)).collect()
    };
    grid.dedup();
    grid.push(f64::INFINITY);
    grid
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    /// `None` encodes α = +∞.
    pub alpha: Option<f64>,
    pub removed: usize,
    pub valid_loss: f64,
    pub test_loss: f64,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub entries: Vec<SweepEntry>,
    pub selected: usize,
    pub best: PruneResult,
    pub erm: Losses,
}

fn alpha_opt(a: f64) -> Option<f64> {
    a.is_finite().then_some(a)
}

/// Runs one retraining job per grid value (+∞ is always included and reuses
/// `baseline`), then keeps the lowest validation loss; ties go to the job
/// removing less.
fn sweep<F>(bundle: &DatasetBundle, grid: &[f64], baseline: &EndModel, cfg: &TrainConfig, select: F) -> Result<SweepResult>
where
    F: Fn(f64) -> Result<(Vec<Term>, LabelGrid, Vec<usize>)> + Sync,
{
    if grid.is_empty() {
        return Err(Error::domain("alpha grid is empty"));
    }
    if grid.iter().any(|a| a.is_nan()) {
        return Err(Error::domain("alpha grid contains NaN"));
    }
    let mut grid = grid.to_vec();
    if !grid.contains(&f64::INFINITY) {
        grid.push(f64::INFINITY);
    }
    let erm = holdout_losses(baseline, bundle)?;
    let jobs: Vec<Result<PruneResult>> = grid
        .par_iter()
        .map(|&alpha| {
            let (terms, y, emptied) = select(alpha)?;
            let (model, after) = if terms.is_empty() { (baseline.clone(), erm) } else { retrain(bundle, &y, cfg)? };
            Ok(PruneResult { alpha: alpha_opt(alpha), discarded: terms, emptied_points: emptied, model, before: erm, after })
        })
        .collect();
    let results: Vec<PruneResult> = jobs.into_iter().collect::<Result<_>>()?;
    let entries: Vec<SweepEntry> = results
        .iter()
        .map(|r| SweepEntry { alpha: r.alpha, removed: r.discarded.len(), valid_loss: r.after.valid, test_loss: r.after.test })
        .collect();
    let selected = (0..entries.len())
        .min_by(|&a, &b| {
            entries[a]
                .valid_loss
                .total_cmp(&entries[b].valid_loss)
                .then(entries[a].removed.cmp(&entries[b].removed))
                .then(a.cmp(&b))
        })
        .expect("grid is nonempty");
    let best = results.into_iter().nth(selected).expect("selected index is in range");
    Ok(SweepResult { entries, selected, best, erm })
}

/// Source-aware pruning: discards the terms of `S₋(α)` for every α and keeps the best on validation.
pub fn sweep_alpha(
    bundle: &DatasetBundle,
    w: &WTensor,
    t: &InfluenceTensor,
    grid: &[f64],
    baseline: &EndModel,
    cfg: &TrainConfig,
) -> Result<SweepResult> {
    sweep(bundle, grid, baseline, cfg, |alpha| {
        let terms = select_harmful_terms(t, alpha)?;
        let (y, emptied) = pruned_labels(w, bundle, &terms)?;
        Ok((terms, y, emptied))
    })
}

/// Point-level baseline: drops whole training points whose influence exceeds α.
pub fn sweep_data_if(
    bundle: &DatasetBundle,
    w: &WTensor,
    point_scores: &[f64],
    grid: &[f64],
    baseline: &EndModel,
    cfg: &TrainConfig,
) -> Result<SweepResult> {
    if point_scores.len() != bundle.train.votes.n() {
        return Err(Error::shape("one score per training point is required"));
    }
    let base = infer_labels(w, &bundle.train.votes)?.into_grid();
    let c = w.num_classes();
    sweep(bundle, grid, baseline, cfg, |alpha| {
        let mut y = base.clone();
        let mut terms = Vec::new();
        let mut emptied = Vec::new();
        for (i, &s) in point_scores.iter().enumerate() {
            if s != 0.0 && s > alpha {
                y.row_mut(i).fill(0.0);
                emptied.push(i);
                terms.extend((0..c).map(|k| (i, usize::MAX, k)));
            }
        }
        Ok((terms, y, emptied))
    })
}

#[derive(Debug, Clone)]
pub struct GroupIfResult {
    /// LFs sorted from most to least harmful.
    pub order: Vec<usize>,
    /// Losses after removing the first `k` LFs of `order`, for k = 0, 1, ….
    pub entries: Vec<Losses>,
    pub selected_k: usize,
    pub model: EndModel,
    pub erm: Losses,
}

/// Removes the `k` LFs with the largest (most harmful) scores, for every
/// `k ≤ min(M − 1, k_max)`, refits the labels and retrains; `k` is chosen on
/// validation loss.
pub fn group_if_lf_removal(
    bundle: &DatasetBundle,
    w: &WTensor,
    lf_scores: &[f64],
    k_max: usize,
    baseline: &EndModel,
    cfg: &TrainConfig,
) -> Result<GroupIfResult> {
    let m = w.num_lfs();
    if lf_scores.len() != m {
        return Err(Error::shape("one score per LF is required"));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| lf_scores[b].total_cmp(&lf_scores[a]).then(a.cmp(&b)));
    let kmax = k_max.min(m.saturating_sub(1));
    let erm = holdout_losses(baseline, bundle)?;
    let jobs: Vec<Result<(EndModel, Losses)>> = (0..=kmax)
        .into_par_iter()
        .map(|k| {
            if k == 0 {
                return Ok((baseline.clone(), erm));
            }
            let drop = &order[..k];
            let votes = bundle.train.votes.with_abstained(drop);
            let y = infer_labels(&w.without_lfs(drop), &votes)?.into_grid();
            retrain(bundle, &y, cfg)
        })
        .collect();
    let runs: Vec<(EndModel, Losses)> = jobs.into_iter().collect::<Result<_>>()?;
    let entries: Vec<Losses> = runs.iter().map(|r| r.1).collect();
    let selected_k = (0..entries.len())
        .min_by(|&a, &b| entries[a].valid.total_cmp(&entries[b].valid).then(a.cmp(&b)))
        .expect("k = 0 is always present");
    let model = runs.into_iter().nth(selected_k).expect("selected k is in range").0;
    Ok(GroupIfResult { order, entries, selected_k, model, erm })
}

/// A training component whose removal is measured by retraining.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Component {
    Point(usize),
    Lf(usize),
}

/// Validation-loss change after removing every loss term of `component`
/// (denominators frozen) and retraining.
pub fn actual_effect_retrain(
    bundle: &DatasetBundle,
    w: &WTensor,
    component: Component,
    baseline: &EndModel,
    cfg: &TrainConfig,
) -> Result<f64> {
    let before = mean_log_loss(baseline, &bundle.valid.features, &bundle.valid.gold)?;
    let mut y = infer_labels(w, &bundle.train.votes)?.into_grid();
    match component {
        Component::Point(i) => {
            if i >= y.n() {
                return Err(Error::shape(format!("point {i} out of range")));
            }
            y.row_mut(i).fill(0.0);
        }
        Component::Lf(j) => {
            if j >= w.num_lfs() {
                return Err(Error::shape(format!("LF {j} out of range")));
            }
            let c = w.num_classes();
            let terms: Vec<Term> = (0..y.n()).flat_map(|i| (0..c).map(move |k| (i, j, k))).collect();
            y = pruned_labels(w, bundle, &terms)?.0;
        }
    }
    let model = train_end_model(&bundle.train.features, &y, cfg)?;
    Ok(mean_log_loss(&model, &bundle.valid.features, &bundle.valid.gold)? - before)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::influence::{IhvpSolverConfig, TensorMeta};
    use crate::labelmodel::fit_majority_vote;
    use crate::wsdata::{generate_synthetic, SyntheticSpec};

    fn bundle() -> DatasetBundle {
        generate_synthetic(&SyntheticSpec {
            n_train: 40,
            n_valid: 20,
            n_test: 20,
            dim: 2,
            num_classes: 2,
            class_separation: 2.0,
            lf_accuracy: vec![0.9, 0.8, 0.6],
            lf_coverage: vec![0.8; 3],
            seed: 3,
        })
        .unwrap()
    }

    fn cfg() -> TrainConfig {
        TrainConfig { epochs: 200, ..Default::default() }
    }

    fn tensor(scores: Vec<f64>, n: usize, m: usize, c: usize) -> InfluenceTensor {
        let meta = TensorMeta {
            method: Method::Rw,
            holdout_id: "v".into(),
            solver: IhvpSolverConfig::default(),
            n,
            m,
            c,
            has_unattributed: false,
        };
        InfluenceTensor::new(meta, scores, None).unwrap()
    }

    #[test]
    fn selection_thresholds() {
        let t = tensor(vec![0.5, 0.0, -0.2, 0.1], 1, 2, 2);
        assert!(select_harmful_terms(&t, f64::INFINITY).unwrap().is_empty());
        assert_eq!(select_harmful_terms(&t, f64::NEG_INFINITY).unwrap(), vec![(0, 0, 0), (0, 1, 0), (0, 1, 1)]);
        assert_eq!(select_harmful_terms(&t, 0.0).unwrap(), vec![(0, 0, 0), (0, 1, 1)]);
    }

    #[test]
    fn empty_discard_is_bit_exact() {
        let b = bundle();
        let w = fit_majority_vote(&b.train.votes).unwrap();
        let y = infer_labels(&w, &b.train.votes).unwrap().into_grid();
        let base = train_end_model(&b.train.features, &y, &cfg()).unwrap();
        let r = discard_and_retrain(&b, &w, &[], &base, &cfg()).unwrap();
        assert_eq!(r.model.theta(), base.theta());
        assert_eq!(r.before, r.after);
    }

    #[test]
    fn dropping_an_lf_matches_group_removal_loss() {
        let b = bundle();
        let w = fit_majority_vote(&b.train.votes).unwrap();
        let y = infer_labels(&w, &b.train.votes).unwrap().into_grid();
        let model = train_end_model(&b.train.features, &y, &cfg()).unwrap();
        let j = 1;
        let terms: Vec<Term> = (0..40).flat_map(|i| (0..2).map(move |k| (i, j, k))).collect();
        let (yp, _) = pruned_labels(&w, &b, &terms).unwrap();
        // objective minus LF j's decomposed terms
        let mut expected = 0.0;
        let mut got = 0.0;
        for i in 0..40 {
            got += crate::endmodel::noise_aware_loss(&model, b.train.features.row(i), yp.row(i)).unwrap();
            expected += crate::endmodel::noise_aware_loss(&model, b.train.features.row(i), y.row(i)).unwrap();
            for k in 0..2 {
                expected -= crate::endmodel::per_term_loss(&model, &w, &b.train.votes, &b.train.features, i, j, k).unwrap();
            }
        }
        assert!((got - expected).abs() < 1e-10);
    }

    #[test]
    fn emptied_points_are_flagged() {
        let b = bundle();
        let w = fit_majority_vote(&b.train.votes).unwrap();
        let terms: Vec<Term> = (0..3).flat_map(|j| (0..2).map(move |k| (0, j, k))).collect();
        let (y, emptied) = pruned_labels(&w, &b, &terms).unwrap();
        if b.train.votes.row(0).iter().any(|&v| v > 0) {
            assert_eq!(emptied, vec![0]);
            assert!(y.row(0).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn default_grid_contract() {
        let g = default_alpha_grid(&[-1.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(g[0], 1.0);
        assert_eq!(g[1], 3.0);
        assert!((g[2] - 4.2).abs() < 1e-12);
        assert_eq!(*g.last().unwrap(), f64::INFINITY);
        assert_eq!(default_alpha_grid(&[-1.0]), vec![f64::INFINITY]);
    }

    #[test]
    fn infinite_grid_returns_erm() {
        let b = bundle();
        let w = fit_majority_vote(&b.train.votes).unwrap();
        let y = infer_labels(&w, &b.train.votes).unwrap().into_grid();
        let base = train_end_model(&b.train.features, &y, &cfg()).unwrap();
        let t = tensor(vec![1.0; 40 * 3 * 2], 40, 3, 2);
        let r = sweep_alpha(&b, &w, &t, &[f64::INFINITY], &base, &cfg()).unwrap();
        assert_eq!(r.best.model.theta(), base.theta());
        assert!(sweep_alpha(&b, &w, &t, &[], &base, &cfg()).is_err());
        let r = sweep_alpha(&b, &w, &t, &[0.5, f64::INFINITY], &base, &cfg()).unwrap();
        assert!(r.best.after.valid <= r.erm.valid);
    }

    #[test]
    fn lf_removal_equals_abstaining() {
        let b = bundle();
        let w = fit_majority_vote(&b.train.votes).unwrap();
        let a = infer_labels(&w.without_lfs(&[1]), &b.train.votes).unwrap();
        let v = b.train.votes.with_abstained(&[1]);
        let c = infer_labels(&w, &v).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn group_if_k_zero_is_erm() {
        let b = bundle();
        let w = fit_majority_vote(&b.train.votes).unwrap();
        let y = infer_labels(&w, &b.train.votes).unwrap().into_grid();
        let base = train_end_model(&b.train.features, &y, &cfg()).unwrap();
        let r = group_if_lf_removal(&b, &w, &[0.1, 0.3, -0.2], 0, &base, &cfg()).unwrap();
        assert_eq!(r.selected_k, 0);
        assert_eq!(r.model.theta(), base.theta());
        let r = group_if_lf_removal(&b, &w, &[0.1, 0.3, -0.2], 10, &base, &cfg()).unwrap();
        assert_eq!(r.order, vec![1, 0, 2]);
        assert_eq!(r.entries.len(), 3);
    }

    #[test]
    fn silent_lf_has_no_effect() {
        let b = bundle();
        let votes = b.train.votes.with_abstained(&[2]);
        let b = DatasetBundle::new(
            crate::wsdata::TrainSplit { votes, ..b.train.clone() },
            b.valid.clone(),
            b.test.clone(),
            b.seed,
        )
        .unwrap();
        let w = fit_majority_vote(&b.train.votes).unwrap();
        let y = infer_labels(&w, &b.train.votes).unwrap().into_grid();
        let base = train_end_model(&b.train.features, &y, &cfg()).unwrap();
        let e = actual_effect_retrain(&b, &w, Component::Lf(2), &base, &cfg()).unwrap();
        assert!(e.abs() <= 1e-9);
    }
}
