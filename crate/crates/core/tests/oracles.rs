//! Behavioral oracles on synthetic data with planted structure.

use rayon::prelude::*;

use sourcetrace::apps::{default_alpha_grid, move_and_retrain, sweep_alpha};
use sourcetrace::endmodel::{train_end_model, EndModel, TrainConfig};
use sourcetrace::influence::{aggregate_influence, Holdout, IhvpSolverConfig, InfluenceEngine, InfluenceTensor, Level};
use sourcetrace::labelmodel::{fit_majority_vote, infer_labels, WTensor};
use sourcetrace::wsdata::{generate_synthetic, DatasetBundle, SyntheticSpec};

struct Setup {
    bundle: DatasetBundle,
    w: WTensor,
    model: EndModel,
    rw: InfluenceTensor,
    wm: InfluenceTensor,
}

fn setup(spec: &SyntheticSpec) -> Setup {
    let bundle = generate_synthetic(spec).unwrap();
    let votes = &bundle.train.votes;
    let w = fit_majority_vote(votes).unwrap();
    let y = infer_labels(&w, votes).unwrap().into_grid();
    let model = train_end_model(&bundle.train.features, &y, &TrainConfig::default()).unwrap();
    let e = InfluenceEngine::new(&model, &bundle.train.features, &y, IhvpSolverConfig::exact(1e-3)).unwrap();
    let h = Holdout::new("valid", bundle.valid.features.clone(), bundle.valid.gold.clone()).unwrap();
    let dir = e.direction(&h).unwrap();
    let rw = e.rw(&dir, &w, votes).unwrap();
    let wm = e.wm(&dir, &w, votes).unwrap();
    Setup { bundle, w, model, rw, wm }
}

fn planted_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n_train: 200,
        n_valid: 100,
        n_test: 100,
        dim: 5,
        num_classes: 3,
        class_separation: 2.5,
        lf_accuracy: vec![0.85, 0.8, 0.8, 0.75, 0.75, 0.7, 1.0 / 3.0],
        lf_coverage: vec![0.8; 7],
        seed,
    }
}

#[test]
fn planted_chance_lf_ranks_most_harmful() {
    let hits: usize = (0..20u64)
        .into_par_iter()
        .map(|seed| {
            let s = setup(&planted_spec(seed));
            let lf = aggregate_influence(&s.rw, Level::Lf, None).unwrap();
            usize::from(lf.keys[lf.ranking()[0]] == vec![6])
        })
        .sum();
    assert!(hits >= 19, "planted LF ranked first on {hits}/20 seeds");
}

#[test]
fn alpha_sweep_never_above_erm_on_validation() {
    for seed in 0..3 {
        let s = setup(&SyntheticSpec::standard_fixture(seed));
        let grid = default_alpha_grid(s.rw.as_slice());
        let r = sweep_alpha(&s.bundle, &s.w, &s.rw, &grid, &s.model, &TrainConfig::default()).unwrap();
        assert!(r.best.after.valid <= r.erm.valid + 1e-12, "seed {seed}");
        assert!(r.entries.iter().any(|e| e.alpha.is_none() && e.removed == 0));
    }
}

#[test]
fn moving_most_harmful_wm_terms_keeps_validation_loss() {
    for seed in 0..3 {
        let s = setup(&SyntheticSpec::standard_fixture(seed));
        let mut pos: Vec<f64> = s.wm.as_slice().iter().copied().filter(|v| *v > 0.0).collect();
        pos.sort_by(f64::total_cmp);
        let alpha = pos[(pos.len() * 9) / 10];
        let (n, m, c) = s.wm.shape();
        let terms: Vec<(usize, usize, usize)> = (0..n)
            .flat_map(|i| (0..m).flat_map(move |j| (0..c).map(move |k| (i, j, k))))
            .filter(|&(i, j, k)| s.wm.get(i, j, k) > alpha)
            .collect();
        assert!(!terms.is_empty());
        let r = move_and_retrain(&s.bundle, &s.w, &terms, &s.model, &TrainConfig::default()).unwrap();
        assert!(
            r.after.valid <= r.before.valid + 0.01,
            "seed {seed}: valid {} -> {}",
            r.before.valid,
            r.after.valid
        );
    }
}
