//! Pipeline stages. Each reads its inputs from the data and output
//! directories and writes its artifacts to the output directory.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;
use sourcetrace::apps::{
    actual_effect_retrain, default_alpha_grid, discrepancy_scores, end_model_probs, explain, group_if_lf_removal,
    holdout_losses, knn_discrepancy_scores, mislabel_report, mislabel_scores, spearman, sweep_alpha, sweep_data_if,
    Component, SweepResult,
};
use sourcetrace::endmodel::{accuracy, objective, train_end_model, EndModel};
use sourcetrace::influence::{
    aggregate_influence, relatif, relatif_scores, Aggregate, Holdout, HoldoutDirection, InfluenceEngine,
    InfluenceTensor, Level,
};
use sourcetrace::labelmodel::{
    approximate_identity, fit_dawid_skene, fit_majority_vote, fit_metal, infer_labels, LabelGrid, Sigma, WTensor,
};
use sourcetrace::wsdata::{load_bundle, save_bundle, DatasetBundle, SyntheticSpec};
use sourcetrace::Error;

use crate::config::{LabelModelKind, MethodChoice, RunConfig};

pub const LABEL_MODEL: &str = "label_model.json";
pub const LABEL_MODEL_EXP: &str = "label_model_exp.json";
pub const END_MODEL: &str = "end_model.json";

/// Files written by a stage and the lines it contributes to the summary.
#[derive(Debug, Default)]
pub struct StageOutput {
    pub files: Vec<String>,
    pub summary: Vec<String>,
}

impl StageOutput {
    fn line(&mut self, s: impl Into<String>) {
        self.summary.push(s.into());
    }
}

pub fn load_data(cfg: &RunConfig) -> Result<DatasetBundle> {
    let dir = cfg
        .data_dir
        .as_ref()
        .ok_or_else(|| Error::Domain("no dataset directory given; pass --data or set data.dir".into()))?;
    Ok(load_bundle(dir, cfg.classes, cfg.train.seed)?)
}

fn write_json<T: Serialize>(out: &Path, name: &str, value: &T, files: &mut StageOutput) -> Result<()> {
    let path = out.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    files.files.push(name.to_string());
    Ok(())
}

fn read_json<T: DeserializeOwned>(out: &Path, name: &str, what: &'static str, hint: &str) -> Result<T> {
    let path = out.join(name);
    if !path.exists() {
        return Err(anyhow!(Error::NotFound { what, path }).context(hint.to_string()));
    }
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| anyhow!(Error::Serde(e)).context(format!("parsing {}", path.display())))
}

fn load_label_model(out: &Path) -> Result<WTensor> {
    read_json(out, LABEL_MODEL, "label model", "run `sourcetrace fit-lm` first")
}

fn load_end_model(out: &Path) -> Result<EndModel> {
    read_json(out, END_MODEL, "end model", "run `sourcetrace train` first")
}

fn training_labels(w: &WTensor, bundle: &DatasetBundle) -> Result<LabelGrid> {
    Ok(infer_labels(w, &bundle.train.votes)?.into_grid())
}

fn sigma_name(s: Sigma) -> &'static str {
    match s {
        Sigma::Identity => "identity",
        Sigma::Exponential => "exponential",
    }
}

pub fn fit_lm(cfg: &RunConfig) -> Result<StageOutput> {
    let bundle = load_data(cfg)?;
    let votes = &bundle.train.votes;
    let mut out = StageOutput::default();
    let (w, report) = match cfg.label_model {
        LabelModelKind::Mv => (fit_majority_vote(votes)?, json!({ "kind": "mv" })),
        LabelModelKind::Ds => {
            let (w, r) = fit_dawid_skene(votes, &cfg.em)?;
            (w, json!({ "kind": "ds", "em": r }))
        }
        LabelModelKind::Metal => {
            let (ds, r) = fit_dawid_skene(votes, &cfg.em)?;
            let post = infer_labels(&ds, votes)?;
            (fit_metal(votes, &post)?, json!({ "kind": "metal", "posterior_em": r }))
        }
    };
    let stale = cfg.out_dir.join(LABEL_MODEL_EXP);
    if stale.exists() {
        std::fs::remove_file(&stale).with_context(|| format!("removing {}", stale.display()))?;
    }
    write_json(&cfg.out_dir, LABEL_MODEL, &w, &mut out)?;
    write_json(&cfg.out_dir, "label_model_report.json", &report, &mut out)?;
    let kind = report["kind"].as_str().unwrap_or_default().to_string();
    out.line(format!("label model: {kind} ({}-σ, M={}, C={})", sigma_name(w.sigma()), w.num_lfs(), w.num_classes()));
    Ok(out)
}

pub fn approx(cfg: &RunConfig) -> Result<StageOutput> {
    let bundle = load_data(cfg)?;
    let w = load_label_model(&cfg.out_dir)?;
    if w.sigma() == Sigma::Identity {
        bail!(Error::Domain("label model is already identity-σ; nothing to approximate".into()));
    }
    let (approx, report) = approximate_identity(&w, &bundle.train.votes, &cfg.approx)?;
    let mut out = StageOutput::default();
    write_json(&cfg.out_dir, LABEL_MODEL_EXP, &w, &mut out)?;
    write_json(&cfg.out_dir, LABEL_MODEL, &approx, &mut out)?;
    write_json(&cfg.out_dir, "approx_report.json", &report, &mut out)?;
    out.line(format!(
        "approximation objective: {:.6} -> {:.6} ({} iterations, mean L1 {:.4})",
        report.initial_objective, report.final_objective, report.iterations, report.mean_l1
    ));
    Ok(out)
}

pub fn train(cfg: &RunConfig) -> Result<StageOutput> {
    let bundle = load_data(cfg)?;
    let w = load_label_model(&cfg.out_dir)?;
    let y = training_labels(&w, &bundle)?;
    let model = train_end_model(&bundle.train.features, &y, &cfg.train)?;
    let losses = holdout_losses(&model, &bundle)?;
    let train_loss = objective(&model, &bundle.train.features, &y)?;
    let report = json!({
        "train_objective": train_loss,
        "valid_loss": losses.valid,
        "test_loss": losses.test,
        "valid_accuracy": accuracy(&model, &bundle.valid.features, &bundle.valid.gold)?,
        "test_accuracy": accuracy(&model, &bundle.test.features, &bundle.test.gold)?,
        "meta": model.meta(),
    });
    let mut out = StageOutput::default();
    write_json(&cfg.out_dir, END_MODEL, &model, &mut out)?;
    write_json(&cfg.out_dir, "train_report.json", &report, &mut out)?;
    out.line(format!("final training loss: {train_loss:.6} (test loss {:.6})", losses.test));
    Ok(out)
}

struct Loaded {
    bundle: DatasetBundle,
    w: WTensor,
    model: EndModel,
    y: LabelGrid,
}

fn load_all(cfg: &RunConfig) -> Result<Loaded> {
    let bundle = load_data(cfg)?;
    let w = load_label_model(&cfg.out_dir)?;
    let model = load_end_model(&cfg.out_dir)?;
    let y = training_labels(&w, &bundle)?;
    if model.dim() != bundle.dim() || model.num_classes() != bundle.num_classes() {
        bail!(Error::Shape("stored end model does not match the dataset; rerun `sourcetrace train`".into()));
    }
    Ok(Loaded { bundle, w, model, y })
}

fn validation_holdout(bundle: &DatasetBundle) -> Result<Holdout> {
    Ok(Holdout::new("valid", bundle.valid.features.clone(), bundle.valid.gold.clone())?)
}

/// Source-aware tensor for the configured method; `auto` picks rw for
/// identity label models and wm otherwise.
fn sif_tensor(
    engine: &InfluenceEngine<'_>,
    dir: &HoldoutDirection,
    w: &WTensor,
    l: &Loaded,
    method: MethodChoice,
    use_relatif: bool,
) -> Result<InfluenceTensor> {
    let votes = &l.bundle.train.votes;
    let method = match (method, w.sigma()) {
        (MethodChoice::Auto, Sigma::Identity) => MethodChoice::Rw,
        (MethodChoice::Auto, Sigma::Exponential) => MethodChoice::Wm,
        (m, _) => m,
    };
    let t = match method {
        MethodChoice::Rw => {
            if w.sigma() != Sigma::Identity {
                bail!(Error::Domain(
                    "--method rw needs an identity label model; use --method rw-exp, or run `sourcetrace approx` and retrain"
                        .into()
                ));
            }
            engine.rw(dir, w, votes)?
        }
        MethodChoice::RwExp => {
            if w.sigma() != Sigma::Exponential {
                bail!(Error::Domain("--method rw-exp needs an exponential label model; use --method rw".into()));
            }
            engine.rw_exp(dir, w, votes)?
        }
        MethodChoice::Wm => engine.wm(dir, w, votes)?,
        MethodChoice::Ordinary | MethodChoice::Auto => unreachable!("resolved above or handled by the caller"),
    };
    if !use_relatif {
        return Ok(t);
    }
    let selfinf = match method {
        MethodChoice::Rw => engine.self_rw(w, votes)?,
        MethodChoice::Wm => engine.self_wm(w, votes)?,
        _ => bail!(Error::Domain("--relatif is available for rw and wm only".into())),
    };
    Ok(relatif(&t, &selfinf)?)
}

fn top_lines(agg: &Aggregate, k: usize, label: &str) -> Vec<String> {
    agg.ranking()
        .into_iter()
        .take(k)
        .map(|p| {
            let key: Vec<String> = agg.keys[p].iter().map(|v| v.to_string()).collect();
            format!("  {label} {}: {:+.6e}", key.join(","), agg.scores[p])
        })
        .collect()
}

fn write_point_scores(path: &Path, scores: &[f64]) -> Result<()> {
    let mut body = String::from("i,score\n");
    for (i, s) in scores.iter().enumerate() {
        body.push_str(&format!("{i},{s:e}\n"));
    }
    std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

pub fn influence(cfg: &RunConfig) -> Result<StageOutput> {
    let l = load_all(cfg)?;
    let engine = InfluenceEngine::new(&l.model, &l.bundle.train.features, &l.y, cfg.solver.clone())?;
    let dir = engine.direction(&validation_holdout(&l.bundle)?)?;
    let mut out = StageOutput::default();
    if cfg.method == MethodChoice::Ordinary {
        let mut scores = engine.ordinary(&dir);
        let name = if cfg.relatif {
            scores = relatif_scores(&scores, &engine.self_ordinary()?)?;
            "influence_relatif_ordinary.csv"
        } else {
            "influence_ordinary.csv"
        };
        write_point_scores(&cfg.out_dir.join(name), &scores)?;
        out.files.push(name.into());
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        out.line("top harmful training points:");
        for &i in idx.iter().take(cfg.top) {
            out.line(format!("  point {i}: {:+.6e}", scores[i]));
        }
        return Ok(out);
    }
    let t = sif_tensor(&engine, &dir, &l.w, &l, cfg.method, cfg.relatif)?;
    let name = t.method().name();
    let csv = format!("influence_{name}.csv");
    t.write_csv(cfg.out_dir.join(&csv))?;
    out.files.push(csv);
    write_json(&cfg.out_dir, &format!("influence_{name}.meta.json"), t.meta(), &mut out)?;
    for (level, tag) in [(Level::Lf, "lf"), (Level::Data, "data"), (Level::Vote, "vote")] {
        let file = format!("influence_{name}_{tag}.csv");
        aggregate_influence(&t, level, Some(&l.bundle.train.votes))?.write_csv(cfg.out_dir.join(&file))?;
        out.files.push(file);
    }
    out.line(format!("influence ({name}), top {} harmful LFs:", cfg.top));
    let lf = aggregate_influence(&t, Level::Lf, None)?;
    out.summary.extend(top_lines(&lf, cfg.top, "LF"));
    Ok(out)
}

pub fn mislabels(cfg: &RunConfig) -> Result<StageOutput> {
    let l = load_all(cfg)?;
    let votes = &l.bundle.train.votes;
    let gold = l.bundle.train.gold.as_ref().ok_or_else(|| {
        Error::NotFound { what: "train gold labels", path: cfg.data_dir.clone().unwrap_or_default().join("train_gold.csv") }
    })?;
    let engine = InfluenceEngine::new(&l.model, &l.bundle.train.features, &l.y, cfg.solver.clone())?;
    let dir = engine.direction(&validation_holdout(&l.bundle)?)?;
    let method = if cfg.method == MethodChoice::Ordinary { MethodChoice::Auto } else { cfg.method };
    let t = sif_tensor(&engine, &dir, &l.w, &l, method, cfg.relatif)?;
    let reports = vec![
        mislabel_report("SIF", &mislabel_scores(&t, votes)?, votes, gold)?,
        mislabel_report("LM", &discrepancy_scores(votes, &l.y)?, votes, gold)?,
        mislabel_report("EM", &discrepancy_scores(votes, &end_model_probs(&l.model, &l.bundle.train.features)?)?, votes, gold)?,
        mislabel_report(
            "KNN",
            &knn_discrepancy_scores(votes, &l.bundle.train.features, &l.bundle.valid.features, &l.bundle.valid.gold, cfg.knn_k)?,
            votes,
            gold,
        )?,
    ];
    let mut out = StageOutput::default();
    write_json(&cfg.out_dir, "mislabels.json", &json!({ "tensor": t.method().name(), "reports": reports }), &mut out)?;
    out.line("LF mislabel detection, macro AP:");
    for r in &reports {
        let ap = r.macro_ap.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        out.line(format!("  {:<4} {ap}", r.method));
    }
    Ok(out)
}

fn sweep_json(r: &SweepResult) -> serde_json::Value {
    let sel = &r.entries[r.selected];
    json!({
        "entries": r.entries,
        "selected": {
            "alpha": sel.alpha,
            "removed": sel.removed,
            "valid_loss": sel.valid_loss,
            "test_loss": sel.test_loss,
            "emptied_points": r.best.emptied_points,
        },
    })
}

fn alpha_text(a: Option<f64>) -> String {
    a.map_or("+inf".to_string(), |v| format!("{v:.6e}"))
}

pub fn prune(cfg: &RunConfig) -> Result<StageOutput> {
    let l = load_all(cfg)?;
    if l.w.sigma() != Sigma::Identity {
        bail!(Error::Domain(
            "pruning discards decomposed loss terms and needs an identity label model; run `sourcetrace approx` and retrain".into()
        ));
    }
    let engine = InfluenceEngine::new(&l.model, &l.bundle.train.features, &l.y, cfg.solver.clone())?;
    let dir = engine.direction(&validation_holdout(&l.bundle)?)?;
    let t = sif_tensor(&engine, &dir, &l.w, &l, MethodChoice::Rw, cfg.relatif)?;
    let mut point = engine.ordinary(&dir);
    if cfg.relatif {
        point = relatif_scores(&point, &engine.self_ordinary()?)?;
    }
    let sif_grid = cfg.alpha_grid.clone().unwrap_or_else(|| default_alpha_grid(t.as_slice()));
    let if_grid = cfg.alpha_grid.clone().unwrap_or_else(|| default_alpha_grid(&point));
    let sif = sweep_alpha(&l.bundle, &l.w, &t, &sif_grid, &l.model, &cfg.train)?;
    let base = sweep_data_if(&l.bundle, &l.w, &point, &if_grid, &l.model, &cfg.train)?;
    let mut out = StageOutput::default();
    let report = json!({
        "tensor": t.method().name(),
        "erm": sif.erm,
        "source_aware": sweep_json(&sif),
        "data_level": sweep_json(&base),
    });
    write_json(&cfg.out_dir, "prune.json", &report, &mut out)?;
    let s = &sif.entries[sif.selected];
    let b = &base.entries[base.selected];
    out.line(format!(
        "pruning: selected α = {} ({} terms removed), test loss {:.6} -> {:.6}",
        alpha_text(s.alpha),
        s.removed,
        sif.erm.test,
        s.test_loss
    ));
    out.line(format!(
        "  data-level IF baseline: α = {} ({} points removed), test loss {:.6}",
        alpha_text(b.alpha),
        base.best.emptied_points.len(),
        b.test_loss
    ));
    Ok(out)
}

fn lf_scores(t: &InfluenceTensor) -> Result<Vec<f64>> {
    let agg = aggregate_influence(t, Level::Lf, None)?;
    let mut v = vec![0.0; t.shape().1];
    for (k, s) in agg.keys.iter().zip(&agg.scores) {
        v[k[0]] = *s;
    }
    Ok(v)
}

pub fn group_if(cfg: &RunConfig) -> Result<StageOutput> {
    let l = load_all(cfg)?;
    let engine = InfluenceEngine::new(&l.model, &l.bundle.train.features, &l.y, cfg.solver.clone())?;
    let dir = engine.direction(&validation_holdout(&l.bundle)?)?;
    let method = if cfg.method == MethodChoice::Ordinary { MethodChoice::Auto } else { cfg.method };
    let t = sif_tensor(&engine, &dir, &l.w, &l, method, cfg.relatif)?;
    let r = group_if_lf_removal(&l.bundle, &l.w, &lf_scores(&t)?, cfg.k_max, &l.model, &cfg.train)?;
    let mut out = StageOutput::default();
    let report = json!({
        "tensor": t.method().name(),
        "order": r.order,
        "entries": r.entries,
        "selected_k": r.selected_k,
        "removed_lfs": &r.order[..r.selected_k],
    });
    write_json(&cfg.out_dir, "group_if.json", &report, &mut out)?;
    out.line(format!(
        "group IF: removing {} LF(s) {:?}, test loss {:.6} -> {:.6}",
        r.selected_k,
        &r.order[..r.selected_k],
        r.erm.test,
        r.entries[r.selected_k].test
    ));
    Ok(out)
}

pub fn correlate(cfg: &RunConfig) -> Result<StageOutput> {
    let l = load_all(cfg)?;
    let engine = InfluenceEngine::new(&l.model, &l.bundle.train.features, &l.y, cfg.solver.clone())?;
    let dir = engine.direction(&validation_holdout(&l.bundle)?)?;
    let method = if cfg.method == MethodChoice::Ordinary { MethodChoice::Auto } else { cfg.method };
    let t = sif_tensor(&engine, &dir, &l.w, &l, method, false)?;
    let agg = aggregate_influence(&t, Level::Data, None)?;
    let ordinary = engine.ordinary(&dir);
    let data_rho = spearman(&agg.scores, &ordinary)?;
    let estimated = lf_scores(&t)?;
    let effects: Vec<f64> = (0..l.w.num_lfs())
        .into_par_iter()
        .map(|j| actual_effect_retrain(&l.bundle, &l.w, Component::Lf(j), &l.model, &cfg.train).map(|d| -d))
        .collect::<sourcetrace::Result<_>>()?;
    let lf_rho = spearman(&estimated, &effects)?;
    let mut out = StageOutput::default();
    let report = json!({
        "tensor": t.method().name(),
        "data_level_vs_ordinary": data_rho,
        "lf_estimated": estimated,
        "lf_actual_loss_decrease": effects,
        "lf_estimated_vs_actual": lf_rho,
    });
    write_json(&cfg.out_dir, "correlate.json", &report, &mut out)?;
    let fmt = |r: &Option<sourcetrace::apps::Spearman>| r.as_ref().map_or("n/a".into(), |s| format!("{:.4}", s.rho));
    out.line(format!("Spearman, aggregated data influence vs ordinary IF: {}", fmt(&data_rho)));
    out.line(format!("Spearman, estimated vs retrained LF effects: {}", fmt(&lf_rho)));
    Ok(out)
}

pub fn explain_point(cfg: &RunConfig, index: usize) -> Result<StageOutput> {
    let l = load_all(cfg)?;
    let engine = InfluenceEngine::new(&l.model, &l.bundle.train.features, &l.y, cfg.solver.clone())?;
    let r = explain(&engine, &l.w, &l.bundle.train.votes, &l.bundle.test, index, cfg.top)?;
    let mut out = StageOutput::default();
    write_json(&cfg.out_dir, &format!("explain_{index}.json"), &r, &mut out)?;
    out.line(format!(
        "test point {index}: gold {} predicted {} (loss {:.4}), {} scores",
        r.gold + 1,
        r.predicted + 1,
        r.loss,
        r.method
    ));
    for (label, list) in [("point", &r.top_points), ("LF", &r.top_lfs), ("vote", &r.top_votes)] {
        if let Some(a) = list.first() {
            let key: Vec<String> = a.index.iter().map(|v| v.to_string()).collect();
            out.line(format!("  most responsible {label}: {} ({:+.6e})", key.join(","), a.score));
        }
    }
    Ok(out)
}

/// Seeds of the acceptance preset.
pub const ACCEPTANCE_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Writes a preset corpus under `out`. `acceptance` writes one directory per
/// seed; `demo` writes one dataset plus a ready-to-run `demo.json`.
pub fn synth(preset: &str, out: &Path) -> Result<Vec<PathBuf>> {
    let mkdir = |p: &Path| std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()));
    let write_spec = |dir: &Path, spec: &SyntheticSpec| -> Result<()> {
        let p = dir.join("spec.json");
        std::fs::write(&p, serde_json::to_string_pretty(spec)? + "\n").with_context(|| format!("writing {}", p.display()))
    };
    let mut dirs = Vec::new();
    match preset {
        "acceptance" => {
            for seed in ACCEPTANCE_SEEDS {
                let dir = out.join(format!("seed_{seed}"));
                mkdir(&dir)?;
                let spec = SyntheticSpec::standard_fixture(seed);
                save_bundle(&dir, &sourcetrace::wsdata::generate_synthetic(&spec)?)?;
                write_spec(&dir, &spec)?;
                dirs.push(dir);
            }
        }
        "demo" => {
            let data = out.join("data");
            mkdir(&data)?;
            let spec = SyntheticSpec::standard_fixture(0);
            save_bundle(&data, &sourcetrace::wsdata::generate_synthetic(&spec)?)?;
            write_spec(&data, &spec)?;
            let cfg = json!({ "data.dir": "data", "output.dir": "run", "label_model.kind": "mv", "app.kind": "prune" });
            let p = out.join("demo.json");
            std::fs::write(&p, serde_json::to_string_pretty(&cfg)? + "\n")
                .with_context(|| format!("writing {}", p.display()))?;
            dirs.push(data);
        }
        other => bail!(Error::Domain(format!("unknown preset {other:?}; expected acceptance or demo"))),
    }
    Ok(dirs)
}
