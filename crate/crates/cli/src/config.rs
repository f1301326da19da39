//! Run configuration as a flat map of dotted keys.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde_json::Value;
use sourcetrace::endmodel::TrainConfig;
use sourcetrace::influence::{IhvpSolverConfig, LissaConfig, SolverKind};
use sourcetrace::labelmodel::{ApproxConfig, EmConfig};

pub type FlatConfig = BTreeMap<String, Value>;

/// Every accepted key with its meaning.
pub const KEYS: &[(&str, &str)] = &[
    ("data.dir", "dataset directory (train_votes.csv, train_features.csv, ...)"),
    ("data.classes", "class count when the vote file has no #classes directive"),
    ("output.dir", "artifact directory"),
    ("label_model.kind", "mv | ds | metal"),
    ("label_model.em_iters", "EM iteration cap"),
    ("label_model.em_tol", "EM posterior tolerance"),
    ("approx.enabled", "refit exponential label models as identity ones"),
    ("approx.iters", "approximation iteration cap"),
    ("approx.tol", "approximation step tolerance"),
    ("train.lr", "gradient-descent learning rate"),
    ("train.epochs", "gradient-descent epochs"),
    ("train.l2", "L2 penalty on the weights"),
    ("train.seed", "end-model seed"),
    ("train.polish_steps", "Newton polish step cap"),
    ("influence.method", "auto | ordinary | rw | rw-exp | wm"),
    ("influence.relatif", "normalize by self-influence"),
    ("influence.damping", "Hessian damping"),
    ("influence.solver", "exact | lissa"),
    ("influence.lissa.batch", "LiSSA batch size"),
    ("influence.lissa.depth", "LiSSA recursion depth"),
    ("influence.lissa.repeats", "LiSSA repeats"),
    ("influence.lissa.scale", "LiSSA scale"),
    ("influence.lissa.seed", "LiSSA seed"),
    ("app.kind", "application run by `run`: prune | mislabels | group-if | correlate | none"),
    ("app.alpha_grid", "pruning thresholds (default: quantiles of positive scores)"),
    ("app.knn_k", "neighbours for the KNN mislabel baseline"),
    ("app.k_max", "largest number of LFs removed by group-if"),
    ("app.top", "entries listed per ranking"),
    ("threads", "worker threads (default: SOURCETRACE_THREADS or all cores)"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelModelKind {
    Mv,
    Ds,
    Metal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodChoice {
    Auto,
    Ordinary,
    Rw,
    RwExp,
    Wm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppKind {
    Prune,
    Mislabels,
    GroupIf,
    Correlate,
    None,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub data_dir: Option<PathBuf>,
    pub classes: Option<usize>,
    pub out_dir: PathBuf,
    pub label_model: LabelModelKind,
    pub em: EmConfig,
    pub approximate: bool,
    pub approx: ApproxConfig,
    pub train: TrainConfig,
    pub method: MethodChoice,
    pub relatif: bool,
    pub solver: IhvpSolverConfig,
    pub app: AppKind,
    pub alpha_grid: Option<Vec<f64>>,
    pub knn_k: usize,
    pub k_max: usize,
    pub top: usize,
    pub threads: Option<usize>,
    /// The merged map the config was built from.
    pub flat: FlatConfig,
}

/// Reads a JSON object of dotted keys. A MANIFEST is accepted too; its
/// `config` member is used. Relative `data.dir` and `output.dir` values are
/// resolved against the file's directory.
pub fn read_config_file(path: &Path) -> Result<FlatConfig> {
    if !path.exists() {
        bail!(sourcetrace::Error::NotFound { what: "config", path: path.to_path_buf() });
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut v: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if let Some(inner) = v.get_mut("config").filter(|c| c.is_object()) {
        v = inner.take();
    }
    let Value::Object(map) = v else {
        bail!("{}: config must be a JSON object", path.display());
    };
    let base = path.parent().unwrap_or(Path::new(""));
    let mut flat: FlatConfig = map.into_iter().collect();
    for key in ["data.dir", "output.dir"] {
        if let Some(Value::String(p)) = flat.get(key) {
            let p = Path::new(p);
            if p.is_relative() {
                let joined = base.join(p).to_string_lossy().into_owned();
                flat.insert(key.to_string(), Value::String(joined));
            }
        }
    }
    Ok(flat)
}

fn take<T: DeserializeOwned>(map: &FlatConfig, key: &str) -> Result<Option<T>> {
    match map.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => serde_json::from_value(v.clone())
            .map(Some)
            .map_err(|e| anyhow!("config key {key}: {e}")),
    }
}

fn positive(key: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        bail!("config key {key} must be positive and finite, got {v}")
    }
}

impl RunConfig {
    pub fn from_flat(flat: FlatConfig) -> Result<Self> {
        for key in flat.keys() {
            if !KEYS.iter().any(|(k, _)| k == key) {
                bail!("unknown config key {key:?}");
            }
        }
        let label_model = match take::<String>(&flat, "label_model.kind")?.as_deref().unwrap_or("mv") {
            "mv" => LabelModelKind::Mv,
            "ds" => LabelModelKind::Ds,
            "metal" => LabelModelKind::Metal,
            other => bail!("label_model.kind must be mv, ds or metal, got {other:?}"),
        };
        let method = match take::<String>(&flat, "influence.method")?.as_deref().unwrap_or("auto") {
            "auto" => MethodChoice::Auto,
            "ordinary" => MethodChoice::Ordinary,
            "rw" => MethodChoice::Rw,
            "rw-exp" => MethodChoice::RwExp,
            "wm" => MethodChoice::Wm,
            other => bail!("influence.method must be auto, ordinary, rw, rw-exp or wm, got {other:?}"),
        };
        let app = match take::<String>(&flat, "app.kind")?.as_deref().unwrap_or("prune") {
            "prune" => AppKind::Prune,
            "mislabels" => AppKind::Mislabels,
            "group-if" => AppKind::GroupIf,
            "correlate" => AppKind::Correlate,
            "none" => AppKind::None,
            other => bail!("app.kind must be prune, mislabels, group-if, correlate or none, got {other:?}"),
        };
        let em_default = EmConfig::default();
        let em = EmConfig {
            max_iters: take(&flat, "label_model.em_iters")?.unwrap_or(em_default.max_iters),
            tol: positive("label_model.em_tol", take(&flat, "label_model.em_tol")?.unwrap_or(em_default.tol))?,
        };
        let ax = ApproxConfig::default();
        let approx = ApproxConfig {
            iters: take(&flat, "approx.iters")?.unwrap_or(ax.iters),
            tol: positive("approx.tol", take(&flat, "approx.tol")?.unwrap_or(ax.tol))?,
            ..ax
        };
        let td = TrainConfig::default();
        let train = TrainConfig {
            lr: positive("train.lr", take(&flat, "train.lr")?.unwrap_or(td.lr))?,
            epochs: take(&flat, "train.epochs")?.unwrap_or(td.epochs),
            l2: take(&flat, "train.l2")?.unwrap_or(td.l2),
            seed: take(&flat, "train.seed")?.unwrap_or(td.seed),
            polish_steps: take(&flat, "train.polish_steps")?.unwrap_or(td.polish_steps),
            ..td
        };
        if !(train.l2 >= 0.0 && train.l2.is_finite()) {
            bail!("config key train.l2 must be nonnegative");
        }
        let damping = positive("influence.damping", take(&flat, "influence.damping")?.unwrap_or(1e-3))?;
        let kind = match take::<String>(&flat, "influence.solver")?.as_deref().unwrap_or("exact") {
            "exact" => SolverKind::Exact,
            "lissa" => SolverKind::Lissa,
            other => bail!("influence.solver must be exact or lissa, got {other:?}"),
        };
        let ld = LissaConfig::default();
        let lissa = LissaConfig {
            batch: take(&flat, "influence.lissa.batch")?.unwrap_or(ld.batch),
            depth: take(&flat, "influence.lissa.depth")?.unwrap_or(ld.depth),
            repeats: take(&flat, "influence.lissa.repeats")?.unwrap_or(ld.repeats),
            scale: take(&flat, "influence.lissa.scale")?.unwrap_or(10.0 * (1.0 + damping)),
            seed: take(&flat, "influence.lissa.seed")?.unwrap_or(ld.seed),
        };
        let solver = IhvpSolverConfig { kind, damping, lissa };
        solver.validate()?;
        let alpha_grid: Option<Vec<f64>> = take(&flat, "app.alpha_grid")?;
        if alpha_grid.as_ref().is_some_and(|g| g.is_empty()) {
            bail!("app.alpha_grid must not be empty");
        }
        let knn_k = take(&flat, "app.knn_k")?.unwrap_or(10);
        if knn_k == 0 {
            bail!("app.knn_k must be at least 1");
        }
        let threads: Option<usize> = take(&flat, "threads")?;
        if threads == Some(0) {
            bail!("threads must be at least 1");
        }
        Ok(Self {
            data_dir: take(&flat, "data.dir")?,
            classes: take(&flat, "data.classes")?,
            out_dir: take(&flat, "output.dir")?.unwrap_or_else(|| PathBuf::from("sourcetrace-out")),
            label_model,
            em,
            approximate: take(&flat, "approx.enabled")?.unwrap_or(false),
            approx,
            train,
            method,
            relatif: take(&flat, "influence.relatif")?.unwrap_or(false),
            solver,
            app,
            alpha_grid,
            knn_k,
            k_max: take(&flat, "app.k_max")?.unwrap_or(3),
            top: take(&flat, "app.top")?.unwrap_or(5),
            threads,
            flat,
        })
    }
}

/// Parses `key=value`; values that are not valid JSON are taken as strings.
pub fn parse_assignment(s: &str) -> Result<(String, Value)> {
    let (k, v) = s.split_once('=').ok_or_else(|| anyhow!("expected KEY=VALUE, got {s:?}"))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}
