//! `sourcetrace`: fit a label model, train the end model, score every
//! (point, LF, class) loss term by its influence on a holdout set, and use
//! the scores to find LF mistakes, prune harmful terms or explain predictions.

mod config;
mod manifest;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use config::{parse_assignment, read_config_file, FlatConfig, RunConfig};
use manifest::Manifest;
use stages::StageOutput;

const EXIT_INPUT: u8 = 2;
const EXIT_USAGE: u8 = 64;
const EXIT_NUMERICAL: u8 = 70;

#[derive(Parser, Debug)]
#[command(name = "sourcetrace", version, about = "Source-aware influence analysis for weak supervision pipelines")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON config of dotted keys (or a MANIFEST.json to reproduce a run)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset directory [data.dir]
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Output directory [output.dir]
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Label model [label_model.kind]
    #[arg(long, global = true, value_enum)]
    label_model: Option<LabelModelArg>,
    /// Refit exponential label models as identity ones [approx.enabled]
    #[arg(long, global = true)]
    approximate: bool,
    /// End-model seed [train.seed]
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Gradient-descent epochs [train.epochs]
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Learning rate [train.lr]
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// L2 penalty [train.l2]
    #[arg(long, global = true)]
    l2: Option<f64>,
    /// Hessian damping [influence.damping]
    #[arg(long, global = true)]
    damping: Option<f64>,
    /// Influence method [influence.method]
    #[arg(long, global = true, value_enum)]
    method: Option<MethodArg>,
    /// Normalize by self-influence [influence.relatif]
    #[arg(long, global = true)]
    relatif: bool,
    /// Inverse-Hessian solver [influence.solver]
    #[arg(long, global = true, value_enum)]
    solver: Option<SolverArg>,
    /// Worker threads [threads]; falls back to SOURCETRACE_THREADS
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Any config key, as KEY=VALUE (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum LabelModelArg {
    Mv,
    Ds,
    Metal,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum MethodArg {
    Auto,
    Ordinary,
    Rw,
    RwExp,
    Wm,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum SolverArg {
    Exact,
    Lissa,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every configured stage in order and print a summary
    Run,
    /// Fit the label model
    FitLm,
    /// Refit an exponential label model as an identity one
    Approx,
    /// Train the end model on the label model's probabilistic labels
    Train,
    /// Compute influence scores against the validation set
    Influence,
    /// Rank LF votes by how likely they are wrong and report AP per LF
    ///
    /// Scoring methods: SIF (vote-level source-aware influence), LM (one
    /// minus the label model's probability of the vote), EM (the same with
    /// end-model probabilities) and KNN (the same with probabilities from the
    /// K nearest validation points).
    Mislabels,
    /// Discard harmful loss terms over an α grid and retrain
    Prune,
    /// Remove the most harmful LFs, refit and retrain
    GroupIf,
    /// Correlate aggregated scores with ordinary IF and with retraining effects
    Correlate,
    /// Attribute one test prediction to training points, LFs and votes
    Explain {
        #[arg(long)]
        test_index: usize,
    },
    /// Write synthetic datasets
    Synth {
        /// acceptance (five seeds of the standard corpus) or demo
        #[arg(long, default_value = "demo")]
        preset: String,
    },
}

/// Invalid invocation; exits with the usage code.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn merged_config(c: &Common) -> Result<RunConfig> {
    let mut flat = match &c.config {
        Some(p) => read_config_file(p)?,
        None => FlatConfig::new(),
    };
    let mut put = |k: &str, v: Value| {
        flat.insert(k.to_string(), v);
    };
    if let Some(d) = &c.data {
        put("data.dir", json!(d));
    }
    if let Some(o) = &c.out {
        put("output.dir", json!(o));
    }
    if let Some(m) = c.label_model {
        put("label_model.kind", json!(m.to_possible_value().expect("no skipped variants").get_name()));
    }
    if c.approximate {
        put("approx.enabled", json!(true));
    }
    if let Some(s) = c.seed {
        put("train.seed", json!(s));
    }
    if let Some(e) = c.epochs {
        put("train.epochs", json!(e));
    }
    if let Some(v) = c.lr {
        put("train.lr", json!(v));
    }
    if let Some(v) = c.l2 {
        put("train.l2", json!(v));
    }
    if let Some(v) = c.damping {
        put("influence.damping", json!(v));
    }
    if let Some(m) = c.method {
        put("influence.method", json!(m.to_possible_value().expect("no skipped variants").get_name()));
    }
    if c.relatif {
        put("influence.relatif", json!(true));
    }
    if let Some(s) = c.solver {
        put("influence.solver", json!(s.to_possible_value().expect("no skipped variants").get_name()));
    }
    if let Some(t) = c.threads {
        put("threads", json!(t));
    }
    for a in &c.set {
        let (k, v) = parse_assignment(a).map_err(|e| UsageError(e.to_string()))?;
        put(&k, v);
    }
    RunConfig::from_flat(flat)
}

fn init_threads(cfg: &RunConfig) -> Result<()> {
    let n = match cfg.threads {
        Some(n) => Some(n),
        None => match std::env::var("SOURCETRACE_THREADS") {
            Ok(v) => Some(v.parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| {
                UsageError(format!("SOURCETRACE_THREADS must be a positive integer, got {v:?}"))
            })?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("starting the thread pool")?;
    }
    Ok(())
}

/// Runs one stage and records it in the manifest, failed or not.
fn stage(
    cfg: &RunConfig,
    manifest: &mut Manifest,
    name: &str,
    f: impl FnOnce(&RunConfig) -> Result<StageOutput>,
) -> Result<StageOutput> {
    log::info!("stage {name}");
    match f(cfg) {
        Ok(out) => {
            manifest.record(&cfg.out_dir, name, &out.files, None)?;
            Ok(out)
        }
        Err(e) => {
            manifest.record(&cfg.out_dir, name, &[], Some(format!("{e:#}")))?;
            Err(e.context(format!("stage {name} failed")))
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = merged_config(&cli.common)?;
    init_threads(&cfg)?;
    if let Command::Synth { preset } = &cli.command {
        let out = cli.common.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
        for d in stages::synth(preset, &out)? {
            println!("wrote {}", d.display());
        }
        return Ok(());
    }
    std::fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let mut manifest = Manifest::open(&cfg.out_dir, &cfg)?;
    manifest.save(&cfg.out_dir)?;
    let outputs = match cli.command {
        Command::Run => {
            let mut all = vec![stage(&cfg, &mut manifest, "fit-lm", stages::fit_lm)?];
            if cfg.approximate {
                all.push(stage(&cfg, &mut manifest, "approx", stages::approx)?);
            }
            all.push(stage(&cfg, &mut manifest, "train", stages::train)?);
            all.push(stage(&cfg, &mut manifest, "influence", stages::influence)?);
            match cfg.app {
                config::AppKind::Prune => all.push(stage(&cfg, &mut manifest, "prune", stages::prune)?),
                config::AppKind::Mislabels => all.push(stage(&cfg, &mut manifest, "mislabels", stages::mislabels)?),
                config::AppKind::GroupIf => all.push(stage(&cfg, &mut manifest, "group-if", stages::group_if)?),
                config::AppKind::Correlate => all.push(stage(&cfg, &mut manifest, "correlate", stages::correlate)?),
                config::AppKind::None => {}
            }
            all
        }
        Command::FitLm => vec![stage(&cfg, &mut manifest, "fit-lm", stages::fit_lm)?],
        Command::Approx => vec![stage(&cfg, &mut manifest, "approx", stages::approx)?],
        Command::Train => vec![stage(&cfg, &mut manifest, "train", stages::train)?],
        Command::Influence => vec![stage(&cfg, &mut manifest, "influence", stages::influence)?],
        Command::Mislabels => vec![stage(&cfg, &mut manifest, "mislabels", stages::mislabels)?],
        Command::Prune => vec![stage(&cfg, &mut manifest, "prune", stages::prune)?],
        Command::GroupIf => vec![stage(&cfg, &mut manifest, "group-if", stages::group_if)?],
        Command::Correlate => vec![stage(&cfg, &mut manifest, "correlate", stages::correlate)?],
        Command::Explain { test_index } => {
            vec![stage(&cfg, &mut manifest, &format!("explain-{test_index}"), |c| stages::explain_point(c, test_index))?]
        }
        Command::Synth { .. } => unreachable!("handled above"),
    };
    for line in outputs.iter().flat_map(|o| &o.summary) {
        println!("{line}");
    }
    println!("artifacts in {}", cfg.out_dir.display());
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return EXIT_USAGE;
        }
        if let Some(sourcetrace::Error::Numerical(_)) = cause.downcast_ref::<sourcetrace::Error>() {
            return EXIT_NUMERICAL;
        }
    }
    EXIT_INPUT
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
