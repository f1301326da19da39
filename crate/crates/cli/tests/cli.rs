use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sourcetrace"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).env_remove("SOURCETRACE_THREADS").output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn demo(dir: &Path) -> String {
    let o = run(&["synth", "--preset", "demo", "--out", dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    dir.join("demo.json").to_str().unwrap().to_string()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn demo_run_writes_all_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = demo(tmp.path());
    let o = run(&["run", "--config", &cfg, "--epochs", "2000"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    for needle in ["label model: mv", "final training loss", "harmful LFs", "selected α", "test loss"] {
        assert!(stdout.contains(needle), "missing {needle:?} in\n{stdout}");
    }
    let out = tmp.path().join("run");
    for f in ["label_model.json", "end_model.json", "influence_rw.csv", "prune.json", "MANIFEST.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let manifest: serde_json::Value = serde_json::from_str(&read(&out.join("MANIFEST.json"))).unwrap();
    assert_eq!(manifest["complete"], true);
    assert_eq!(manifest["config"]["train.epochs"], 2000);
    let stages: Vec<&str> = manifest["stages"].as_array().unwrap().iter().map(|s| s["name"].as_str().unwrap()).collect();
    assert_eq!(stages, ["fit-lm", "train", "influence", "prune"]);

    let o = run(&["explain", "--config", &cfg, "--test-index", "7", "--epochs", "2000"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let e: serde_json::Value = serde_json::from_str(&read(&out.join("explain_7.json"))).unwrap();
    assert_eq!(e["test_index"], 7);
    for key in ["top_points", "top_lfs", "top_votes"] {
        assert!(!e[key].as_array().unwrap().is_empty(), "{key}");
    }
}

#[test]
fn manifest_config_reproduces_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = demo(tmp.path());
    let o = run(&["run", "--config", &cfg, "--epochs", "1000", "--set", "app.kind=\"none\""]);
    assert!(o.status.success(), "{}", stderr(&o));
    let first: serde_json::Value = serde_json::from_str(&read(&tmp.path().join("run/MANIFEST.json"))).unwrap();
    let copy = tmp.path().join("manifest_copy.json");
    std::fs::copy(tmp.path().join("run/MANIFEST.json"), &copy).unwrap();
    let o = run(&["run", "--config", copy.to_str().unwrap(), "--threads", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let second: serde_json::Value = serde_json::from_str(&read(&tmp.path().join("run/MANIFEST.json"))).unwrap();
    assert_eq!(first["stages"], second["stages"]);
}

#[test]
fn missing_features_is_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    demo(tmp.path());
    let data = tmp.path().join("data");
    std::fs::remove_file(data.join("train_features.csv")).unwrap();
    let out = tmp.path().join("out");
    let o = run(&["fit-lm", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains(&format!("features not found: {}", data.join("train_features.csv").display())), "{err}");
    let manifest: serde_json::Value = serde_json::from_str(&read(&out.join("MANIFEST.json"))).unwrap();
    assert_eq!(manifest["complete"], false);
}

#[test]
fn usage_errors_exit_64() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(64));
    assert_eq!(run(&["influence", "--method", "bogus"]).status.code(), Some(64));
    let o = bin().args(["fit-lm"]).env("SOURCETRACE_THREADS", "zero").output().unwrap();
    assert_eq!(o.status.code(), Some(64));
}

#[test]
fn mislabels_help_lists_methods() {
    let o = run(&["mislabels", "--help"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for m in ["SIF", "LM", "EM", "KNN"] {
        assert!(text.contains(m), "{m} missing from help");
    }
}

#[test]
fn rw_on_exponential_model_points_to_alternatives() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = demo(tmp.path());
    for args in [
        vec!["fit-lm", "--config", &cfg, "--label-model", "ds"],
        vec!["train", "--config", &cfg, "--epochs", "500"],
    ] {
        let o = run(&args);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let o = run(&["influence", "--config", &cfg, "--method", "rw"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("--method rw-exp") && err.contains("approx"), "{err}");
    let o = run(&["influence", "--config", &cfg, "--method", "rw-exp"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&["approx", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("approximation objective"));
}

#[test]
fn synth_acceptance_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        let o = run(&["synth", "--preset", "acceptance", "--out", d.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for seed in 0..5 {
        for f in ["train_votes.csv", "train_features.csv", "valid_gold.csv", "test_features.csv", "spec.json"] {
            let rel = format!("seed_{seed}/{f}");
            assert_eq!(std::fs::read(a.join(&rel)).unwrap(), std::fs::read(b.join(&rel)).unwrap(), "{rel}");
        }
    }
}

#[test]
fn applications_run_on_stored_models() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = demo(tmp.path());
    for args in [
        vec!["fit-lm", "--config", &cfg],
        vec!["train", "--config", &cfg, "--epochs", "500"],
        vec!["mislabels", "--config", &cfg],
        vec!["group-if", "--config", &cfg, "--epochs", "500", "--set", "app.k_max=2"],
        vec!["influence", "--config", &cfg, "--method", "wm", "--relatif"],
        vec!["influence", "--config", &cfg, "--method", "ordinary", "--solver", "lissa", "--set", "influence.lissa.depth=200"],
    ] {
        let o = run(&args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    }
    let out = tmp.path().join("run");
    let m: serde_json::Value = serde_json::from_str(&read(&out.join("mislabels.json"))).unwrap();
    let names: Vec<&str> = m["reports"].as_array().unwrap().iter().map(|r| r["method"].as_str().unwrap()).collect();
    assert_eq!(names, ["SIF", "LM", "EM", "KNN"]);
    assert!(out.join("group_if.json").exists());
    assert!(out.join("influence_relatif_wm.csv").exists());
    assert!(out.join("influence_ordinary.csv").exists());
}

#[test]
fn unknown_config_key_is_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("c.json");
    std::fs::write(&p, r#"{"train.learning_rate": 0.1}"#).unwrap();
    let o = run(&["fit-lm", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown config key"));
}
