//! End-to-end runs of the `dso` binary: exit codes, artifacts and the
//! learning-curve contract.

use std::path::Path;
use std::process::Command;

use dso_cli::config::ExperimentConfig;
use dso_cli::run_optimize;

fn dso(args: &[&str], config: &str) -> (i32, String, String, tempfile::TempDir) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("config.json");
    std::fs::write(&path, config).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_dso"))
        .args(args)
        .arg("--config")
        .arg(&path)
        .env("RUST_LOG", "error")
        .output()
        .unwrap();
    let code = out.status.code().expect("exited normally");
    (code, String::from_utf8(out.stdout).unwrap(), String::from_utf8(out.stderr).unwrap(), dir)
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

const CANONICAL: &str = r#"{"kind": "softmax-tabular", "canonical": true}"#;

#[test]
fn grad_check_passes_and_writes_report() {
    let config = r#"{"problem": {"kind": "softmax-tabular", "n_states": 8, "setting": "first-exit", "seed": 4}}"#;
    let (code, stdout, _, _dir) = dso(&["grad-check"], config);
    assert_eq!(code, 0);
    let report: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(report["pass"], true);
    assert!(report["max_relative_error"].as_f64().unwrap() < 1e-5);
}

#[test]
fn injected_bias_fails_on_its_coordinate() {
    let config = r#"{
        "problem": {"kind": "smdp-random", "n_states": 5},
        "grad_check": {"inject_bias": {"coordinate": 3, "value": 0.01}}
    }"#;
    let (code, stdout, _, _dir) = dso(&["grad-check"], config);
    assert_eq!(code, 1);
    let report: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    let failing: Vec<u64> = report["coordinates"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["pass"] == false)
        .map(|c| c["index"].as_u64().unwrap())
        .collect();
    assert_eq!(failing, vec![3]);
    assert_eq!(report["oracle"]["pass"], false);
}

#[test]
fn config_errors_exit_with_two() {
    let unknown = format!(r#"{{"problem": {CANONICAL}, "algorithm": {{"step": 0.1}}}}"#);
    assert_eq!(dso(&["optimize"], &unknown).0, 2);

    let bad_clip = format!(r#"{{"problem": {CANONICAL}, "algorithm": {{"method": "pco", "clip_epsilon": 1.5}}}}"#);
    assert_eq!(dso(&["optimize"], &bad_clip).0, 2);

    // capability mismatches: no exact objective, no episode end, no desirability
    let gaussian = r#"{"problem": {"kind": "gaussian-linear"}, "algorithm": {"method": "exact-gd"}}"#;
    assert_eq!(dso(&["optimize"], gaussian).0, 2);
    let average = r#"{"problem": {"kind": "softmax-tabular", "setting": "average"}, "algorithm": {"method": "alg1-sgd"}}"#;
    assert_eq!(dso(&["optimize"], average).0, 2);
    assert_eq!(dso(&["zlearn"], &format!(r#"{{"problem": {CANONICAL}}}"#)).0, 2);

    let (code, _, stderr, _dir) = dso(&["optimize", "--threads", "0"], &format!(r#"{{"problem": {CANONICAL}}}"#));
    assert_eq!(code, 2, "{stderr}");
}

#[test]
fn zero_iterations_give_one_row() {
    let config = format!(r#"{{"problem": {CANONICAL}, "algorithm": {{"iterations": 0}}}}"#);
    let (code, stdout, _, _dir) = dso(&["optimize"], &config);
    assert_eq!(code, 0);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines, vec!["iter,J,grad_norm,wall_ms,steps", "0,2,1.4142135623730951,0,0"]);
}

/// Tabular runs report exact J even when the gradient is sampled; the
/// Gaussian regulator only has a sampled J.
#[test]
fn estimated_objective_adds_a_stderr_column() {
    let config = r#"{"problem": {"kind": "gaussian-linear"},
        "algorithm": {"method": "alg1-sgd", "iterations": 3, "batch": 32, "step_size": 0.01},
        "output": {"write_rollouts": true}}"#;
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let (code, _, stderr, _cfg) = dso(&["optimize", "--out", out.to_str().unwrap()], config);
    assert_eq!(code, 0, "{stderr}");
    let csv = read(&out, "curve.csv");
    assert_eq!(csv.lines().next().unwrap(), "iter,J,grad_norm,wall_ms,steps,J_stderr");
    assert_eq!(csv.lines().count(), 5);
    let rollouts = read(&out, "rollouts.jsonl");
    let first: serde_json::Value = serde_json::from_str(rollouts.lines().next().unwrap()).unwrap();
    assert!(first["states"].as_array().unwrap().len() >= 2);
    let saved = ExperimentConfig::from_json(&read(&out, "config.json")).unwrap();
    assert_eq!(saved.algorithm.batch, 32);
}

#[test]
fn seed_flag_overrides_config_and_reruns_match() {
    let config = format!(r#"{{"problem": {CANONICAL}, "seed": 1, "algorithm": {{"method": "alg1-sgd", "iterations": 5}}}}"#);
    let a = dso(&["optimize", "--seed", "9", "--threads", "1"], &config).1;
    let b = dso(&["optimize", "--seed", "9", "--threads", "3"], &config).1;
    let c = dso(&["optimize", "--seed", "1"], &config).1;
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn equiv_passes_for_both_constructions() {
    for pair in ["smdp-dmdp", "lmdp-dmdp"] {
        let config = format!(r#"{{"problem": {CANONICAL}, "equiv": {{"pair": "{pair}", "setting": "first-exit"}}}}"#);
        let (code, stdout, stderr, _dir) = dso(&["equiv"], &config);
        assert_eq!(code, 0, "{pair}: {stderr}");
        let report: serde_json::Value = serde_json::from_str(&stdout).unwrap();
        assert_eq!(report["pass"], true);
    }
}

#[test]
fn zlearn_writes_curve_and_table() {
    let config = r#"{
        "problem": {"kind": "gridworld-lmdp"},
        "algorithm": {"method": "zlearn-greedy"},
        "zlearn": {"steps": 20000, "tolerance": 0.05}
    }"#;
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("z");
    let (code, _, stderr, _cfg) = dso(&["zlearn", "--out", out.to_str().unwrap()], config);
    assert_eq!(code, 0, "{stderr}");
    let table = dso_core::zlearn::read_z_table(&read(&out, "z_table.txt")).unwrap();
    assert_eq!(table.0.len(), 25);
    assert_eq!(table.1, 1.0);
    assert_eq!(read(&out, "curve.csv").lines().next().unwrap(), "step,bellman_residual,max_relative_error");
}

/// Median over five seeds of the first iteration with J < 1.1.
#[test]
fn batch_sgd_reaches_target_on_canonical_problem() {
    let text = format!(r#"{{"problem": {CANONICAL}, "algorithm": {{"method": "alg1-sgd", "iterations": 200, "batch": 256}}}}"#);
    let mut first_hits: Vec<usize> = (1..=5)
        .map(|seed| {
            let mut config = ExperimentConfig::from_json(&text).unwrap();
            config.seed = seed;
            let run = run_optimize(&config, None).unwrap();
            run.curve.rows().iter().find(|r| r.j < 1.1).map_or(usize::MAX, |r| r.iter)
        })
        .collect();
    first_hits.sort_unstable();
    assert!(first_hits[2] <= 200, "{first_hits:?}");
}
