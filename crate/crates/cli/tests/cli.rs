use std::path::Path;
use std::process::{Command, Output};

fn rrfb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rrfb")).args(args).output().expect("run rrfb")
}

fn stdout(args: &[&str]) -> String {
    let out = rrfb(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(rrfb(&["--bogus"]).status.code(), Some(2));
    assert_eq!(rrfb(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(rrfb(&["zeros", "--p", "4"]).status.code(), Some(2));
    assert_eq!(rrfb(&["--help"]).status.code(), Some(0));
}

#[test]
fn invalid_data_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("bad.csv");
    std::fs::write(&f, "mode=simplex,group,a,b\nr1,g,0.7,0.7\n").unwrap();
    let out = rrfb(&["fit", "--input", f.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("constraint"));
}

#[test]
fn zeros_match_the_reference_table() {
    let text = stdout(&["zeros", "--p", "3", "--case", "2", "--seed", "7"]);
    let props: Vec<f64> = text.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    for (a, b) in props.iter().zip([0.0, 0.154, 0.130]) {
        assert!((a - b).abs() < 0.02, "{props:?}");
    }
}

#[test]
fn simulate_is_deterministic() {
    let a = stdout(&["simulate", "--p", "3", "--case", "1", "--n", "5", "--seed", "1"]);
    assert_eq!(a, stdout(&["simulate", "--p", "3", "--case", "1", "--n", "5", "--seed", "1"]));
    assert_eq!(a.lines().count(), 6);
    assert_ne!(a, stdout(&["simulate", "--p", "3", "--case", "1", "--n", "5", "--seed", "2"]));
}

fn write_identical_groups(dir: &Path, seed: u64) -> String {
    let samples = stdout(&["simulate", "--p", "3", "--case", "3", "--n", "40", "--seed", &seed.to_string()]);
    let mut text = String::new();
    for (i, line) in samples.lines().enumerate() {
        if i == 0 {
            text.push_str(line);
            text.push('\n');
            continue;
        }
        let rest = line.split_once(',').unwrap().1.split_once(',').unwrap().1;
        text.push_str(&format!("a{i},0,{rest}\nb{i},1,{rest}\n"));
    }
    let f = dir.join(format!("same{seed}.csv"));
    std::fs::write(&f, text).unwrap();
    f.to_str().unwrap().to_string()
}

#[test]
fn permanova_on_identical_groups_does_not_reject() {
    let dir = tempfile::tempdir().unwrap();
    let mut accepted = 0;
    for seed in 0..10 {
        let f = write_identical_groups(dir.path(), seed);
        let out = stdout(&["test", "--input", &f, "--method", "permanova", "--distance", "bray-curtis", "--perms", "999", "--seed", &seed.to_string()]);
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        accepted += usize::from(v["p_permutation"].as_f64().unwrap() > 0.05);
    }
    assert!(accepted >= 9, "{accepted}/10");
}

#[test]
fn score_test_reports_the_documented_fields() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("two.csv");
    std::fs::write(&f, stdout(&["simulate", "--p", "3", "--case", "3", "--n", "60", "--shift", "1.5", "--seed", "2"])).unwrap();
    let out = stdout(&["test", "--input", f.to_str().unwrap(), "--perms", "49"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    for key in ["T", "df", "p_asymptotic", "p_permutation", "n_permutations", "method_flags"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert_eq!(v["df"], 3);
    assert_eq!(v["n_permutations"], 49);
}

#[test]
fn manifest_replay_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    stdout(&["--out", first.to_str().unwrap(), "--seed", "3", "zeros", "--p", "5", "--case", "1", "--n-samples", "2000"]);
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(first.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "zeros");
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["schema_version"], 1);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    stdout(&["replay", first.join("manifest.json").to_str().unwrap(), "--out", second.to_str().unwrap()]);
    assert_eq!(std::fs::read(first.join("zeros.csv")).unwrap(), std::fs::read(second.join("zeros.csv")).unwrap());
}

#[test]
fn fit_emits_the_documented_layout() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("x.csv");
    std::fs::write(&f, stdout(&["simulate", "--p", "3", "--case", "1", "--n", "150", "--seed", "4"])).unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"fit": {"max_iter": 40}}"#).unwrap();
    let v: serde_json::Value = serde_json::from_str(&stdout(&["fit", "--input", f.to_str().unwrap(), "--config", cfg.to_str().unwrap()])).unwrap();
    for key in ["p", "lambda", "Q", "gamma_tilde", "gamma", "loglik", "iterations", "converged", "seed"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert_eq!(v["Q"].as_array().unwrap().len(), 9);
    assert!(v["iterations"].as_u64().unwrap() <= 40);
}
