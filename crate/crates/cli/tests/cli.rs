use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn drfusion(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drfusion"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = drfusion(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn group_count(path: &Path) -> usize {
    let text = fs::read_to_string(path).unwrap();
    let mut groups: Vec<&str> = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    groups.sort();
    groups.dedup();
    groups.len()
}

fn small_dataset(dir: &Path) {
    ok(dir, &["simulate", "--k", "4", "--n", "600", "--seed", "3", "--out", "d.csv"]);
}

#[test]
fn simulate_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["simulate", "--k", "8", "--n", "400", "--seed", "9", "--out", "a.csv"]);
    ok(d, &["simulate", "--k", "8", "--n", "400", "--seed", "9", "--out", "b.csv"]);
    ok(d, &["simulate", "--k", "8", "--n", "400", "--seed", "10", "--out", "c.csv"]);
    let a = fs::read(d.join("a.csv")).unwrap();
    assert_eq!(a, fs::read(d.join("b.csv")).unwrap());
    assert_ne!(a, fs::read(d.join("c.csv")).unwrap());

    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("# drfusion"));
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 401);
    let meta = json(&d.join("a.csv.meta.json"));
    assert_eq!(meta["true_groups"].as_array().unwrap().len(), 8);
}

#[test]
fn validation_errors_exit_3() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    assert_eq!(drfusion(d, &["simulate", "--kind", "bogus", "--out", "x.csv"]).status.code(), Some(3));
    assert_eq!(drfusion(d, &["simulate", "--k", "6", "--out", "x.csv"]).status.code(), Some(3));
    assert_eq!(drfusion(d, &["frobnicate"]).status.code(), Some(3));
    small_dataset(d);
    let out = drfusion(d, &["learn", "--data", "d.csv", "--depth", "9", "--out", "l"]);
    assert_eq!(out.status.code(), Some(3));
    let out = drfusion(d, &["learn", "--data", "d.csv", "--clip", "0.5,0.1", "--out", "l"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn missing_input_exits_2() {
    let tmp = TempDir::new().unwrap();
    let out = drfusion(tmp.path(), &["fuse", "--data", "absent.csv", "--out", "f"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.csv"));
}

#[test]
fn help_exits_0() {
    let tmp = TempDir::new().unwrap();
    let out = ok(tmp.path(), &["--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["simulate", "fuse", "learn", "evaluate", "bench"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn zero_lambda_keeps_every_treatment_apart() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    small_dataset(d);
    ok(d, &["fuse", "--data", "d.csv", "--lambda-grid", "0", "--out", "f"]);
    assert_eq!(group_count(&d.join("f/groups.csv")), 4);
    let report = json(&d.join("f/fusion.json"));
    assert_eq!(report["calibrated"], true);
    assert!(report["max_calibration_residual"].as_f64().unwrap() < 1e-6);

    let weights = fs::read_to_string(d.join("f/weights.csv")).unwrap();
    assert_eq!(weights.lines().filter(|l| !l.starts_with('#')).count(), 601);
}

#[test]
fn uniform_weights_skip_calibration() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    small_dataset(d);
    ok(d, &["fuse", "--data", "d.csv", "--no-weights", "--out", "f"]);
    assert_eq!(json(&d.join("f/fusion.json"))["calibrated"], false);
}

#[test]
fn single_group_learns_a_single_leaf() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    small_dataset(d);
    fs::write(d.join("one.csv"), "treatment,group\n1,1\n2,1\n3,1\n4,1\n").unwrap();
    ok(d, &["learn", "--data", "d.csv", "--groups", "one.csv", "--folds", "3", "--out", "l"]);
    let dot = fs::read_to_string(d.join("l/tree.dot")).unwrap();
    assert!(dot.contains("digraph policy {"));
    assert_eq!(dot.matches("shape=box").count(), 1);
    assert!(!dot.contains("->"));
}

#[test]
fn depth_zero_is_a_constant_policy() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    small_dataset(d);
    ok(d, &["learn", "--data", "d.csv", "--depth", "0", "--folds", "3", "--out", "l"]);
    let policy = json(&d.join("l/policy.json"));
    assert_eq!(policy["tree"]["depth"], 0);
    assert!(policy["tree"]["root"]["leaf"].is_object());
}

#[test]
fn fuse_learn_evaluate_pipeline() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    small_dataset(d);
    ok(d, &["fuse", "--data", "d.csv", "--out", "f"]);
    ok(d, &["learn", "--data", "d.csv", "--groups", "f/groups.csv", "--depth", "2", "--folds", "3", "--out", "l"]);
    for file in ["tree.txt", "tree.dot", "policy.json"] {
        assert!(d.join("l").join(file).exists(), "{file} not written");
    }
    ok(
        d,
        &[
            "evaluate", "--groups", "f/groups.csv", "--truth", "d.csv.meta.json", "--policy", "l/policy.json",
            "--data", "d.csv", "--folds", "3", "--out", "eval.json",
        ],
    );
    let eval = json(&d.join("eval.json"));
    let ari = eval["ari"].as_f64().unwrap();
    assert!((-1.0..=1.0).contains(&ari));
    assert_eq!(eval["true_groups"], 4);
    let learned = json(&d.join("l/policy.json"))["value"].as_f64().unwrap();
    assert!((eval["aipw_value"].as_f64().unwrap() - learned).abs() < 1e-9);

    // A grouping scored against itself.
    let out = ok(d, &["evaluate", "--groups", "f/groups.csv", "--truth", "f/groups.csv"]);
    let eval: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(eval["ari"], 1.0);
}

#[test]
fn bench_writes_one_row_per_method() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(
        d,
        &[
            "bench", "--k", "4", "--n", "400", "--reps", "2", "--methods", "baseline", "--test-size", "2000",
            "--depth", "1", "--out", "b",
        ],
    );
    let table = fs::read_to_string(d.join("b/table.csv")).unwrap();
    let rows: Vec<&str> = table.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "method,completed,failures,ari_mean,ari_se,groups_mean,groups_se,value_mean,value_se");
    assert_eq!(rows.len(), 2);
    assert!(rows[1].starts_with("baseline,2,0,"));
    let log = fs::read_to_string(d.join("b/replications.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
}

#[test]
fn flags_override_config_file() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    fs::write(d.join("run.toml"), "seed = 3\n\n[scenario]\nk = 4\nn = 600\n").unwrap();
    ok(d, &["simulate", "--config", "run.toml", "--out", "from_file.csv"]);
    small_dataset(d);
    assert_eq!(fs::read(d.join("from_file.csv")).unwrap(), fs::read(d.join("d.csv")).unwrap());

    ok(d, &["simulate", "--config", "run.toml", "--n", "200", "--out", "flag.csv"]);
    let text = fs::read_to_string(d.join("flag.csv")).unwrap();
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 201);

    fs::write(d.join("bad.toml"), "[scenario]\nkk = 4\n").unwrap();
    assert_eq!(drfusion(d, &["simulate", "--config", "bad.toml", "--out", "x.csv"]).status.code(), Some(3));
}
