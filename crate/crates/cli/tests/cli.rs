use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn fjlab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fjlab"))
        .current_dir(dir)
        .arg("--quiet")
        .args(args)
        .output()
        .unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const TWO_AGENTS: &str = r#"
seed = 1
[simulate]
mode = "explicit"
n = 2
d = 2
rounds = 3
gamma = [1.0, 1.0]
alpha = [0.0, 0.0]
weights = [[0.0, 1.0], [1.0, 0.0]]
innate = [[0.9, 0.1], [0.2, 0.8]]
label = 0
[fit]
restarts = 1
max_iters = 50
"#;

#[test]
fn fully_stubborn_agents_never_move() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), TWO_AGENTS).unwrap();
    assert!(fjlab(dir.path(), &["--config", "run.toml", "simulate"])
        .status
        .success());
    let file = read_json(&dir.path().join("trajectories.json"));
    let rounds = file["samples"][0]["rounds"].as_array().unwrap();
    assert_eq!(rounds.len(), 4);
    assert!(rounds.iter().all(|r| r == &rounds[0]));
}

#[test]
fn empty_input_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("empty.json"), r#"{"schema_version":"1","samples":[]}"#).unwrap();
    let out = fjlab(dir.path(), &["fit", "--input", "empty.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("fit_report.json").exists());
}

#[test]
fn unknown_schema_version_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("t.json"), r#"{"schema_version":"9","samples":[]}"#).unwrap();
    let out = fjlab(dir.path(), &["fit", "--input", "t.json"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn non_contractive_parameters_are_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), TWO_AGENTS).unwrap();
    assert!(fjlab(dir.path(), &["--config", "run.toml", "simulate"])
        .status
        .success());
    assert!(fjlab(
        dir.path(),
        &["--config", "run.toml", "fit", "--input", "trajectories.json"]
    )
    .status
    .success());

    let report_path = dir.path().join("fit_report.json");
    let mut report = read_json(&report_path);
    let params = &mut report["samples"][0]["params"];
    params["gamma"] = serde_json::json!([0.0, 0.0]);
    params["alpha"] = serde_json::json!([1.0, 1.0]);
    std::fs::write(&report_path, report.to_string()).unwrap();

    let out = fjlab(
        dir.path(),
        &["analyze", "--input", "trajectories.json", "--params", "fit_report.json"],
    );
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bad_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), "[simulate]\nsamplez = 3\n").unwrap();
    let out = fjlab(dir.path(), &["--config", "run.toml", "simulate"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn symmetric_system_has_unit_influence() {
    let dir = tempfile::tempdir().unwrap();
    let config = r#"
[simulate]
mode = "explicit"
n = 3
d = 2
rounds = 4
gamma = [0.4, 0.4, 0.4]
alpha = [0.2, 0.2, 0.2]
weights = [[0.0, 0.5, 0.5], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]]
innate = [[0.9, 0.1], [0.3, 0.7], [0.5, 0.5]]
label = 1
"#;
    std::fs::write(dir.path().join("run.toml"), config).unwrap();
    assert!(fjlab(dir.path(), &["--config", "run.toml", "simulate"])
        .status
        .success());

    // hand-written params so the check does not depend on fit accuracy
    let params = r#"{"gamma":[0.4,0.4,0.4],"alpha":[0.2,0.2,0.2],"w":[[0,0.5,0.5],[0.5,0,0.5],[0.5,0.5,0]]}"#;
    let file = read_json(&dir.path().join("trajectories.json"));
    let samples: Vec<String> = file["samples"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| {
            format!(
                r#"{{"sample_id":{},"params":{params},"kl":0,"mse":0,"objective":0,"iterations":0,"restart_index":0,"flat":false}}"#,
                s["sample_id"]
            )
        })
        .collect();
    let report = format!(
        r#"{{"objective":"kl","reg_lambda":0,"seed":0,"samples":[{}],"aggregate":{{"kl":{zero},"mse":{zero}}}}}"#,
        samples.join(","),
        zero = r#"{"mean":0,"std":0,"ci95_half_width":null,"count":2}"#
    );
    std::fs::write(dir.path().join("fit_report.json"), report).unwrap();
    let out = fjlab(
        dir.path(),
        &["analyze", "--input", "trajectories.json", "--params", "fit_report.json"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let mut rows = csv::Reader::from_path(dir.path().join("agent_metrics.csv")).unwrap();
    let headers = rows.headers().unwrap().clone();
    let col = headers.iter().position(|h| h == "influence").unwrap();
    let mut count = 0;
    for rec in rows.records() {
        let v: f64 = rec.unwrap()[col].parse().unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        count += 1;
    }
    assert_eq!(count, 3);
}

#[test]
fn verify_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let config = r#"
[verify]
param_draws = 20
identity_draws = 50
mc_samples = 20000
comparison_samples = 50
mc_tolerance = 0.03
"#;
    std::fs::write(dir.path().join("run.toml"), config).unwrap();
    let out = fjlab(dir.path(), &["--config", "run.toml", "verify"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&dir.path().join("verify_report.json"));
    assert_eq!(report["passed"], Value::Bool(true));
    assert!(dir.path().join("verify_report.txt").exists());
}
