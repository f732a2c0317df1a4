use std::path::Path;
use std::process::{Command, Output};

use optexec::closed_form::{g_critical, CriticalParams};
use serde_json::{json, Value};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_optexec")).args(args).output().unwrap()
}

fn write_config(dir: &Path, cfg: &Value) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path.display().to_string()
}

fn summary(out: &Output) -> Value {
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    assert_eq!(text.lines().count(), 1, "{text}");
    serde_json::from_str(text.trim()).unwrap()
}

fn critical_params() -> Value {
    json!({"mu": -0.125, "sigma": 0.5, "lambda_impact": 1.0, "s0": 1.0, "phi0": 1.0})
}

#[test]
fn solve_critical_matches_closed_form_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let cfg = write_config(dir.path(), &json!({"params": critical_params()}));
    let out = run(&["solve", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let s = summary(&out);
    assert_eq!(s["passed"], json!(true));
    let csv = std::fs::read_to_string(out_dir.join("value_function.csv")).unwrap();
    let cp = CriticalParams::new(0.5, 1.0).unwrap();
    let mut worst = 0.0f64;
    for line in csv.lines().skip(1) {
        let f: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        if f[0] >= 0.01 && f[0] <= 10.0 {
            worst = worst.max((f[1] - g_critical(f[0], &cp)).abs());
        }
    }
    assert!(worst < 1e-5, "{worst}");
    let first = std::fs::read(out_dir.join("value_function.json")).unwrap();
    let again = run(&["solve", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(again.status.code(), Some(0));
    assert_eq!(std::fs::read(out_dir.join("value_function.json")).unwrap(), first);
    assert_eq!(again.stdout, out.stdout);
}

#[test]
fn positive_drift_is_a_regime_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = critical_params();
    p["mu"] = json!(0.1);
    let cfg = write_config(dir.path(), &json!({"params": p}));
    let out = run(&["solve", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("value is infinite for positive drift"));
    assert!(out.stdout.is_empty());
}

#[test]
fn invalid_config_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &json!({"params": critical_params(), "monte_carlo": {"n_pats": 10}}));
    let out = run(&["estimate", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_pats"));
    let mut p = critical_params();
    p["sigma"] = json!(-1.0);
    let cfg = write_config(dir.path(), &json!({"params": p}));
    assert_eq!(run(&["solve", "--config", &cfg]).status.code(), Some(1));
    assert_eq!(run(&["solve", "--bogus"]).status.code(), Some(1));
}

#[test]
fn missing_value_function_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg =
        write_config(dir.path(), &json!({"params": critical_params(), "value_function": dir.path().join("nope.json")}));
    let out = run(&["estimate", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn estimate_and_compare_report_their_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("mc");
    let cfg = write_config(
        dir.path(),
        &json!({
            "params": critical_params(),
            "monte_carlo": {"n_paths": 2000, "steps": 128},
            "policies": [{"kind": "optimal"}, {"kind": "exponential", "c": 0.5}, {"kind": "constant", "horizon": 3.0}]
        }),
    );
    let out = run(&["estimate", "--config", &cfg, "--seed", "9", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let s = summary(&out);
    for key in ["mean", "se", "tail_bound", "T", "ci95"] {
        assert!(s[key].is_number() || s[key].is_array(), "{key}");
    }
    assert_eq!(s["seed"], json!(9));
    let persisted: Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("run_config.json")).unwrap()).unwrap();
    assert_eq!(persisted["seed"], json!(9));

    let out = run(&["compare", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let csv = std::fs::read_to_string(out_dir.join("comparison.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("optimal,"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn simulate_closed_form_and_oracle_write_files() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("x");
    let mut p = critical_params();
    let cfg = write_config(
        dir.path(),
        &json!({"params": p.clone(), "closed_form": {"x_max": 10.0, "points": 64}, "simulate": {"steps": 200}}),
    );
    let o = out_dir.to_str().unwrap();
    let out = run(&["simulate", "--config", &cfg, "--out", o]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("execution.csv")).unwrap();
    assert!(csv.starts_with("t,S,phi_rate,inventory,revenue_cum,impact_cost_cum,M\n"));
    assert_eq!(csv.lines().count(), 202);

    let out = run(&["closed-form", "--config", &cfg, "--out", o]);
    assert_eq!(out.status.code(), Some(0));
    let s = summary(&out);
    assert!((s["h_at_lambda_sigma2"].as_f64().unwrap() - 0.697775).abs() < 1e-6);

    p["mu"] = json!(-0.25);
    let cfg = write_config(dir.path(), &json!({"params": p, "oracle": {"horizon": 10.0, "nx": 80}}));
    let out = run(&["oracle", "--config", &cfg, "--out", o]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let s = summary(&out);
    assert!(s["max_abs_deviation"].as_f64().unwrap() < 0.05);
    assert!(s["tail_certificate"].as_f64().unwrap() > 0.0);
    assert!(out_dir.join("hjb_grid.csv").exists());

    // The closed form needs the critical case.
    let cfg = write_config(
        dir.path(),
        &json!({"params": {"mu": -0.3, "sigma": 0.5, "lambda_impact": 1.0, "s0": 1.0, "phi0": 1.0}}),
    );
    assert_eq!(run(&["closed-form", "--config", &cfg, "--out", o]).status.code(), Some(2));
}
