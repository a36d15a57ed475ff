use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn cfmap(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfmap"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn cfmap")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

/// The error object is the last line of stderr; progress lines precede it.
fn stderr_json(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stderr);
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn simulated_sample(dir: &Path) {
    let o = cfmap(dir, &["simulate", "--n", "800", "--reps", "2", "--seed", "3", "--sample-out", "s.csv"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

const SCHEMA: [&str; 8] = ["--input", "s.csv", "--outcome", "y", "--treatment", "d", "--instrument", "z"];

#[test]
fn estimate_writes_three_outputs() {
    let dir = tempfile::tempdir().unwrap();
    simulated_sample(dir.path());
    let mut args = vec!["estimate"];
    args.extend(SCHEMA);
    args.extend(["--out-dir", "out"]);
    let o = cfmap(dir.path(), &args);
    assert_eq!(code(&o), 0);
    for f in ["ite.csv", "map.csv", "summary.json"] {
        assert!(dir.path().join("out").join(f).is_file(), "{f}");
    }
    let ite = std::fs::read_to_string(dir.path().join("out/ite.csv")).unwrap();
    assert!(ite.starts_with("id,cell,d,y,y_counterfactual,delta_hat,out_of_support_flag"));
    assert_eq!(ite.lines().count(), 801);
    let summary = json(&dir.path().join("out/summary.json"));
    assert_eq!(summary["n_records"], 800);
}

#[test]
fn usage_errors_exit_with_two_and_json_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    simulated_sample(dir.path());
    let missing = cfmap(
        dir.path(),
        &["estimate", "--input", "s.csv", "--outcome", "y", "--treatment", "d", "--out-dir", "o"],
    );
    assert_eq!(code(&missing), 2);
    let err: Value = stderr_json(&missing);
    assert_eq!(err["error"]["kind"], "usage");

    let mut args = vec!["density"];
    args.extend(SCHEMA);
    args.extend(["--bandwidth", "0", "--out-dir", "o"]);
    assert_eq!(code(&cfmap(dir.path(), &args)), 2);

    assert_eq!(code(&cfmap(dir.path(), &["simulate", "--gamma1", "0"])), 2);
    assert_eq!(code(&cfmap(dir.path(), &["--threads", "0", "simulate", "--reps", "2"])), 2);
}

#[test]
fn estimation_failure_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    // the instrument does not move treatment
    let mut text = String::from("y,d,z\n");
    for i in 0..200 {
        text.push_str(&format!("{},{},{}\n", i as f64, i % 2, (i / 2) % 2));
    }
    std::fs::write(dir.path().join("s.csv"), text).unwrap();
    let mut args = vec!["estimate"];
    args.extend(SCHEMA);
    args.extend(["--out-dir", "o"]);
    let o = cfmap(dir.path(), &args);
    assert_eq!(code(&o), 1);
    let err: Value = stderr_json(&o);
    assert_eq!(err["error"]["exit_code"], 1);
}

#[test]
fn weak_cell_is_skipped_with_warning() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("y,d,z,g\n");
    for i in 0..400 {
        let z = i % 2;
        let u = (i as f64 * 0.618_033_988_7).fract();
        let d = u8::from(z == 1 && u < 0.6 || u < 0.1);
        text.push_str(&format!("{},{d},{z},strong\n", 1.0 + u + f64::from(d)));
    }
    for i in 0..200 {
        text.push_str(&format!("{},{},{},weak\n", i as f64, i % 2, (i / 2) % 2));
    }
    std::fs::write(dir.path().join("s.csv"), text).unwrap();
    let mut args = vec!["estimate"];
    args.extend(SCHEMA);
    args.extend(["--covariates", "g", "--out-dir", "o"]);
    let o = cfmap(dir.path(), &args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = json(&dir.path().join("o/summary.json"));
    let warnings = summary["warnings"].as_array().unwrap();
    assert!(
        warnings.iter().any(|w| w.to_string().contains("weak")),
        "{warnings:?}"
    );
    assert_eq!(summary["n_records"], 400);
}

#[test]
fn density_metadata_records_rule_bandwidth() {
    let dir = tempfile::tempdir().unwrap();
    simulated_sample(dir.path());
    let mut args = vec!["estimate"];
    args.extend(SCHEMA);
    args.extend(["--out-dir", "e"]);
    assert_eq!(code(&cfmap(dir.path(), &args)), 0);
    let o = cfmap(
        dir.path(),
        &[
            "density", "--ite", "e/ite.csv", "--no-bootstrap", "--kernel", "epanechnikov", "--rule", "assumption2",
            "--P", "2", "--out-dir", "d",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let meta = json(&dir.path().join("d/density.meta.json"));
    let n = 800.0f64;
    let expected = (n.ln() / n).powf(1.0 / 6.0);
    assert!((meta["bandwidth"].as_f64().unwrap() - expected).abs() < 1e-12);
    assert_eq!(meta["kernel"], "epanechnikov");
    let csv = std::fs::read_to_string(dir.path().join("d/density.csv")).unwrap();
    assert!(csv.starts_with("delta,f_hat,lower,upper,bandwidth,kernel"));
    assert_eq!(csv.lines().count(), 513);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    simulated_sample(dir.path());
    std::fs::write(
        dir.path().join("cfg.json"),
        r#"{"estimator": {"propensity_tol": 0.05, "monotonize": true}, "density": {"grid_points": 64}}"#,
    )
    .unwrap();
    let mut args = vec!["--config", "cfg.json", "estimate"];
    args.extend(SCHEMA);
    args.extend(["--propensity-tol", "0.01", "--out-dir", "e"]);
    assert_eq!(code(&cfmap(dir.path(), &args)), 0);
    let cfg = &json(&dir.path().join("e/summary.json"))["config"]["estimator"];
    assert_eq!(cfg["propensity_tol"], 0.01);
    assert_eq!(cfg["monotonize"], true);

    let o = cfmap(
        dir.path(),
        &["--config", "cfg.json", "density", "--ite", "e/ite.csv", "--no-bootstrap", "--out-dir", "d"],
    );
    assert_eq!(code(&o), 0);
    let csv = std::fs::read_to_string(dir.path().join("d/density.csv")).unwrap();
    assert_eq!(csv.lines().count(), 65);

    std::fs::write(dir.path().join("bad.json"), r#"{"estimator": {"nonsense": 1}}"#).unwrap();
    let mut args = vec!["--config", "bad.json", "estimate"];
    args.extend(SCHEMA);
    args.extend(["--out-dir", "e2"]);
    assert_eq!(code(&cfmap(dir.path(), &args)), 2);
}

#[test]
fn simulate_report_has_requested_design() {
    let dir = tempfile::tempdir().unwrap();
    let o = cfmap(
        dir.path(),
        &["simulate", "--n", "600", "--gamma1", "0.3", "--reps", "10", "--seed", "7", "--json"],
    );
    assert_eq!(code(&o), 0);
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    let row = report.get("row").unwrap_or(&report);
    assert!(row.to_string().contains("ave_rmse"), "{report}");
    assert_eq!(code(&cfmap(dir.path(), &["simulate", "--design", "nonsense"])), 2);
}
