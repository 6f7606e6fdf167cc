use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_skloc");

fn skloc(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("valid json")
}

const LOG_Z_N10_SEED7: f64 = 6.773946070763964;

#[test]
fn gen_then_oracle_matches_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let g = skloc(dir.path(), &["gen", "--n", "10", "--beta", "0.3", "--seed", "7"]);
    assert!(g.status.success());
    let report = json(&skloc(dir.path(), &["oracle", "--tilt", "zeros"]));
    let log_z = report["log_z"].as_f64().unwrap();
    assert!((log_z - LOG_Z_N10_SEED7).abs() < 1e-12, "{log_z}");

    // Brute force over the instance file itself.
    let inst = skloc::SkInstance::load(dir.path().join("instance.json")).unwrap();
    let a = inst.couplings();
    let mut terms = Vec::new();
    for idx in 0..1u32 << 10 {
        let s: Vec<f64> = (0..10).map(|i| if idx >> i & 1 == 1 { -1.0 } else { 1.0 }).collect();
        let mut e = 0.0;
        for i in 0..10 {
            for j in 0..10 {
                e += s[i] * a[(i, j)] * s[j];
            }
        }
        terms.push(0.15 * e);
    }
    let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let brute = mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln();
    assert!((brute - log_z).abs() < 1e-10);
    assert_eq!(report["magnetization"].as_array().unwrap().len(), 10);
}

#[test]
fn oracle_accepts_explicit_tilts_and_wedges() {
    let dir = tempfile::tempdir().unwrap();
    assert!(skloc(dir.path(), &["gen", "--n", "4", "--beta", "0.0", "--seed", "1"]).status.success());
    let r = json(&skloc(dir.path(), &["oracle", "--tilt", "0.5,-1,0,2"]));
    let want: f64 = [0.5f64, -1.0, 0.0, 2.0].iter().map(|y| (2.0 * y.cosh()).ln()).sum();
    assert!((r["log_z"].as_f64().unwrap() - want).abs() < 1e-12);
    let w = json(&skloc(dir.path(), &["oracle", "--tilt", "0.5,-1,0,2", "--radius", "4"]));
    assert!((w["log_z"].as_f64().unwrap() - want).abs() < 1e-12);
    let bad = skloc(dir.path(), &["oracle", "--tilt", "1,2"]);
    assert_eq!(bad.status.code(), Some(2));
}

fn write_config(dir: &Path) {
    let cfg = r#"{
  "instance": {"kind": "generate", "n": 5, "beta": 0.2, "seed": 3},
  "num_samples": 4,
  "dynamics": {"horizon": 1.0, "eta": 0.1},
  "rejection": {"c1": 1.0, "c2": 1.0, "calibration_draws": 30, "c_cal": 1.0},
  "anneal": {"ladder_len": 5, "samples_per_rung": 8, "repeats": 1, "walk_steps": 5, "burn_in_steps": 10},
  "walk_steps": 20
}"#;
    std::fs::write(dir.join("c.json"), cfg).unwrap();
}

#[test]
fn sample_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path());
    for (out, fmt) in [("a.csv", "csv"), ("b.csv", "csv"), ("a.json", "json"), ("b.json", "json")] {
        let o = skloc(dir.path(), &["sample", "--config", "c.json", "--seed", "1", "--out", out, "--format", fmt]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let read = |f: &str| std::fs::read(dir.path().join(f)).unwrap();
    assert_eq!(read("a.csv"), read("b.csv"));
    assert_eq!(read("a.json"), read("b.json"));
    let csv = String::from_utf8(read("a.csv")).unwrap();
    assert!(csv.starts_with("# config_hash="));
    assert_eq!(csv.lines().count(), 5);
    let tel: serde_json::Value = serde_json::from_slice(&read("a.csv.telemetry.json")).unwrap();
    assert_eq!(tel["acceptance"]["accepts"].as_u64(), Some(4));

    let other = skloc(dir.path(), &["sample", "--config", "c.json", "--seed", "2"]);
    assert!(other.status.success());
    assert_ne!(String::from_utf8(other.stdout).unwrap(), csv);
}

#[test]
fn diagnose_covariance_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = skloc(
        dir.path(),
        &["diagnose", "covariance", "--n", "12", "--trajectories", "2", "--t", "0.5", "--eta", "0.1", "--out", "cov.json", "--values", "cov.csv"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("cov.json")).unwrap()).unwrap();
    assert_eq!(r["name"], "covariance_frobenius");
    assert_eq!(r["trials"].as_u64(), Some(2));
    assert!(r["mean"].as_f64().unwrap() >= 0.0);
    assert!(!r["config_hash"].as_str().unwrap().is_empty());
    let csv = std::fs::read_to_string(dir.path().join("cov.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn diagnose_wedge_reports_rate() {
    let dir = tempfile::tempdir().unwrap();
    let r = json(&skloc(dir.path(), &["diagnose", "wedge", "--t", "4", "--n", "1000", "--trials", "20"]));
    assert!((r["predicted"].as_f64().unwrap() - 0.02275).abs() < 1e-5);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), "{\n  \"instance\": {\"kind\": \"generate\",\n  \"n\": 5\n").unwrap();
    let o = skloc(dir.path(), &["sample", "--config", "bad.json"]);
    assert_eq!(o.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&o.stderr);
    assert!(msg.contains("line"), "{msg}");

    std::fs::write(
        dir.path().join("beta.json"),
        r#"{"instance": {"kind": "generate", "n": 5, "beta": 0.7, "seed": 1}, "num_samples": 1}"#,
    )
    .unwrap();
    assert_eq!(skloc(dir.path(), &["sample", "--config", "beta.json"]).status.code(), Some(2));
    assert_eq!(skloc(dir.path(), &["sample"]).status.code(), Some(2));
    assert_eq!(skloc(dir.path(), &["frobnicate"]).status.code(), Some(2));

    // A calibration that cannot finish is a runtime abort.
    std::fs::write(
        dir.path().join("abort.json"),
        r#"{"instance": {"kind": "generate", "n": 4, "beta": 0.2, "seed": 1}, "num_samples": 1,
            "dynamics": {"horizon": 1.0, "eta": 0.5, "solver": {"max_iters": 1}},
            "rejection": {"c1": 1.0, "calibration_draws": 2, "c_cal": 1e-6}}"#,
    )
    .unwrap();
    assert_eq!(skloc(dir.path(), &["sample", "--config", "abort.json"]).status.code(), Some(3));
}
