use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nctorus::psido::GradedSymbol;
use serde_json::Value;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn nct(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nct")).args(args).output().expect("binary runs")
}

fn run_into(cmd: &str, config: &str, out: &Path, extra: &[&str]) -> Output {
    let cfg = configs().join(config);
    let mut args = vec![cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    nct(&args)
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn flat_weyl_run_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_into("weyl", "flat_tau_2i.json", dir.path(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = json(&dir.path().join("weyl_report.json"));
    assert_eq!(r["schema_version"], 1);
    let ratio = r["ratio"].as_f64().unwrap();
    assert!((0.97..=1.03).contains(&ratio), "{ratio}");
    assert!((r["expected"].as_f64().unwrap() - std::f64::consts::PI / 2.0).abs() < 1e-12);
    let stair = fs::read_to_string(dir.path().join("staircase.csv")).unwrap();
    assert!(stair.starts_with("lambda,count\r\n"));
    let manifest = json(&dir.path().join("manifest.json"));
    assert_eq!(manifest["command"], "weyl");
    assert!(manifest["started_unix_ms"].as_u64().is_some());
}

#[test]
fn outputs_are_deterministic_and_replayable() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    assert!(run_into("weyl", "perturbed.json", a.path(), &["--bandwidth", "16"]).status.success());
    assert!(run_into("weyl", "perturbed.json", b.path(), &["--bandwidth", "16"]).status.success());
    let m = a.path().join("manifest.json");
    let replay = nct(&["replay", m.to_str().unwrap(), "--out", c.path().to_str().unwrap()]);
    assert!(replay.status.success(), "{}", String::from_utf8_lossy(&replay.stderr));
    for f in ["spectrum.csv", "staircase.csv", "weyl_report.json", "config.json"] {
        let x = fs::read(a.path().join(f)).unwrap();
        assert_eq!(x, fs::read(b.path().join(f)).unwrap(), "{f}");
        assert_eq!(x, fs::read(c.path().join(f)).unwrap(), "{f} on replay");
    }
    assert_eq!(json(&a.path().join("config.json"))["bandwidth"], 16);
}

#[test]
fn heat_contour_preset_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_into("heat", "heat_contour_sanity.json", dir.path(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let r = json(&dir.path().join("heat_report.json"));
    assert!(r["contour_check"]["max_error"].as_f64().unwrap() < 1e-8);
    let csv = fs::read_to_string(dir.path().join("heat_trace.csv")).unwrap();
    assert!(csv.lines().count() > 4);
}

#[test]
fn flat_heat_gives_pi() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_into("heat", "flat_tau_i.json", dir.path(), &["--bandwidth", "120"]);
    assert!(out.status.success());
    let r = json(&dir.path().join("heat_report.json"));
    for v in [&r["b0"]["quadrature"]["value"], &r["b0"]["fit"], &r["b0"]["closed_form"]] {
        assert!((v.as_f64().unwrap() - std::f64::consts::PI).abs() < 0.01);
    }
}

#[test]
fn connes_presets() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_into("residue", "connes_flat_resolvent.json", dir.path(), &[]);
    assert!(out.status.success());
    let r = json(&dir.path().join("residue_report.json"));
    assert!((r["residue"]["re"].as_f64().unwrap() - 2.0 * std::f64::consts::PI).abs() < 1e-10);

    let out = run_into("connes-trace", "connes_flat_resolvent.json", dir.path(), &["--bandwidth", "40"]);
    assert!(out.status.success());
    let r = json(&dir.path().join("connes_trace_report.json"));
    let d = r["result"]["dixmier"]["value"].as_f64().unwrap();
    assert!((d / std::f64::consts::PI - 1.0).abs() < 0.15, "{d}");

    let out = run_into("connes-trace", "connes_order_minus_three.json", dir.path(), &[]);
    assert!(out.status.success());
    let r = json(&dir.path().join("connes_trace_report.json"));
    assert_eq!(r["result"]["dixmier"]["vanishing"], true);
    assert_eq!(r["result"]["residue"], 0.0);
}

#[test]
fn compose_emits_a_symbol() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_into("compose", "compose.json", dir.path(), &[]);
    assert!(out.status.success());
    let r = json(&dir.path().join("compose_report.json"));
    let s: GradedSymbol = serde_json::from_value(r["symbol"].clone()).unwrap();
    assert_eq!(s.top_order(), 2);
    assert!(r["operator_check"]["max_diff"].as_f64().unwrap() < 1e-10);
}

#[test]
fn config_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\n  \"bandwidth\": 8,\n  \"tau\": [0.0, 0.0]\n}\n").unwrap();
    let out = nct(&["weyl", "--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.json:3:"), "{err}");

    fs::write(&bad, "{\n  \"bandwidth\": 8,\n  \"pad\": -1\n}\n").unwrap();
    let out = nct(&["weyl", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.json:3:"));
}

#[test]
fn shipped_configs_round_trip() {
    for entry in fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        let cfg = nctorus_cli::ExperimentConfig::load(&path).unwrap();
        let again = nctorus_cli::ExperimentConfig::parse(&cfg.to_json(), "emitted").unwrap();
        assert_eq!(cfg, again, "{}", path.display());
    }
}

#[test]
fn verify_reports_tap_and_negative_control() {
    let out = nct(&["verify", "--only", "5,8"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.starts_with("1..2\n"));
    assert!(text.contains("ok 5 - ") && text.contains("ok 8 - "));
    // tolerances far below the achieved accuracy must fail with diagnostics
    let out = nct(&["verify", "--only", "3,6", "--tolerance-scale", "1e-9"]);
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("not ok 3 - ") && text.contains("not ok 6 - "), "{text}");
}
