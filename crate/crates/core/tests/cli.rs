use std::path::Path;
use std::process::Command;

use qutrit_sim::dynamics::{effective_decoherence_time, DecoherenceModel};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_qutrit-sim"))
}

#[test]
fn chi_run_writes_its_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["--dims", "3,2,3", "--out"])
        .arg(dir.path())
        .args(["chi", "--from", "7.0", "--to", "7.64", "--points", "3"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("chi.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "omegaC_GHz,chi101_MHz,chi102_MHz,chi201_MHz,chi202_MHz");
    assert_eq!(csv.lines().count(), 4);
    assert!(String::from_utf8_lossy(&out.stdout).contains("chi.csv"));
}

#[test]
fn failure_prints_an_error_record_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["--dims", "2,2,2", "--out"])
        .arg(dir.path().join("never"))
        .args(["chi", "--points", "2"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let record: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(record["error"], "InvalidDimension");
    assert!(!dir.path().join("never").exists());
}

#[test]
fn leakage_without_amplitude_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().args(["--dims", "3,2,3", "--out"]).arg(dir.path()).arg("leakage").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let record: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(record["error"], "InvalidParameter");
}

#[test]
fn shipped_tables_average_to_the_effective_times() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/decoherence");
    let tables = DecoherenceModel::from_table_dir(&dir).unwrap();
    let trajectory: Vec<(f64, f64)> = (0..=20).map(|k| (k as f64, 7.64 - 0.04 * k as f64)).collect();
    let eff = effective_decoherence_time(&tables, &trajectory).unwrap();
    let want = DecoherenceModel::effective_times();
    let (a, b) = (serde_json::to_value(&eff).unwrap(), serde_json::to_value(&want).unwrap());
    for q in ["q1", "q2"] {
        for (k, v) in b[q].as_object().unwrap() {
            let got = a[q][k].as_f64().unwrap();
            assert!((got - v.as_f64().unwrap()).abs() < 1e-9, "{q} {k}: {got}");
        }
    }
}
