use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn npdg(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_npdg"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\nstdout: {}\nstderr: {}", o.status.code(), String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
}

/// Design, identify and fit the LISC into `dir`, then simulate it.
fn full_chain(dir: &Path) {
    ok(&npdg(&["design-fisc", "--seed", "3"], dir));
    ok(&npdg(&["identify-npdg", "--seed", "3"], dir));
    ok(&npdg(&["design-lisc", "--seed", "3"], dir));
    ok(&npdg(&["simulate", "--seed", "3", "--controller-kind", "lisc"], dir));
}

#[test]
fn chain_is_deterministic_and_verifiable() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    full_chain(a.path());
    full_chain(b.path());
    for name in ["fisc.json", "identification_data.csv", "npdg.json", "residuals.json", "controller.json", "cs_report.json", "trajectory.csv", "metrics.csv"] {
        let x = fs::read(a.path().join(name)).unwrap_or_else(|_| panic!("{name} missing"));
        assert_eq!(x, fs::read(b.path().join(name)).unwrap(), "{name} differs between runs");
    }
    let ctrl: serde_json::Value = serde_json::from_slice(&fs::read(a.path().join("controller.json")).unwrap()).unwrap();
    assert_eq!(ctrl["k_li"][0].as_array().unwrap().len(), 5);

    let v = npdg(&["verify"], a.path());
    ok(&v);
    let checks: serde_json::Value = serde_json::from_slice(&fs::read(a.path().join("verify.json")).unwrap()).unwrap();
    assert!(checks.as_array().unwrap().iter().all(|c| c["ok"] == true));

    // Every command appended one manifest line listing its outputs.
    let manifest = fs::read_to_string(a.path().join("manifest.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = manifest.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0]["command"], "design-fisc");
    assert_eq!(lines[0]["seed"], 3);
    assert!(lines.iter().all(|l| !l["outputs"].as_array().unwrap().is_empty()));

    // A corrupted surrogate fails verification and names the broken constraints.
    let path = a.path().join("npdg.json");
    let mut npdg_file: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
    for row in npdg_file["pp"].as_array_mut().unwrap() {
        for v in row.as_array_mut().unwrap() {
            *v = serde_json::json!(v.as_f64().unwrap() * 1.01);
        }
    }
    fs::write(&path, serde_json::to_vec(&npdg_file).unwrap()).unwrap();
    let bad = npdg(&["verify"], a.path());
    assert_eq!(bad.status.code(), Some(3));
    let err = String::from_utf8_lossy(&bad.stderr);
    assert!(err.contains("npdg.riccati") && err.contains("npdg.gain_match"), "{err}");
}

#[test]
fn sweep_writes_one_row_per_snr() {
    let dir = tempfile::tempdir().unwrap();
    ok(&npdg(&["design-fisc"], dir.path()));
    ok(&npdg(&["sweep", "--snr", "5,10,20,30", "--seeds", "2"], dir.path()));
    let text = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 5, "{text}");
    assert!(rows[0].starts_with("snr_db,"));
    let first = fs::read(dir.path().join("sweep.csv")).unwrap();
    ok(&npdg(&["sweep", "--snr", "5,10,20,30", "--seeds", "2"], dir.path()));
    assert_eq!(first, fs::read(dir.path().join("sweep.csv")).unwrap());
}

#[test]
fn user_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("bad.json");
    fs::write(&cfg, "{ not json").unwrap();
    assert_eq!(npdg(&["design-fisc", "--config", cfg.to_str().unwrap()], d).status.code(), Some(2));
    fs::write(&cfg, r#"{"theta0": [1.0, 2.0]}"#).unwrap();
    assert_eq!(npdg(&["design-fisc", "--config", cfg.to_str().unwrap()], d).status.code(), Some(2));
    fs::write(&cfg, r#"{"unknown_field": 1}"#).unwrap();
    assert_eq!(npdg(&["design-fisc", "--config", cfg.to_str().unwrap()], d).status.code(), Some(2));
    // Later stages without their inputs.
    assert_eq!(npdg(&["design-lisc"], d).status.code(), Some(2));
    assert_eq!(npdg(&["verify", "--fisc", d.join("missing.json").to_str().unwrap()], d).status.code(), Some(2));
    let empty = d.join("empty.csv");
    fs::write(&empty, "").unwrap();
    ok(&npdg(&["design-fisc"], d));
    assert_eq!(npdg(&["identify-npdg", "--trajectory", empty.to_str().unwrap()], d).status.code(), Some(2));
    assert_eq!(npdg(&["no-such-command"], d).status.code(), Some(2));
}

#[test]
fn infeasible_distance_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    ok(&npdg(&["design-fisc"], dir.path()));
    let o = npdg(&["identify-npdg", "--delta", "0.001", "--snr", "20"], dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("distance_bound"));
}
