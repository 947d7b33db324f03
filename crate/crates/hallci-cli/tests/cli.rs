use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn hallci(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hallci"))
        .args(args)
        .env("HALLCI_OUT", out)
        .output()
        .expect("run hallci")
}

fn report(out: &Path, name: &str) -> Value {
    serde_json::from_slice(&std::fs::read(out.join(format!("{name}.json"))).unwrap()).unwrap()
}

fn checks(doc: &Value) -> Vec<(String, bool)> {
    doc["checks"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| (c["name"].as_str().unwrap().to_string(), c["pass"].as_bool().unwrap()))
        .collect()
}

#[test]
fn helicity_of_the_background_matches_its_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let o = hallci(&["helicity", "--m", "1", "--grid", "256", "--t", "0.55"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let doc: Value = serde_json::from_slice(&o.stdout).unwrap();
    let value = doc["result"]["value"].as_f64().unwrap();
    assert!((value - 78.9568).abs() < 1e-4, "{value}");
    assert!(doc["all_pass"].as_bool().unwrap());
    // The default output directory comes from the environment.
    assert!(dir.path().join("helicity.json").is_file());
    assert!(dir.path().join("helicity.cfg").is_file());
}

#[test]
fn missing_config_is_reported_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let o = hallci(&["iterate", "--config", "missing.cfg"], dir.path());
    assert_ne!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stderr).contains("config not found"));
}

#[test]
fn violated_schedule_constraint_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "iterate", "--set", "schedule=paper", "--set", "a=2", "--set", "b=2", "--set", "beta=0.01", "--set",
        "epsilon=0.125", "--set", "q=1", "--set", "alpha1=0.25", "--set", "alpha2=0.75",
    ];
    let o = hallci(&args, dir.path());
    assert_ne!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stderr).contains("b > 1000/ε violated"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "gird=64\n").unwrap();
    let o = hallci(&["helicity", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown config key 'gird'"));
}

#[test]
fn block_verification_reports_both_derivative_routes() {
    let dir = tempfile::tempdir().unwrap();
    let o = hallci(&["verify-blocks", "--mu", "8", "--sigma", "2", "--family", "1"], dir.path());
    let doc = report(dir.path(), "verify-blocks");
    let all = checks(&doc);
    assert_eq!(all.len(), 6 * 6 * 2);
    assert!(all.iter().filter(|(n, _)| n.ends_with("(closed form)")).all(|(_, p)| *p));
    // The sampled bumps alias at 1024^2, so the spectral route cannot reach 1e-10 and the
    // run exits non-zero rather than hiding it.
    let spectral_ok = all.iter().filter(|(n, _)| n.ends_with("(spectral)")).all(|(_, p)| *p);
    assert_eq!(o.status.code(), Some(if spectral_ok { 0 } else { 1 }));
}

#[test]
fn config_file_drives_a_step_and_is_echoed_back() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# background step\ngrid=128\nnt=33\nmu=8\nsigma=2\nl=0.2\n").unwrap();
    let out = dir.path().join("run");
    let o = hallci(
        &["iterate", "--config", cfg.to_str().unwrap(), "--l", "0.1", "--threads", "2", "--out", out.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let resolved = std::fs::read_to_string(out.join("iterate.cfg")).unwrap();
    assert!(resolved.contains("grid=128\n") && resolved.contains("l=0.1\n") && resolved.contains("threads=2\n"));
    let doc = report(&out, "iterate");
    assert!(checks(&doc).iter().all(|(_, p)| *p));
    assert!(doc["result"]["inductive"]["support_inclusion"].as_bool().unwrap());
    let ledger = std::fs::read_to_string(out.join("ledger.csv")).unwrap();
    assert!(ledger.starts_with("part,norm_kind,value,paper_bound_formula,parameters\n"));
    assert_eq!(ledger.lines().count(), 1 + 17 * 2 + 2);

    // The summary of the run directory agrees with the run.
    let s = hallci(&["report", "--dir", out.to_str().unwrap(), "--out", out.to_str().unwrap()], dir.path());
    assert_eq!(s.status.code(), Some(0));
}

#[test]
fn report_fails_when_any_recorded_check_failed() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(hallci(&["calibrate-delta"], dir.path()).status.code(), Some(0));
    let fake = r#"{"command":"fake","checks":[{"name":"x","tolerance":1.0,"value":2.0,"pass":false}]}"#;
    std::fs::write(dir.path().join("fake.json"), fake).unwrap();
    let o = hallci(&["report"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let doc = report(dir.path(), "report");
    assert_eq!(doc["result"]["runs"].as_array().unwrap().len(), 2);
}
