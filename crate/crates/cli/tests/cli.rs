use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn rdmpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rdmpc")).args(args).output().unwrap()
}

fn scenario(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
        .display()
        .to_string()
}

fn report_entries(text: &str, prefix: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.split_once(" = "))
        .filter(|(k, _)| k.starts_with(prefix))
        .map(|(k, v)| (k[prefix.len()..].to_string(), v.to_string()))
        .collect()
}

#[test]
fn missing_scenario_is_a_usage_error() {
    let out = rdmpc(&["certify", "/nonexistent/scenario.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(rdmpc(&["fly"]).status.code(), Some(2));
}

#[test]
fn malformed_scenario_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "name = \"bad\"\ntotal_time = \"ten\"\n").unwrap();
    let out = rdmpc(&["certify", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn reference_certificate_is_admissible() {
    let out = rdmpc(&["certify", &scenario("three_unicycles.toml")]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("agent1.admissible = true"));
}

#[test]
fn strong_disturbance_fails_certification() {
    let out = rdmpc(&["certify", &scenario("three_unicycles_strong.toml")]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn nonpositive_duration_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = rdmpc(&[
        "run",
        &scenario("three_unicycles.toml"),
        "--out",
        dir.path().to_str().unwrap(),
        "--duration",
        "0",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runs_are_byte_identical_and_reverify_identically() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario("three_unicycles.toml");
    let mut csvs = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        // half a second is too short to converge, so verification fails
        let out = rdmpc(&["run", &sc, "--out", out_dir.to_str().unwrap(), "--duration", "0.5"]);
        assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
        let report = fs::read_to_string(out_dir.join("report.txt")).unwrap();
        assert!(report.contains("run_error = none"));
        assert!(report.contains("verify.convergence.pass = false"));
        assert!(report.contains("verify.inter_agent.pass = true"));
        csvs.push(fs::read(out_dir.join("trajectory.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);

    let out_dir = dir.path().join("a");
    let report = fs::read_to_string(out_dir.join("report.txt")).unwrap();
    let log = out_dir.join("trajectory.csv");
    let out = rdmpc(&["verify", log.to_str().unwrap(), &sc]);
    assert_eq!(out.status.code(), Some(1));
    let reverified = String::from_utf8(out.stdout).unwrap();
    assert_eq!(report_entries(&report, "verify."), report_entries(&reverified, ""));

    let out = rdmpc(&["manifest", log.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let manifest = String::from_utf8(out.stdout).unwrap();
    assert!(manifest.lines().any(|l| l == "3 t"));
}

#[test]
fn seed_override_and_diagnostics_are_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("s");
    let out = rdmpc(&[
        "run",
        &scenario("three_unicycles.toml"),
        "--out",
        out_dir.to_str().unwrap(),
        "--duration",
        "0.1",
        "--seed",
        "21",
        "--verbose-solver",
    ]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    let report = fs::read_to_string(out_dir.join("report.txt")).unwrap();
    assert!(report.contains("seed = 21"));
    assert!(report.contains("run_error = none"));
    let diagnostics = fs::read_to_string(out_dir.join("diagnostics.csv")).unwrap();
    assert!(diagnostics.starts_with("step,agent,outer,inner"));
    assert!(diagnostics.lines().count() > 1);
}

#[test]
fn reference_run_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = rdmpc(&["run", &scenario("three_unicycles.toml"), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let report = fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert!(report.contains("verify.pass = true"));
}
