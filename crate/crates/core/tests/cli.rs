use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hjframe"))
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

fn run(args: &[&str], config: Option<&Path>, out: &Path) -> Output {
    let mut cmd = bin();
    cmd.args(args).arg("--out").arg(out);
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.output().unwrap()
}

fn report(out: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap()
}

#[test]
fn selftest_reports_unit_critical_value() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["selftest"], None, dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(dir.path());
    let g = r["result"]["gamma"].as_f64().unwrap();
    assert!((g - 1.0).abs() <= 0.05, "gamma {g}");
    assert_eq!(r["ok"], true);
}

#[test]
fn missing_coupling_row_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(scenario("mixed_pair.toml"))
        .unwrap()
        .replace("coupling = [[1.0, -1.0], [-1.0, 1.0]]", "coupling = [[1.0, -1.0]]");
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, text).unwrap();
    let o = run(&["gamma"], Some(&cfg), &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("row count ≠ M"), "{err}");
    assert!(err.contains("bad.toml:"), "{err}");
}

#[test]
fn missing_seed_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(scenario("scalar_cosine.toml"))
        .unwrap()
        .replace("seed = 1\n", "");
    let cfg = dir.path().join("noseed.toml");
    std::fs::write(&cfg, text).unwrap();
    let o = run(&["sample"], Some(&cfg), &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenario("identical_pair.toml");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(run(&["action", "--threads", "1"], Some(&cfg), &a).status.success());
    assert!(run(&["action", "--threads", "3"], Some(&cfg), &b).status.success());
    assert_eq!(
        std::fs::read(a.join("report.json")).unwrap(),
        std::fs::read(b.join("report.json")).unwrap()
    );
}

#[test]
fn report_round_trips_as_config() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    let o = run(&["solve", "--seed", "5", "--alpha", "1.2"], Some(&scenario("scalar_cosine.toml")), &first);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["solve"], Some(&first.join("report.json")), &second);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read(first.join("report.json")).unwrap(),
        std::fs::read(second.join("report.json")).unwrap()
    );
    assert_eq!(
        std::fs::read(first.join("value.csv")).unwrap(),
        std::fs::read(second.join("value.csv")).unwrap()
    );
    let r = report(&first);
    assert_eq!(r["config"]["seed"], 5);
    assert_eq!(r["config"]["solver"]["alpha"], 1.2);
}

#[test]
fn solve_writes_fields_and_paths() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["solve", "--dump-paths"], Some(&scenario("scalar_cosine.toml")), dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("value.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("x,mode,value"));
    assert_eq!(csv.lines().count(), 101);
    let dat = std::fs::read_to_string(dir.path().join("value.dat")).unwrap();
    assert!(dat.starts_with("# x v_0\n"));
    let path = std::fs::read_to_string(dir.path().join("paths/path_0.txt")).unwrap();
    assert!(path.starts_with("# 1 1 "));
    let r = report(dir.path());
    let solve = &r["result"]["solve"];
    assert_eq!(solve["pin_values"][0], 0.0);
    assert_eq!(solve["saturated"], 0);
    let res = &solve["residual"];
    assert!(res["sub_max"].as_f64().unwrap() <= res["tol"].as_f64().unwrap());
}

#[test]
fn action_reports_estimate_and_series() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["action", "--samples", "2000"], Some(&scenario("scalar_cosine.toml")), dir.path());
    assert!(o.status.success());
    let r = report(dir.path());
    let est = &r["result"]["estimates"];
    assert_eq!(est.as_array().unwrap().len(), 3);
    for key in ["mean", "stderr", "samples", "alpha", "breakdown"] {
        assert!(est[0].get(key).is_some(), "missing {key}");
    }
    assert_eq!(r["config"]["action"]["samples"], 2000);
    let dat = std::fs::read_to_string(dir.path().join("action.dat")).unwrap();
    assert!(dat.starts_with("# alpha mean stderr\n"));
    assert_eq!(dat.lines().count(), 4);
    // one mode: the Monte Carlo value is exact
    let mean = est[0]["mean"].as_f64().unwrap();
    let exact = r["result"]["exact"][0]["value"].as_f64().unwrap();
    assert!((mean - exact).abs() < 1e-9);
}

#[test]
fn aubry_subcommand_respects_pin_override() {
    let dir = tempfile::tempdir().unwrap();
    let inside = dir.path().join("in");
    let outside = dir.path().join("out");
    let cfg = scenario("scalar_cosine.toml");
    assert!(run(&["aubry"], Some(&cfg), &inside).status.success());
    assert!(run(&["aubry", "--pin-y", "0.5"], Some(&cfg), &outside).status.success());
    assert_eq!(report(&inside)["result"]["verdict"]["inside"], true);
    assert_eq!(report(&outside)["result"]["verdict"]["inside"], false);
}

#[test]
fn off_grid_pin_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["solve", "--pin-y", "0.123"], Some(&scenario("scalar_cosine.toml")), dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not a grid node"));
}

#[test]
fn config_is_required_outside_selftest() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gamma"], None, dir.path());
    assert_eq!(o.status.code(), Some(2));
}
