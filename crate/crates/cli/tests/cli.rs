use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn repo(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn golden(name: &str) -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)).unwrap()
}

fn scora(args: &[&str], scenario: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scora"))
        .args(args)
        .arg("--scenario")
        .arg(scenario)
        .arg("--out-dir")
        .arg(out)
        .output()
        .unwrap()
}

fn summary(out: &Path) -> Value {
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert!(v["runtime_seconds"].as_f64().unwrap() >= 0.0);
    v.as_object_mut().unwrap().remove("runtime_seconds");
    v
}

#[test]
fn free_space_pipeline_matches_golden_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = scora(
        &["pipeline", "--seed", "7", "--trials", "200", "--upsample", "50"],
        &repo("scenarios/free_space.json"),
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let read = |f: &str| std::fs::read_to_string(dir.path().join(f)).unwrap();
    assert_eq!(read("trajectory.csv"), golden("free_space_trajectory.csv"));
    assert_eq!(read("risk_trace.csv"), golden("free_space_risk_trace.csv"));
    let expected: Value = serde_json::from_str(&golden("free_space_summary.json")).unwrap();
    assert_eq!(summary(dir.path()), expected);

    let trials = read("mc_trials.csv");
    assert_eq!(trials.lines().count(), 201);
    assert!(trials.lines().skip(1).all(|l| l.starts_with(char::is_numeric) && l.ends_with(",0,,0")));
    let hist = read("mc_histogram.csv");
    assert_eq!(hist.lines().next(), Some("index,time,count"));
    assert_eq!(hist.lines().count(), 51);
    assert_eq!(hist.lines().last(), Some("49,5,0"));
}

#[test]
fn solve_then_validate_matches_pipeline() {
    let scenario = repo("scenarios/free_space.json");
    let staged = tempfile::tempdir().unwrap();
    let log = staged.path().join("iterations.jsonl");
    let solved = Command::new(env!("CARGO_BIN_EXE_scora"))
        .args(["solve", "--mode", "eps-opt", "--log-iterations"])
        .arg(&log)
        .arg("--scenario")
        .arg(&scenario)
        .arg("--out-dir")
        .arg(staged.path())
        .output()
        .unwrap();
    assert_eq!(solved.status.code(), Some(0));
    assert!(summary(staged.path())["monte_carlo"].is_null());
    let lines = std::fs::read_to_string(&log).unwrap();
    assert!(lines.lines().count() >= 1);
    for line in lines.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert!(v["iteration"].is_u64());
    }

    let validated = scora(&["validate", "--seed", "3", "--trials", "100"], &scenario, staged.path());
    assert_eq!(validated.status.code(), Some(0));

    let direct = tempfile::tempdir().unwrap();
    let piped = scora(&["pipeline", "--mode", "eps-opt", "--seed", "3", "--trials", "100"], &scenario, direct.path());
    assert_eq!(piped.status.code(), Some(0));
    assert_eq!(summary(staged.path()), summary(direct.path()));
}

#[test]
fn parking_allocation_stays_within_budget() {
    let dir = tempfile::tempdir().unwrap();
    let out = scora(&["pipeline", "--seed", "7", "--trials", "500"], &repo("scenarios/parking.json"), dir.path());
    let s = summary(dir.path());
    assert_eq!(out.status.code(), Some(s["exit_code"].as_i64().unwrap() as i32));
    assert_eq!(s["status"], "converged");
    let allocated = s["delta"].as_f64().unwrap() + s["gamma"].as_f64().unwrap();
    assert!(allocated <= 0.2 + 1e-6, "{allocated}");
    let mc = &s["monte_carlo"];
    assert!(mc["p_hat"].as_f64().unwrap() <= 0.2 + 2.0 * mc["standard_error"].as_f64().unwrap());
    let trace = std::fs::read_to_string(dir.path().join("risk_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 17 * 3);
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn legacy_or_unversioned_scenarios_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(repo("scenarios/free_space.json")).unwrap();
    let unversioned = write(dir.path(), "a.json", &text.replace("\"version\": 1,", ""));
    let legacy = write(dir.path(), "b.json", &text.replace("\"version\": 1,", "\"version\": 0,"));
    for path in [unversioned, legacy] {
        let out = scora(&["solve"], &path, &dir.path().join("out"));
        assert_eq!(out.status.code(), Some(4));
        assert!(String::from_utf8_lossy(&out.stderr).contains("unsupported scenario version"));
    }
}

#[test]
fn schema_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(repo("scenarios/free_space.json")).unwrap();
    let bad = write(dir.path(), "bad.json", &text.replace("\"horizon\": 10", "\"horizon\": \"ten\""));
    let out = scora(&["pipeline"], &bad, &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("horizon"));

    let missing = scora(&["solve"], &dir.path().join("nope.json"), &dir.path().join("out"));
    assert_eq!(missing.status.code(), Some(4));
}

#[test]
fn validate_without_a_solution_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = scora(&["validate"], &repo("scenarios/free_space.json"), dir.path());
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn unreachable_goal_reports_infeasible() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(repo("scenarios/free_space.json")).unwrap();
    // Goal inside a wall with no position uncertainty.
    let blocked = text.replace(
        "\"obstacles\": []",
        r#""obstacles": [{"name": "wall", "shape": {"type": "box", "half_extents": [1.0, 1.0, 0.0], "pose": {"translation": [4.0, 2.0, 0.0]}}}]"#,
    );
    let path = write(dir.path(), "blocked.json", &blocked);
    let out = scora(&["pipeline", "--trials", "50"], &path, &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(2));
    assert!(summary(&dir.path().join("out"))["monte_carlo"].is_null());
}

#[test]
fn oracle_audits_every_bound() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(repo("scenarios/free_space.json")).unwrap();
    let near = text.replace(
        "\"obstacles\": []",
        r#""obstacles": [{"name": "post", "shape": {"type": "sphere", "radius": 0.3, "pose": {"translation": [2.0, 1.7, 0.0]}}, "covariance": [[0.04, 0.0], [0.0, 0.04]]}]"#,
    );
    let path = write(dir.path(), "near.json", &near);
    let out = scora(&["oracle", "--trials", "20000", "--seed", "1"], &path, dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("oracle.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("waypoint,obstacle,link,epsilon,p_hat,standard_error,sound"));
    assert_eq!(csv.lines().count(), 12);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")));
}
