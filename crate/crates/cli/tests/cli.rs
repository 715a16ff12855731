use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn rmfs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rmfs")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_lists_every_subcommand() {
    let o = rmfs(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for sub in [
        "run",
        "experiment",
        "gen-layout",
        "validate-layout",
        "serve",
        "replay",
        "report",
    ] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn single_run_prints_metrics() {
    let o = rmfs(&[
        "run",
        "--scenario",
        "homogeneous",
        "--scheduler",
        "ta",
        "--planner",
        "cbs",
        "--pattern",
        "os",
        "--seed",
        "7",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(m["sr"], 100.0);
    assert_eq!(m["generated"], 30);
}

#[test]
fn bad_flag_values_exit_2_and_name_the_flag() {
    for (args, flag) in [
        (vec!["run", "--planner", "bogus"], "--planner"),
        (vec!["run", "--scheduler", "fifo"], "--scheduler"),
        (vec!["run", "--scenario", "moon"], "--scenario"),
        (vec!["run", "--failures", "sometimes"], "--failures"),
        (vec!["run", "--horizon", "0"], "--horizon"),
        (vec!["run", "--sed", "1"], "--sed"),
    ] {
        let o = rmfs(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(stderr(&o).contains(flag), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn runtime_errors_exit_1() {
    let o = rmfs(&["run", "--planner", "external:dhc"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("external"));
    let o = rmfs(&["validate-layout", "/nonexistent/layout.json"]);
    assert_eq!(o.status.code(), Some(1));
    let o = rmfs(&["run", "--failures", "scripted"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn generated_layouts_validate_and_run() {
    let dir = tempfile::tempdir().unwrap();
    let layout = dir.path().join("small.json");
    let o = rmfs(&[
        "gen-layout",
        "--width",
        "12",
        "--height",
        "10",
        "--shelves",
        "8",
        "--stations",
        "2",
        "--agvs",
        "3",
        "--out",
        p(&layout),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = rmfs(&["validate-layout", p(&layout)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("ok: 12x10, 8 shelves, 2 stations, 3 agvs"));
    let o = rmfs(&["run", "--layout", p(&layout), "--orders", "5", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let broken = dir.path().join("broken.json");
    std::fs::write(
        &broken,
        r#"{"width":4,"height":4,"shelves":[{"id":0,"x":9,"y":9,"size":1,"contents":[]}]}"#,
    )
    .unwrap();
    let o = rmfs(&["validate-layout", p(&broken)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("invalid layout"), "{}", stderr(&o));
}

#[test]
fn events_replay_to_the_same_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let events = dir.path().join("run.jsonl");
    let trace = dir.path().join("trace.csv");
    let o = rmfs(&[
        "run",
        "--scenario",
        "fault",
        "--planner",
        "cbs",
        "--seed",
        "3",
        "--deterministic-ct",
        "--events",
        p(&events),
        "--trace",
        p(&trace),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = rmfs(&["replay", p(&events)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("matches recorded run_end"));
    let trace = std::fs::read_to_string(&trace).unwrap();
    assert_eq!(
        trace.lines().next().unwrap(),
        "order_id,sku,station,release_step,completed_step,status"
    );
    assert_eq!(trace.lines().count(), 31);
}

#[test]
fn experiment_rows_feed_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("results.csv");
    for sch in ["ta", "rd"] {
        let o = rmfs(&[
            "experiment",
            "--repeats",
            "3",
            "--scheduler",
            sch,
            "--deterministic-ct",
            "--out",
            p(&csv),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert!(stdout(&o).contains("runs 3"));
    }
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "env,scheduler,planner,pattern,seed,sr,ct_ms,tp,makespan,failures,collisions"
    );
    assert_eq!(text.lines().count(), 7, "one header, then a row per run");
    let o = rmfs(&["report", p(&csv)]);
    assert_eq!(o.status.code(), Some(0));
    let table = stdout(&o);
    assert!(table.contains("| Ho | RD+astar | 3 |"));
    assert!(table.contains("| Ho | TA+astar | 3 |"));

    let bad = dir.path().join("bad.csv");
    std::fs::write(
        &bad,
        "env,scheduler,planner,pattern,seed,sr,ct_ms,makespan,failures,collisions\n",
    )
    .unwrap();
    let o = rmfs(&["report", p(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing column `tp`"));
}

#[test]
fn scripted_failures_come_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("fail.csv");
    std::fs::write(&script, "step,agv_id\n10,2\n30,5\n").unwrap();
    let events = dir.path().join("run.jsonl");
    let o = rmfs(&[
        "run",
        "--failures",
        "scripted",
        "--failure-script",
        p(&script),
        "--down-steps",
        "15",
        "--events",
        p(&events),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(m["failures"], 2);
    let failures: Vec<Value> = std::fs::read_to_string(&events)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .filter(|e| e["kind"] == "failure")
        .collect();
    assert_eq!(failures[0]["payload"]["agv"], 2);
    assert_eq!(
        failures[0]["payload"]["recovery_at"].as_u64().unwrap() - failures[0]["payload"]["at"].as_u64().unwrap(),
        15
    );
    assert_eq!(failures[1]["payload"]["agv"], 5);
}
