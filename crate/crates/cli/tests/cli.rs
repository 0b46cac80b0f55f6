use std::path::Path;
use std::process::{Command, Output};

fn cola(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cola")).args(args).current_dir(cwd).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_lists_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let o = cola(&["--help"], dir.path());
    assert!(o.status.success());
    for sub in ["train", "evaluate", "oracle", "report"] {
        assert!(stdout(&o).contains(sub), "missing {sub}");
    }
}

#[test]
fn train_then_report_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let o = cola(
        &["train", "--topology", "sws", "--grid", "500:1500:500", "--analytic", "--target-ms", "50", "--out", "p.json"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("trained 3 grid points"));

    let o = cola(&["report", "--policy", "p.json", "--baseline-rate", "100", "--cola-rate", "40"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("\"samples\""));
    assert!(stdout(&o).contains("break-even after"));

    let o = cola(
        &[
            "evaluate", "--topology", "sws", "--grid", "500:1500:500", "--analytic", "--target-ms", "50", "--policy-file",
            "p.json", "--policy", "cola", "--policy", "cpu:70", "--rates", "1000", "--segment-s", "60", "--settle-s", "30",
            "--out", "r.csv",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "users,policy,median_ms,p90_ms,failures_per_s,cost_units,samples");
    assert!(lines[1].starts_with("1000.0,cola,"));
    assert!(lines[2].starts_with("1000.0,cpu-70,"));
}

#[test]
fn oracle_prints_ranked_states() {
    let dir = tempfile::tempdir().unwrap();
    let o = cola(&["oracle", "--topology", "sws", "--rps", "1000", "--analytic", "--top", "3", "--out", "all.csv"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 4);
    assert!(out.starts_with("rank,state,reward,latency_ms,cost"));
    let all = std::fs::read_to_string(dir.path().join("all.csv")).unwrap();
    assert_eq!(all.lines().count(), 31);
}

#[test]
fn bad_inputs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let o = cola(&["train", "--grid", "500-1500", "--analytic"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("lower:upper:step"));

    let o = cola(&["train", "--topology", "missing.json"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("missing.json"));

    std::fs::write(dir.path().join("broken.json"), "{\n  \"services\": [\n    oops\n").unwrap();
    let o = cola(&["train", "--topology", "broken.json"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("broken.json") && stderr(&o).contains("line 3"), "{}", stderr(&o));

    let o = cola(&["evaluate", "--policy", "magic"], dir.path());
    assert!(!o.status.success());
}

#[test]
fn topology_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let doc = r#"{
  "services": [{"name": "api", "mu": 100.0, "max_replicas": 12}],
  "endpoints": [{"name": "get", "path": ["api"], "base_delay_ms": 10.0}],
  "cost_model": {"mode": "pod_count", "pods_per_vm": 1, "cost_per_unit": 2.0}
}"#;
    std::fs::write(dir.path().join("app.json"), doc).unwrap();
    let o = cola(&["oracle", "--topology", "app.json", "--rps", "300", "--analytic", "--top", "1"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    // cost is 2 per pod, so the top state's cost is an even number
    let row = stdout(&o).lines().nth(1).unwrap().to_string();
    let cost: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
    assert_eq!(cost % 2.0, 0.0);
}
