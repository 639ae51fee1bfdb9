use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ironwan_cli::run::{read_metrics, METRICS_FILE, SUMMARY_FILE};
use sha2::{Digest, Sha256};

fn ironwan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ironwan"))
        .args(args)
        .env_remove("IRONWAN_SCENARIO")
        .env_remove("IRONWAN_OUT")
        .env_remove("IRONWAN_SEED")
        .env_remove("IRONWAN_THREADS")
        .output()
        .unwrap()
}

fn sha(path: &Path) -> Vec<u8> {
    Sha256::digest(fs::read(path).unwrap()).to_vec()
}

const TINY: &str = r#"
[scenario]
node_count = 6
duration = 600.0
drain = 10.0
[scenario.interpred]
training_duration = 60.0
[sweep]
gateways = [6, 8, 10]
loads = ["low", "medium", "high"]
systems = ["lorawan", "ironwan"]
seeds = [1, 2, 3, 4, 5]
"#;

#[test]
fn missing_scenario_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = ironwan(&[
        "run",
        "--scenario",
        "/nonexistent/x.toml",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "config");
}

#[test]
fn unknown_keys_are_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let sc = dir.path().join("s.toml");
    fs::write(&sc, "[scenario]\nnode_cout = 3\n").unwrap();
    let out = ironwan(&[
        "run",
        "--scenario",
        sc.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("node_cout"));
}

#[test]
fn unwritable_output_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let sc = dir.path().join("s.toml");
    fs::write(&sc, "[scenario]\nnode_count = 1\nduration = 10.0\n").unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "").unwrap();
    let out = ironwan(&[
        "run",
        "--scenario",
        sc.to_str().unwrap(),
        "--out",
        blocker.join("sub").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn sweep_writes_one_row_per_cell_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let sc = dir.path().join("s.toml");
    fs::write(&sc, TINY).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for (out, threads) in [(&a, "1"), (&b, "3")] {
        let o = ironwan(&[
            "run",
            "--scenario",
            sc.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--threads",
            threads,
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let rows = read_metrics(&a.join(METRICS_FILE)).unwrap();
    assert_eq!(rows.len(), 90);
    assert!(rows.iter().enumerate().all(|(i, r)| r.cell == i));
    assert_eq!(sha(&a.join(METRICS_FILE)), sha(&b.join(METRICS_FILE)));
    assert_eq!(sha(&a.join(SUMMARY_FILE)), sha(&b.join(SUMMARY_FILE)));
    let summary: Vec<serde_json::Value> =
        serde_json::from_slice(&fs::read(a.join(SUMMARY_FILE)).unwrap()).unwrap();
    assert_eq!(summary.len(), 18);
    assert_eq!(summary[0]["seeds"].as_array().unwrap().len(), 5);
}

#[test]
fn seed_flag_and_environment_override() {
    let dir = tempfile::tempdir().unwrap();
    let sc = dir.path().join("s.toml");
    fs::write(&sc, TINY).unwrap();
    let out = dir.path().join("o");
    let o = Command::new(env!("CARGO_BIN_EXE_ironwan"))
        .args(["run", "--seed", "9"])
        .env("IRONWAN_SCENARIO", &sc)
        .env("IRONWAN_OUT", &out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_metrics(&out.join(METRICS_FILE)).unwrap();
    assert_eq!(rows.len(), 18);
    assert!(rows.iter().all(|r| r.seed == 9));
}

#[test]
fn event_logs_are_written_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let sc = dir.path().join("s.toml");
    fs::write(
        &sc,
        "[scenario]\nnode_count = 4\nduration = 300.0\nlog_events = true\n[sweep]\nsystems = [\"lorawan\", \"wcs\"]\n",
    )
    .unwrap();
    let out = dir.path().join("o");
    assert!(ironwan(&[
        "run",
        "--scenario",
        sc.to_str().unwrap(),
        "--out",
        out.to_str().unwrap()
    ])
    .status
    .success());
    for cell in ["cell-0000.jsonl", "cell-0001.jsonl"] {
        let f = fs::File::open(out.join("logs").join(cell)).unwrap();
        let log = ironwan_core::netsim::log::read_jsonl(std::io::BufReader::new(f)).unwrap();
        assert!(!log.is_empty());
    }
}

#[test]
fn trace_generation_feeds_change_detection() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let o = ironwan(&[
        "gen-trace",
        "--out",
        d,
        "--nodes",
        "40",
        "--duration",
        "43200",
        "--seed",
        "3",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let trace = dir.path().join("trace.csv");
    let mut text = fs::read_to_string(&trace).unwrap();
    text.push_str("not,a,row\n");
    fs::write(&trace, text).unwrap();
    let o = ironwan(&[
        "rmip-eval",
        "--trace",
        trace.to_str().unwrap(),
        "--out",
        d,
        "--changes",
        "5",
        "--n",
        "5,10",
        "--e",
        "1,2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("1 unparseable lines skipped"));
    let f = fs::File::open(dir.path().join("rmip_eval.csv")).unwrap();
    let rows = ironwan_core::eval::rmip_eval::read_csv(std::io::BufReader::new(f)).unwrap();
    assert_eq!(
        rows.iter().map(|r| (r.n, r.e)).collect::<Vec<_>>(),
        [(5, 1.0), (5, 2.0), (10, 1.0), (10, 2.0)]
    );
    assert!(rows
        .iter()
        .all(|r| r.true_positives + r.false_negatives == 5));
}

#[test]
fn change_detection_without_changes_has_no_recall() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert!(ironwan(&[
        "gen-trace",
        "--out",
        d,
        "--nodes",
        "20",
        "--duration",
        "21600"
    ])
    .status
    .success());
    let trace = dir.path().join("trace.csv");
    let o = ironwan(&[
        "rmip-eval",
        "--trace",
        trace.to_str().unwrap(),
        "--out",
        d,
        "--changes",
        "0",
        "--n",
        "10",
        "--e",
        "1",
    ]);
    assert!(o.status.success());
    let f = fs::File::open(dir.path().join("rmip_eval.csv")).unwrap();
    let rows = ironwan_core::eval::rmip_eval::read_csv(std::io::BufReader::new(f)).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].recall, None);
}

#[test]
fn policy_comparison_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let o = ironwan(&[
        "interpred-eval",
        "--out",
        d,
        "--load",
        "high",
        "--training",
        "600",
        "--duration",
        "600",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let f = fs::File::open(dir.path().join("interpred_eval.csv")).unwrap();
    let rows = ironwan_core::eval::interpred_eval::read_csv(std::io::BufReader::new(f)).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.load == 2.5 && r.actions() == 6000));
    assert_eq!(
        ironwan(&["interpred-eval", "--out", d, "--load", "extreme"])
            .status
            .code(),
        Some(2)
    );
}
