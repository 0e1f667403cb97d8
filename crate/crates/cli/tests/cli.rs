use std::path::Path;
use std::process::{Command, Output};

fn pcroute(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcroute")).current_dir(dir).args(args).output().expect("binary runs")
}

const TINY: &str = r#"
scenario = "grid4x4"
seed = 5
[schedule]
episodes = 3
steps_per_episode = 12
eval_every = 1
eval_episodes = 1
batch_size = 8
[gnn]
layers = 1
hidden = 4
[eval]
episodes = 2
steps = 12
"#;

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

#[test]
fn train_and_eval_are_byte_identical_across_runs() {
    let dir = setup();
    for run in ["a", "b"] {
        let out = pcroute(dir.path(), &["train", "--config", "tiny.toml", "--out", run]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(read(dir.path().join("a/metrics-generic.jsonl")), read(dir.path().join("b/metrics-generic.jsonl")));
    assert_eq!(read(dir.path().join("a/generic.json")), read(dir.path().join("b/generic.json")));

    let eval_cfg = format!("{TINY}checkpoints = [\"a/generic.json\"]\n");
    std::fs::write(dir.path().join("eval.toml"), eval_cfg).unwrap();
    for run in ["ea", "eb"] {
        let out = pcroute(dir.path(), &["eval", "--config", "eval.toml", "--out", run]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["eval.json", "eval-episodes.csv", "eval-series.csv"] {
        assert_eq!(read(dir.path().join("ea").join(f)), read(dir.path().join("eb").join(f)), "{f}");
    }
    let table = String::from_utf8(read(dir.path().join("ea/eval.json"))).unwrap();
    for policy in ["generic", "shortest-distance", "shortest-time"] {
        assert!(table.contains(&format!("\"policy\": \"{policy}\"")), "{policy} missing");
    }
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = setup();
    pcroute(dir.path(), &["train", "--config", "tiny.toml", "--out", "a"]);
    pcroute(dir.path(), &["train", "--config", "tiny.toml", "--seed", "6", "--out", "b"]);
    assert_ne!(read(dir.path().join("a/generic.json")), read(dir.path().join("b/generic.json")));
}

#[test]
fn preference_phase_without_generic_checkpoint_is_a_config_error() {
    let dir = setup();
    let cfg = format!("preference = \"straight,two,simple,low\"\n{TINY}");
    std::fs::write(dir.path().join("pref.toml"), cfg).unwrap();
    let out = pcroute(dir.path(), &["train", "--phase", "preference", "--config", "pref.toml", "--out", "p"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("generic checkpoint required"));
    assert!(!dir.path().join("p").exists());
}

#[test]
fn malformed_config_exits_with_two() {
    let dir = setup();
    std::fs::write(dir.path().join("bad.toml"), "scenario = \"grid4x4\"\nseed = 1\nunknown = true\n").unwrap();
    assert_eq!(pcroute(dir.path(), &["eval", "--config", "bad.toml"]).status.code(), Some(2));
    assert_eq!(pcroute(dir.path(), &["eval", "--config", "missing.toml"]).status.code(), Some(2));
}

#[test]
fn corrupt_checkpoint_is_a_runtime_error() {
    let dir = setup();
    std::fs::write(dir.path().join("broken.json"), "{\"format\": \"pcroute-qnet\"").unwrap();
    assert_eq!(pcroute(dir.path(), &["inspect-checkpoint", "broken.json"]).status.code(), Some(3));
}

const LINE: &str = r#"{
  "name": "line",
  "junctions": [
    {"id": "A", "x": 0, "y": 0},
    {"id": "B", "x": 100, "y": 0},
    {"id": "C", "x": 200, "y": 0}
  ],
  "edges": [
    {"from": "A", "to": "B", "length": 100, "lanes": 1, "road_type": "straight", "speed_limit": 10},
    {"from": "B", "to": "C", "length": 100, "lanes": 2, "road_type": "straight", "speed_limit": 10}
  ]
}"#;

#[test]
fn plan_answers_one_request_and_reports_unreachable_pairs() {
    let dir = setup();
    std::fs::write(dir.path().join("line.json"), LINE).unwrap();
    let cfg = "scenario = \"line.json\"\nseed = 2\n[schedule]\nepisodes = 1\nsteps_per_episode = 3\neval_episodes = 1\n[gnn]\nlayers = 1\nhidden = 3\n[eval]\nsteps = 3\nepisodes = 1\n";
    std::fs::write(dir.path().join("line.toml"), cfg).unwrap();
    let out = pcroute(dir.path(), &["train", "--config", "line.toml", "--out", "models"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    std::fs::write(dir.path().join("one.csv"), "driver,source,destination,preference,t\nd1,A,C,,0\n").unwrap();
    let out = pcroute(dir.path(), &["plan", "--config", "line.toml", "--models", "models", "--requests", "one.csv", "--out", "r1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows: Vec<serde_json::Value> = String::from_utf8(read(dir.path().join("r1/responses.jsonl")))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["route"], serde_json::json!(["A->B", "B->C"]));
    assert_eq!(rows[0]["model"], "generic");
    assert!((rows[0]["ideal_time"].as_f64().unwrap() - 20.0).abs() < 1e-9);

    std::fs::write(dir.path().join("back.csv"), "driver,source,destination,preference,t\nd1,C,A,,0\nd2,A,B,,0\n").unwrap();
    let out = pcroute(dir.path(), &["plan", "--config", "line.toml", "--models", "models", "--requests", "back.csv", "--out", "r2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(read(dir.path().join("r2/responses.jsonl"))).unwrap();
    let rows: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0]["error"].as_str().is_some() && rows[0].get("route").is_none());
    assert_eq!(rows[1]["route"], serde_json::json!(["A->B"]));
    let summary: serde_json::Value = serde_json::from_slice(&read(dir.path().join("r2/plan-summary.json"))).unwrap();
    assert_eq!(summary["errors"], 1);
    assert_eq!(summary["requests"], 2);
}

#[test]
fn simulate_and_synth_write_outputs() {
    let dir = setup();
    let out = pcroute(dir.path(), &["simulate", "--config", "tiny.toml", "--out", "s"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&read(dir.path().join("s/simulate-summary.json"))).unwrap();
    assert!(summary["vehicles"].as_u64().unwrap() > 0);
    assert_eq!(summary["vehicles"], summary["arrived"]);

    let out = pcroute(dir.path(), &["synth-driver", "--config", "tiny.toml", "--noise", "0.1", "--out", "s"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = String::from_utf8(read(dir.path().join("s/trajectories.csv"))).unwrap();
    assert!(csv.starts_with("tau,lambda,phi,acc_long,acc_lat,headway,vel_long,edge"));
    assert_eq!(csv.lines().count(), 1 + 200 * 10);

    let out = pcroute(dir.path(), &["synth-driver", "--config", "tiny.toml", "--noise", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
}
