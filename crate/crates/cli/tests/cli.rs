use std::path::Path;
use std::process::{Command, Output};

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_humorlab"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("humorlab runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

const SMALL: &str = r#"
[synthetic]
n_examples = 500
[encoder]
embed_dim = 8
hidden = [8]
[pretrain]
enabled = false
[fewshot]
repeats = 0
"#;

#[test]
fn invalid_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[train]\nlearning_rat = 0.1\n");
    let out = run(dir.path(), &["synth", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));

    let out = run(dir.path(), &["synth", "--method", "newton"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[data]\ncorpus = \"missing.jsonl\"\n");
    let out = run(dir.path(), &["synth", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn loo_writes_one_row_per_training_example() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = run(dir.path(), &["loo", "--config", &cfg, "--method", "exact", "--head", "classifier"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("loo.csv")).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# seed: 0"));
    assert!(lines.next().unwrap().starts_with("# config: {"));
    assert_eq!(lines.next().unwrap(), "test_id,train_id,delta,raw_score,z_score");
    assert_eq!(lines.count(), 32);
}

#[test]
fn untrained_eval_is_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = run(dir.path(), &["eval", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
    for head in ["classifier", "verbalizer"] {
        assert_eq!(metrics["eval"][head]["params"], "untrained");
        let acc = metrics["eval"][head]["accuracy"].as_f64().unwrap();
        assert!((acc - 0.5).abs() <= 0.15, "{head}: {acc}");
    }
    assert_eq!(metrics["seed"], 0);
    assert!(metrics["config"]["train"].is_object());
}

#[test]
fn k_flags_select_table_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{SMALL}[influence]\nn_test = 6\ntrainable = [\"head\"]\n"));
    let out = run(
        dir.path(),
        &["report", "--config", &cfg, "--head", "verbalizer", "--method", "exact", "--k", "3", "--k", "5"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = humorlab::harness::read_offense_table(&dir.path().join("offense_table.csv")).unwrap();
    assert_eq!(rows.iter().map(|r| (r.method.as_str(), r.k)).collect::<Vec<_>>(), [("PT", 3), ("PT", 5)]);
    assert_eq!(std::fs::read_dir(dir.path().join("influence/pt")).unwrap().count(), 6);
    let hist = std::fs::read_to_string(dir.path().join("histogram.csv")).unwrap();
    assert_eq!(hist.lines().filter(|l| !l.starts_with('#')).count(), 1 + 2 * 10);
}
