use std::path::Path;
use std::process::{Command, Output};

fn smil(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smil"))
        .args(args)
        .current_dir(dir)
        .env_remove("SMIL_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = r#"{
  "seed": 7,
  "data": {"n_bags": 40, "n_test": 20, "m": 10, "d": 4, "fake_hi": 9},
  "hyper": {"epochs": 2, "batch": 8, "frames_per_step": 6},
  "model": {"hidden": 6, "filters": 4}
}"#;

#[test]
fn surface_default_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let a = smil(dir.path(), &["surface", "--out", "a.csv"]);
    let b = smil(dir.path(), &["surface", "--out", "b.csv"]);
    assert!(a.status.success() && b.status.success(), "{}", stderr(&a));
    let text = std::fs::read_to_string(dir.path().join("a.csv")).unwrap();
    assert_eq!(text.lines().count(), 201 * 201 + 1);
    assert_eq!(
        text,
        std::fs::read_to_string(dir.path().join("b.csv")).unwrap()
    );
}

#[test]
fn surface_bad_range_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = smil(
        dir.path(),
        &[
            "surface", "--n", "201", "--lo", "0", "--hi", "0.995", "--out", "s.csv",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("range"));
}

#[test]
fn vanish_default_verdict() {
    let dir = tempfile::tempdir().unwrap();
    let o = smil(dir.path(), &["vanish", "--tau", "0.05", "--out", "v.json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["seed"], 42);
    assert_eq!(v["samples"], 1_000_000);
    assert_eq!(v["comparisons"][0]["verdict"], "sharp smaller");
    assert_eq!(
        std::fs::read_to_string(dir.path().join("v.json")).unwrap(),
        stdout(&o)
    );
}

#[test]
fn lemma_bad_epsilon_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        smil(dir.path(), &["lemma", "--eps", "0.4"]).status.code(),
        Some(2)
    );
}

#[test]
fn every_subcommand_documents_defaults() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in [
        "surface",
        "vanish",
        "lemma",
        "gradcheck",
        "gen",
        "train",
        "eval",
        "sweep",
    ] {
        let o = smil(dir.path(), &[cmd, "--help"]);
        assert!(o.status.success(), "{cmd}");
        let help = stdout(&o);
        if cmd != "eval" {
            assert!(help.contains("[default:"), "{cmd}: {help}");
        }
    }
}

#[test]
fn gen_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("run.json"), SMALL).unwrap();
    let o = smil(p, &["gen", "--config", "run.json", "--out-dir", "data"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let train_text = std::fs::read_to_string(p.join("data/train.jsonl")).unwrap();
    assert_eq!(train_text.lines().count(), 41);
    assert_eq!(
        std::fs::read_to_string(p.join("data/test.jsonl"))
            .unwrap()
            .lines()
            .count(),
        21
    );

    let args = [
        "train",
        "--config",
        "run.json",
        "--data",
        "data/train.jsonl",
        "--test",
        "data/test.jsonl",
        "--out-dir",
        "out",
    ];
    let o = smil(p, &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let first_model = std::fs::read(p.join("out/model.json")).unwrap();
    let history = std::fs::read_to_string(p.join("out/history.csv")).unwrap();
    assert_eq!(
        history.lines().next(),
        Some("epoch,train_loss,bag_acc,bag_auc,instance_auc")
    );
    assert_eq!(history.lines().count(), 3);

    assert!(smil(p, &args).status.success());
    assert_eq!(
        std::fs::read(p.join("out/model.json")).unwrap(),
        first_model
    );
    assert_eq!(
        std::fs::read_to_string(p.join("out/history.csv")).unwrap(),
        history
    );

    let o = smil(
        p,
        &[
            "eval",
            "--model",
            "out/model.json",
            "--data",
            "data/test.jsonl",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let acc = v["bag_accuracy"].as_f64().unwrap();
    let last = history
        .lines()
        .last()
        .unwrap()
        .split(',')
        .nth(2)
        .unwrap()
        .parse::<f64>()
        .unwrap();
    assert_eq!(acc, last);
}

#[test]
fn train_with_zero_lr_is_flat() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("run.json"), SMALL).unwrap();
    let o = smil(
        p,
        &[
            "train", "--config", "run.json", "--lr", "0", "--epochs", "3",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let history = std::fs::read_to_string(p.join("history.csv")).unwrap();
    let metrics: Vec<String> = history
        .lines()
        .skip(1)
        .map(|l| l.splitn(3, ',').nth(2).unwrap().to_string())
        .collect();
    assert_eq!(metrics.len(), 3);
    assert!(metrics.iter().all(|m| m == &metrics[0]));
}

#[test]
fn sweep_counts_rows() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("run.json"), SMALL).unwrap();
    let o = smil(
        p,
        &[
            "sweep",
            "--config",
            "run.json",
            "--rates",
            "0.1,0.5,1.0",
            "--epochs",
            "1",
            "--threads",
            "4",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(p.join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("rate,aggregator,kernels,bag_acc,bag_auc,instance_auc")
    );
    assert_eq!(lines.count(), 3 * 5 * 2);
}

#[test]
fn config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("bad.json"), r#"{"hyper": {"learning_rate": 0.1}}"#).unwrap();
    let o = smil(p, &["gen", "--config", "bad.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        stderr(&o).contains("hyper") && stderr(&o).contains("learning_rate"),
        "{}",
        stderr(&o)
    );
    std::fs::write(p.join("bad.json"), r#"{"data": {"m": 1}}"#).unwrap();
    let o = smil(p, &["gen", "--config", "bad.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("m >= 2"), "{}", stderr(&o));
}

#[test]
fn missing_input_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        smil(dir.path(), &["gen", "--config", "nope.json"])
            .status
            .code(),
        Some(3)
    );
    assert_eq!(
        smil(
            dir.path(),
            &["eval", "--model", "m.json", "--data", "d.jsonl"]
        )
        .status
        .code(),
        Some(3)
    );
}

#[test]
fn out_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_smil"))
        .args(["surface", "--n", "3", "--lo", "0.25", "--hi", "0.75"])
        .current_dir(dir.path())
        .env("SMIL_OUT_DIR", "env_out")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("env_out/surface.csv").exists());
}

#[test]
fn gradcheck_command_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = smil(dir.path(), &["gradcheck"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["pass"], true);
}
