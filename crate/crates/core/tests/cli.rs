//! The `zsrobust` binary: subcommand wiring and exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn zsrobust(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zsrobust")).args(args).output().expect("spawn zsrobust")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn single_stage_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let models = dir.path().join("models");

    let o = zsrobust(&["gen-toy", "--n-per-class", "6", "--size", "16", "--tensor", "--seed", "3", "--out", s(&data)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let o = zsrobust(&["train", "--data", s(&data), "--epochs", "2", "--out", s(&models)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let model = models.join("classifier.rozm");
    assert!(model.exists());

    let o = zsrobust(&["eval", "--model", s(&model), "--data", s(&data), "--out", s(dir.path())]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("/36 = "));

    let atk = dir.path().join("atk");
    let o = zsrobust(&["attack", "--model", s(&model), "--data", s(&data), "--method", "fgsm", "--epsilon", "8", "--out", s(&atk)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let lines = std::fs::read_to_string(atk.join("attack.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 36);

    let typo = dir.path().join("typo");
    let o = zsrobust(&["typo-gen", "--data", s(&data), "--k", "1", "--out", s(&typo)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(typo.join("typographic.json").exists());

    let dd = dir.path().join("dd");
    let o = zsrobust(&["dedup", "--model", s(&model), "--train", s(&data), "--test", s(&data), "--projection-dim", "8", "--out", s(&dd)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    // Identical sets overlap completely at every threshold.
    let csv = std::fs::read_to_string(dd.join("dedup.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(1) == Some("100.0000")), "{csv}");
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"version": 1, "sed": 4}"#).unwrap();
    assert_eq!(code(&zsrobust(&["report", "--config", s(&bad), "--out", s(dir.path())])), 2);

    std::fs::write(&bad, r#"{"version": 99}"#).unwrap();
    assert_eq!(code(&zsrobust(&["report", "--config", s(&bad), "--out", s(dir.path())])), 2);

    assert_eq!(code(&zsrobust(&["report", "--out", s(dir.path())])), 2);
    assert_eq!(code(&zsrobust(&["gen-toy", "--workers", "0", "--out", s(dir.path())])), 2);
    assert_eq!(code(&zsrobust(&["no-such-command"])), 2);
}

#[test]
fn stage_failures_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    let missing = dir.path().join("missing");
    let body = serde_json::json!({"version": 1, "data": {"source": "directory", "train": missing, "test": missing}});
    std::fs::write(&cfg, body.to_string()).unwrap();
    let run = dir.path().join("run");
    let o = zsrobust(&["report", "--config", s(&cfg), "--out", s(&run)]);
    assert_eq!(code(&o), 3);
    assert!(run.join("ledger.json").exists());

    // A model path that is not a snapshot fails at run time, not config time.
    let data = dir.path().join("data");
    assert_eq!(code(&zsrobust(&["gen-toy", "--n-per-class", "2", "--size", "8", "--out", s(&data)])), 0);
    assert_eq!(code(&zsrobust(&["eval", "--model", s(&cfg), "--data", s(&data), "--out", s(dir.path())])), 3);
}

#[test]
fn report_can_be_re_emitted_from_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    let body = serde_json::json!({
        "version": 1,
        "data": {"source": "toy", "size": 16, "train_per_class": 6, "test_per_class": 3, "shifts": ["texture"]},
        "classifier": {"train": {"epochs": 1}},
        "baselines": [{"name": "lin", "arch": {"kind": "linear", "pool": 2}, "train": {"epochs": 1}}],
        "dual_encoder": {"train": {"epochs": 1}, "arch": {"hidden": [8], "pool": 2, "token_dim": 4}},
        "report": {"formats": ["json"]}
    });
    std::fs::write(&cfg, body.to_string()).unwrap();
    let run = dir.path().join("run");
    assert_eq!(code(&zsrobust(&["report", "--config", s(&cfg), "--out", s(&run)])), 0);
    assert!(!run.join("report.csv").exists());

    let again = dir.path().join("again");
    let o = zsrobust(&["report", "--from", s(&run.join("report.json")), "--format", "json,csv", "--out", s(&again)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(run.join("report.json")).unwrap(), std::fs::read(again.join("report.json")).unwrap());
    assert!(again.join("report.csv").exists());
}
