use std::path::Path;
use std::process::{Command, Output};

fn jrm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jrm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_is_reproducible_and_echoes_its_config() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = jrm(&["gen-data", "--seed", "7", "--n-train", "10", "--n-eval", "4", "--out", arg(dir)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["train.jsonl", "eval.jsonl", "vocab.json", "config.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let train = std::fs::read_to_string(a.join("train.jsonl")).unwrap();
    assert_eq!(train.lines().count(), 10);
    let cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["seed"], 7);
    assert_eq!(cfg["n_train"], 10);
}

#[test]
fn config_file_is_echoed_verbatim() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("cfg.json");
    let text = "{ \"n_train\": 6,\n  \"n_eval\": 3 }\n";
    std::fs::write(&src, text).unwrap();
    let out_dir = tmp.path().join("d");
    let out = jrm(&["gen-data", "--config", arg(&src), "--out", arg(&out_dir)]);
    assert!(out.status.success());
    assert_eq!(std::fs::read_to_string(out_dir.join("config.source.json")).unwrap(), text);
}

#[test]
fn invalid_configuration_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = jrm(&["gen-data", "--n-train", "0", "--out", arg(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_train"));

    let src = tmp.path().join("bad.json");
    std::fs::write(&src, r#"{"n_trian": 5}"#).unwrap();
    let out = jrm(&["gen-data", "--config", arg(&src), "--out", arg(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(jrm(&["gen-data", "--n-train", "4", "--n-eval", "4", "--out", arg(&data)]).status.success());
    let missing = tmp.path().join("nope");
    let out = jrm(&["eval", "--checkpoint", arg(&missing), "--data", arg(&data), "--out", arg(tmp.path())]);
    assert_eq!(out.status.code(), Some(3));
    let out = jrm(&["report", "--dir", arg(&missing)]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn train_then_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"train": {"epochs": 1, "batch_size": 8, "eval_every": 1}}"#).unwrap();
    assert!(jrm(&["gen-data", "--n-train", "16", "--n-eval", "8", "--out", arg(&data)]).status.success());
    let out = jrm(&["train", "--config", arg(&cfg), "--alpha", "0.7", "--data", arg(&data), "--out", arg(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    let ev = tmp.path().join("ev");
    let out = jrm(&["eval", "--config", arg(&cfg), "--checkpoint", arg(&run.join("checkpoint")), "--data", arg(&data), "--out", arg(&ev)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let a: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("eval.json")).unwrap()).unwrap();
    let b: serde_json::Value = serde_json::from_slice(&std::fs::read(ev.join("eval.json")).unwrap()).unwrap();
    assert_eq!(a["pref_acc_if"], b["pref_acc_if"]);
}
