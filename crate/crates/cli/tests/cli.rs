use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ctxlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctxlab")).args(args).output().unwrap()
}

fn write_small_config(dir: &Path) -> String {
    let path = dir.join("config.json");
    let cfg = r#"{"n": 5, "batch_size": 4, "steps": 12, "checkpoint_every": 4, "hidden_dim": 6,
                  "val_tasks": 8, "trials": 3, "theorem_trials": 20, "finetune_examples": 4, "seed": 5}"#;
    fs::write(&path, cfg).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn unknown_flags_are_usage_errors() {
    let out = ctxlab(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(ctxlab(&[]).status.code(), Some(1));
    assert_eq!(ctxlab(&["--help"]).status.code(), Some(0));
}

#[test]
fn selftest_prints_a_passing_table() {
    let out = ctxlab(&["selftest"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() >= 10);
    assert!(!text.contains("FAIL"));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_small_config(dir.path());
    let out_dir = dir.path().join("run");
    let out = out_dir.to_str().unwrap();
    let res = ctxlab(&["train", "--config", &cfg, "--out", out, "--seed", "9", "--plots", "false"]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let log = fs::read_to_string(out_dir.join("train_log.csv")).unwrap();
    assert!(log.contains("\"seed\":9") && log.contains("\"steps\":12"));
    assert!(!out_dir.join("train_log.svg").exists());

    for sub in ["verify", "dynamics", "finetune-compare"] {
        let res = ctxlab(&[sub, "--config", &cfg, "--out", out, "--trials", "2"]);
        assert_eq!(res.status.code(), Some(0), "{sub}: {}", String::from_utf8_lossy(&res.stderr));
    }
    let dynamics = fs::read_to_string(out_dir.join("dynamics.csv")).unwrap();
    assert!(dynamics.contains("# trials: 2"));
    assert!(out_dir.join("finetune_compare.svg").is_file());
}

#[test]
fn missing_checkpoint_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let res = ctxlab(&["verify", "--out", out, "--checkpoint", "/nonexistent/ckpt"]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("does not exist"));
}

#[test]
fn corrupted_transfer_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_small_config(dir.path());
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    assert_eq!(ctxlab(&["train", "--config", &cfg, "--out", out]).status.code(), Some(0));
    let bad = dir.path().join("bad.json");
    let text = fs::read_to_string(&cfg).unwrap().replacen('{', "{\"corrupt_delta_w\": 0.001, ", 1);
    fs::write(&bad, text).unwrap();
    let res = ctxlab(&["verify", "--config", bad.to_str().unwrap(), "--out", out]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn bad_config_file_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    fs::write(&path, "{ not json").unwrap();
    let res = ctxlab(&["train", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
}
