//! End-to-end checks of the `feed` binary: exit codes, determinism, and the
//! error surface of each subcommand.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn feed() -> Command {
    Command::new(env!("CARGO_BIN_EXE_feed"))
}

fn temp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("feed_cli_{name}"));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const TINY: &[&str] = &[
    "--set",
    "dataset.per_domain=120",
    "--set",
    "stage1.steps=6",
    "--set",
    "stage1.batch=32",
    "--set",
    "meta.iters=4",
    "--set",
    "meta.tasks=2",
    "--set",
    "meta.support=8",
    "--set",
    "meta.query=8",
    "--set",
    "meta.inner_steps=2",
    "--set",
    "erm.steps=8",
];

#[test]
fn unknown_subcommand_exits_2_with_usage() {
    let out = feed().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("usage: feed"));
}

#[test]
fn unknown_flag_exits_2() {
    let out = feed().args(["lodo", "--frobnicate"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_config_exits_1_naming_the_path() {
    let out = feed()
        .args(["lodo", "--config", "/nonexistent/feed.cfg"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.starts_with("error:"), "stderr was: {err}");
    assert!(err.contains("/nonexistent/feed.cfg"));
}

#[test]
fn synth_is_byte_identical_for_equal_seeds() {
    let a = temp_dir("synth_a");
    let b = temp_dir("synth_b");
    for dir in [&a, &b] {
        let out = feed()
            .args(["synth", "--seed", "7", "--out", dir.to_str().unwrap()])
            .args(["--set", "dataset.per_domain=60"])
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    }
    assert_eq!(read_tree(&a), read_tree(&b));
}

#[test]
fn lodo_writes_result_files_and_exits_0() {
    let dir = temp_dir("lodo");
    let out = feed()
        .args(["lodo", "--seed", "3", "--out", dir.to_str().unwrap()])
        .args(["--set", "method=erm"])
        .args(TINY)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let csv = std::fs::read_to_string(dir.join("results.csv")).unwrap();
    assert!(csv.starts_with("method,held_out_domain,accuracy,delta_dp,delta_eopp,delta_eo,seed\n"));
    assert_eq!(csv.lines().count(), 5); // header + 3 domains + Avg
    assert!(dir.join("results.jsonl").exists());
    assert!(dir.join("history.jsonl").exists());
}

#[test]
fn pipeline_commands_compose() {
    let dir = temp_dir("pipeline");
    let run = |args: &[&str]| {
        let out = feed()
            .args(args)
            .args(["--seed", "5", "--out", dir.to_str().unwrap()])
            .args(TINY)
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", stderr(&out));
    };
    run(&["train-disentangler"]);
    assert!(dir.join("stage1.ckpt").exists());
    run(&["meta-train"]);
    assert!(dir.join("classifier.ckpt").exists());
    run(&["adapt", "--domain", "d2"]);
    assert!(dir.join("adapted.ckpt").exists());
    let out = feed()
        .args([
            "evaluate",
            "--domain",
            "d2",
            "--checkpoint",
            dir.join("adapted.ckpt").to_str().unwrap(),
        ])
        .args(["--seed", "5", "--out", dir.to_str().unwrap()])
        .args(TINY)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    assert!(dir.join("evaluation.csv").exists());
}

#[test]
fn bad_checkpoint_version_exits_1_naming_supported() {
    let dir = temp_dir("badckpt");
    let path = dir.join("v99.ckpt");
    std::fs::write(&path, b"FEEDPK 99\nEND\n").unwrap();
    let out = feed()
        .args([
            "evaluate",
            "--domain",
            "d0",
            "--checkpoint",
            path.to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
        ])
        .args(TINY)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("99") && err.contains("supported"), "stderr: {err}");
}

#[test]
fn env_var_overrides_output_directory() {
    let flag_dir = temp_dir("out_flag");
    let env_dir = temp_dir("out_env");
    let out = feed()
        .args(["synth", "--seed", "9", "--out", flag_dir.to_str().unwrap()])
        .args(["--set", "dataset.per_domain=40"])
        .env("FEED_OUT_DIR", env_dir.to_str().unwrap())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    assert!(env_dir.join("data_d0.csv").exists());
    assert!(!flag_dir.join("data_d0.csv").exists());
}

#[test]
fn set_flag_rejects_unknown_keys() {
    let out = feed()
        .args(["synth", "--set", "bogus.key=1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("unknown config key"));
}
