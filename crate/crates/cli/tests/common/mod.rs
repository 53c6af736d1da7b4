#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_storetrace"));
    c.env("RUST_LOG", "error");
    c
}

pub fn exec(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn storetrace")
}

/// Runs and requires exit 0; returns stdout.
pub fn run(args: &[&str]) -> String {
    let out = exec(args);
    assert!(
        out.status.success(),
        "storetrace {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// `gen` into `<dir>/raw`, then `merge` into `<dir>/merged.jsonl`.
pub fn gen_merge(dir: &Path, scenario: &str, extra: &[&str]) -> PathBuf {
    let raw = dir.join("raw");
    let merged = dir.join("merged.jsonl");
    let mut args = vec!["gen", scenario, "--out", s(&raw)];
    args.extend_from_slice(extra);
    run(&args);
    run(&["merge", "--in", s(&raw), "--out", s(&merged)]);
    merged
}

pub fn analyze(trace: &Path, model: &Path) {
    run(&["analyze", "--in", s(trace), "--out", s(model)]);
}

pub fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}
