#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const FIXED_TIME: &str = "2000-01-01T00:00:00Z";

/// The `conslab` binary with a pinned report timestamp and no bridge
/// override inherited from the environment.
pub fn conslab() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_conslab"));
    cmd.env("CONSLAB_TIMESTAMP", FIXED_TIME).env_remove("CONSLAB_BRIDGE");
    cmd
}

pub fn run(args: &[&str]) -> Output {
    conslab().args(args).output().expect("spawn conslab")
}

pub fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "conslab {args:?} failed with {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

pub struct Kb {
    pub dir: PathBuf,
    pub resource: PathBuf,
    pub tuples: PathBuf,
    pub vocab: PathBuf,
}

/// A small synthetic KB written by `gen-synth`.
pub fn synth_kb(root: &Path, seed: u64) -> Kb {
    let dir = root.join(format!("kb{seed}"));
    ok(&[
        "gen-synth", "--seed", &seed.to_string(), "--relations", "4", "--entities", "24",
        "--patterns", "3", "--out", s(&dir),
    ]);
    Kb {
        resource: dir.join("resource"),
        tuples: dir.join("tuples.jsonl"),
        vocab: dir.join("vocab.txt"),
        dir,
    }
}

/// A briefly pretrained small toy checkpoint for `kb`.
pub fn toy_checkpoint(kb: &Kb) -> PathBuf {
    let path = kb.dir.join("toy.ckpt");
    ok(&[
        "pretrain", "--resource", s(&kb.resource), "--tuples", s(&kb.tuples), "--vocab", s(&kb.vocab),
        "--epochs", "3", "--d-model", "8", "--d-ff", "16", "--out", s(&path),
    ]);
    path
}

/// Replaces the `timestamp` field of a JSON report.
pub fn without_timestamp(bytes: &[u8]) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_slice(bytes).expect("json report");
    if let Some(obj) = v.as_object_mut() {
        obj.remove("timestamp");
    }
    v
}
