//! Helpers for driving the `twintower` binary.

#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

/// The first `bytes` of the bundled corpus, cut at a paragraph break.
pub fn corpus_slice(dir: &Path, bytes: usize) -> PathBuf {
    let text = fs::read_to_string(data("corpus.txt")).unwrap();
    let end = text[..bytes.min(text.len())].rfind("\n\n").unwrap_or(text.len().min(bytes));
    let path = dir.join("corpus.txt");
    fs::write(&path, &text[..end]).unwrap();
    path
}

pub struct Run {
    pub code: i32,
    pub stderr: String,
}

pub fn twintower(dir: &Path, args: &[&str]) -> Run {
    let out: Output = Command::new(env!("CARGO_BIN_EXE_twintower"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    Run {
        code: out.status.code().unwrap_or(-1),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

/// Runs a command that must succeed.
pub fn ok(dir: &Path, args: &[&str]) {
    let r = twintower(dir, args);
    assert_eq!(r.code, 0, "twintower {args:?} failed:\n{}", r.stderr);
}
