//! Helpers shared by the integration-test targets: running the binary,
//! parsing its `key: value` output, and preparing corpora and configs.

#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

/// One finished binary invocation with both streams captured.
pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Run {
    /// The value of a `key: value` stdout line; panics with the full output
    /// so a missing line shows what the binary actually said.
    pub fn value(&self, key: &str) -> &str {
        let prefix = format!("{key}: ");
        self.stdout
            .lines()
            .find_map(|l| l.strip_prefix(prefix.as_str()))
            .unwrap_or_else(|| {
                panic!(
                    "no `{key}:` line in stdout\nstdout:\n{}\nstderr:\n{}",
                    self.stdout, self.stderr
                )
            })
    }

    pub fn expect_code(&self, code: i32, what: &str) {
        assert_eq!(
            self.code, code,
            "{what}: expected exit {code}, got {}\nstdout:\n{}\nstderr:\n{}",
            self.code, self.stdout, self.stderr
        );
    }

    pub fn expect_success(&self, what: &str) {
        self.expect_code(0, what);
    }
}

/// Runs the binary with `dir` as working directory, so relative paths in
/// configs and arguments stay inside the test's sandbox.
pub fn tsnmt(dir: &Path, args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_tsnmt"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("failed to spawn the tsnmt binary");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

pub fn read_lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
        .lines()
        .map(str::to_owned)
        .collect()
}

pub fn write_lines(path: &Path, lines: &[&str]) {
    let mut text = lines.join("\n");
    text.push('\n');
    fs::write(path, text).unwrap_or_else(|e| panic!("write {}: {e}", path.display()));
}

/// Writes a flat `key = value` config file.
pub fn write_config(path: &Path, entries: &[(&str, &str)]) {
    let mut text = String::new();
    for (k, v) in entries {
        text.push_str(&format!("{k} = {v}\n"));
    }
    fs::write(path, text).unwrap_or_else(|e| panic!("write {}: {e}", path.display()));
}

/// Splits a synthesized corpus into `held_out` validation pairs (the head)
/// and a training tail, writing valid.src/valid.tgt/train.src/train.tgt
/// next to the originals.
pub fn split_corpus(corpus_dir: &Path, held_out: usize) {
    for (raw, head, tail) in [
        ("source.txt", "valid.src", "train.src"),
        ("target.txt", "valid.tgt", "train.tgt"),
    ] {
        let lines = read_lines(&corpus_dir.join(raw));
        assert!(
            lines.len() > held_out,
            "corpus {} has only {} lines",
            raw,
            lines.len()
        );
        let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
        write_lines(&corpus_dir.join(head), &refs[..held_out]);
        write_lines(&corpus_dir.join(tail), &refs[held_out..]);
    }
}

/// Reads metrics.csv into (header, data rows split on commas).
pub fn read_metrics(path: &Path) -> (String, Vec<Vec<String>>) {
    let lines = read_lines(path);
    let (header, rows) = lines
        .split_first()
        .unwrap_or_else(|| panic!("{} is empty", path.display()));
    let rows = rows
        .iter()
        .map(|r| r.split(',').map(str::to_owned).collect())
        .collect();
    (header.clone(), rows)
}

/// A `key: value` number from a report file written with --report.
pub fn report_value(path: &Path, key: &str) -> f64 {
    let prefix = format!("{key}: ");
    read_lines(path)
        .iter()
        .find_map(|l| l.strip_prefix(prefix.as_str()))
        .unwrap_or_else(|| panic!("no `{key}:` line in {}", path.display()))
        .parse()
        .unwrap_or_else(|e| panic!("unparseable `{key}` in {}: {e}", path.display()))
}

/// The config_hash recorded in an out directory's manifest.
pub fn manifest_hash(out_dir: &Path) -> String {
    let path = out_dir.join("manifest.txt");
    read_lines(&path)
        .iter()
        .find_map(|l| l.strip_prefix("config_hash: "))
        .unwrap_or_else(|| panic!("no config_hash in {}", path.display()))
        .to_owned()
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("test path is valid UTF-8")
}

/// Joins `dir` with `name` and returns an owned path for argument building.
pub fn under(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}
