#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn lpad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lpad")).args(args).output().expect("spawn lpad")
}

/// Runs `lpad` and fails the test with its stderr if it exits nonzero.
pub fn lpad_ok(args: &[&str]) -> Output {
    let out = lpad(args);
    assert!(out.status.success(), "lpad {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

pub fn p(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

pub fn s(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A generator with 8-pixel patches that runs in milliseconds.
pub fn small_generator_file(dir: &Path, seed: u64) -> PathBuf {
    let path = dir.join(format!("gen{seed}.lpwt"));
    let seed = seed.to_string();
    lpad_ok(&[
        "random-weights", "--out", s(&path), "--seed", &seed, "--blocks", "2", "--base", "8", "--z-spatial", "2",
        "--z-channels", "4",
    ]);
    path
}

pub fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

/// `peak_cache_floats` from the counters line on stderr.
pub fn peak_cache(out: &Output) -> usize {
    let err = String::from_utf8_lossy(&out.stderr);
    let words: Vec<&str> = err.split_whitespace().collect();
    let i = words.iter().position(|w| *w == "peak_cache_floats").expect("counters line");
    words[i + 1].parse().unwrap()
}

/// Files in `dir`, sorted.
pub fn listing(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> =
        std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    v.sort();
    v
}
