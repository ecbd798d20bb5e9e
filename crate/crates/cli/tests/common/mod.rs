#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;

use volnet_cli::trainlog::{self, LogEntry};

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Run {
    pub fn ok(&self) -> bool {
        self.code == 0
    }
}

/// Run the binary single-threaded with warnings-only logging.
pub fn volnet(cmd: &str, config: &Path, extra: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_volnet"))
        .arg(cmd)
        .arg("--config")
        .arg(config)
        .args(extra)
        .env("VOLNET_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("volnet runs");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

pub fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

/// Tiny phantoms in `dir/data`: `train` and `val` volumes per class.
pub fn synth_tiny(dir: &Path, train: usize, val: usize, seed: u64) -> PathBuf {
    let cfg = write_config(
        dir,
        "synth.cfg",
        &format!("synth_dir = data\nn_per_class = {train}\nn_val_per_class = {val}\nseed = {seed}\n"),
    );
    let run = volnet("synth", &cfg, &["--tiny"]);
    assert!(run.ok(), "synth failed: {}", run.stderr);
    dir.join("data/manifest.csv")
}

pub fn log_entries(path: &Path) -> Vec<LogEntry> {
    trainlog::read(path).unwrap()
}

pub fn step_losses(path: &Path) -> Vec<f64> {
    log_entries(path)
        .into_iter()
        .filter_map(|e| match e {
            LogEntry::Step(s) => Some(s.loss),
            LogEntry::Val { .. } => None,
        })
        .collect()
}
