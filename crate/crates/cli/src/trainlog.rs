//! JSON-lines training log: one object per optimizer step and one per
//! validation pass.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, LineWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use volnet_core::{Error, MetricsReport, Result, StepRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogEntry {
    Step(StepRecord),
    Val {
        epoch: u64,
        #[serde(flatten)]
        report: MetricsReport,
    },
}

impl LogEntry {
    pub fn epoch(&self) -> u64 {
        match self {
            LogEntry::Step(r) => r.epoch,
            LogEntry::Val { epoch, .. } => *epoch,
        }
    }
}

pub struct TrainLog {
    path: PathBuf,
    out: LineWriter<File>,
}

impl TrainLog {
    /// Start an empty log, replacing any existing file.
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| io_err(path, e))?;
        Ok(TrainLog { path: path.to_path_buf(), out: LineWriter::new(file) })
    }

    /// Continue a log after a resume at `epoch`: entries from `epoch` on are
    /// dropped since they will be produced again.
    pub fn resume(path: &Path, epoch: u64) -> Result<Self> {
        let kept: Vec<LogEntry> = if path.exists() {
            read(path)?.into_iter().filter(|e| e.epoch() < epoch).collect()
        } else {
            Vec::new()
        };
        let mut log = Self::create(path)?;
        for entry in &kept {
            log.append(entry)?;
        }
        Ok(log)
    }

    pub fn append(&mut self, entry: &LogEntry) -> Result<()> {
        let line = serde_json::to_string(entry).expect("log entries serialize");
        writeln!(self.out, "{line}").map_err(|e| io_err(&self.path, e))
    }
}

pub fn read(path: &Path) -> Result<Vec<LogEntry>> {
    let file = OpenOptions::new().read(true).open(path).map_err(|e| io_err(path, e))?;
    let mut entries = Vec::new();
    for (no, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: format!("line {}: {e}", no + 1),
        })?;
        entries.push(entry);
    }
    Ok(entries)
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}
