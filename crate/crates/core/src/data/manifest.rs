//! CSV manifest with header `id,path,label,split`. Paths are relative to the
//! manifest's directory.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::volf;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub path: PathBuf,
    /// 0 = non-covid, 1 = covid.
    pub label: u8,
    pub split: Split,
}

/// A labelled volume loaded from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeRecord {
    pub id: String,
    pub label: u8,
    pub voxels: Tensor<f32>,
    pub source: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Directory that row paths are relative to.
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, rows: Vec<ManifestRow>) -> Result<Self> {
        let m = Manifest { root: root.into(), rows };
        m.validate_rows()?;
        Ok(m)
    }

    fn validate_rows(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for row in &self.rows {
            if !seen.insert(row.id.as_str()) {
                return Err(Error::Config(format!("duplicate manifest id `{}`", row.id)));
            }
            if row.label > 1 {
                return Err(Error::Config(format!("record `{}` has non-binary label {}", row.id, row.label)));
            }
        }
        Ok(())
    }

    /// Parse and validate, including that every volume path exists.
    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["id", "path", "label", "split"] {
            return Err(Error::format(path, format!("expected header id,path,label,split, got {}", headers.iter().collect::<Vec<_>>().join(","))));
        }
        let rows = reader
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestRow>, _>>()
            .map_err(|e| csv_error(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Manifest { root, rows };
        m.validate_rows().map_err(|e| Error::format(path, e.to_string()))?;
        for row in &m.rows {
            let p = m.resolve(row);
            if !p.is_file() {
                return Err(Error::format(path, format!("record `{}`: {} does not exist", row.id, p.display())));
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for row in &self.rows {
            w.serialize(row).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        self.root.join(&row.path)
    }

    pub fn split(&self, split: Split) -> Manifest {
        Manifest {
            root: self.root.clone(),
            rows: self.rows.iter().filter(|r| r.split == split).cloned().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.rows.iter().map(|r| r.label).collect()
    }

    /// Read one record's raw voxels; failures carry the record id.
    pub fn read_record(&self, index: usize) -> Result<VolumeRecord> {
        let row = &self.rows[index];
        let source = self.resolve(row);
        let voxels = volf::read_volume(&source).map_err(|e| Error::Record { id: row.id.clone(), source: Box::new(e) })?;
        Ok(VolumeRecord { id: row.id.clone(), label: row.label, voxels, source })
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        kind => Error::format(path, format!("{kind:?}")),
    }
}
