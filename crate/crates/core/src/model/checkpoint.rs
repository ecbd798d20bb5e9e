//! `VNCK` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "VNCK" | version: u32 | count: u32
//! count x ( name_len: u32 | name: UTF-8 | rank: u32 | dims: rank x u64 | data: f32 x prod(dims) )
//! ```
//!
//! Model parameters are stored under their own names. Reserved prefixes:
//! `bn.` for batchnorm running statistics, `opt.` for optimizer state and
//! `meta.` for run metadata.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Model, ModelConfig, Variant};

pub const MAGIC: &[u8; 4] = b"VNCK";
pub const VERSION: u32 = 1;
pub const BN_PREFIX: &str = "bn.";
pub const OPT_PREFIX: &str = "opt.";
pub const META_PREFIX: &str = "meta.";
const MODEL_CONFIG_KEY: &str = "meta.model";

/// Ordered named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[(String, Tensor<f32>)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Inserts or replaces.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<f32>) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((name, value)),
        }
    }

    pub fn require(&self, name: &str, path: &Path) -> Result<&Tensor<f32>> {
        self.get(name)
            .ok_or_else(|| Error::format(path, format!("checkpoint has no tensor `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "bad magic, expected VNCK"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                let d = usize::try_from(r.u64()?).map_err(|_| Error::format(path, "dimension overflow"))?;
                shape.push(d);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4).map(|_| n))
                .ok_or_else(|| Error::format(path, format!("dimension overflow in `{name}`")))?;
            let raw = r.take(numel * 4)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let tensor = Tensor::new(shape, data).map_err(|e| Error::format(path, format!("`{name}`: {e}")))?;
            entries.push((name, tensor));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after last tensor"));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Parameters, running statistics and the model configuration.
    pub fn from_model(model: &Model<f32>) -> Self {
        let mut ck = Checkpoint::new();
        ck.insert(MODEL_CONFIG_KEY, encode_config(&model.cfg));
        for p in model.store.params() {
            ck.insert(p.name.clone(), p.value.clone());
        }
        for b in model.store.buffers() {
            ck.insert(format!("{BN_PREFIX}{}", b.name), b.value.clone());
        }
        ck
    }

    /// Rebuild the model stored in this checkpoint.
    pub fn to_model(&self, path: &Path) -> Result<Model<f32>> {
        let cfg = decode_config(self.require(MODEL_CONFIG_KEY, path)?, path)?;
        let mut model = Model::build(cfg, 0)?;
        for p in model.store.params_mut() {
            let t = self.require(&p.name, path)?;
            if t.shape() != p.value.shape() {
                return Err(Error::format(path, format!("`{}` has shape {:?}, expected {:?}", p.name, t.shape(), p.value.shape())));
            }
            p.value = t.clone();
        }
        for b in model.store.buffers_mut() {
            let key = format!("{BN_PREFIX}{}", b.name);
            let t = self.require(&key, path)?;
            if t.shape() != b.value.shape() {
                return Err(Error::format(path, format!("`{key}` has the wrong shape")));
            }
            b.value = t.clone();
        }
        Ok(model)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(self.path, format!("truncated checkpoint at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn encode_config(cfg: &ModelConfig) -> Tensor<f32> {
    let mut v = vec![
        match cfg.variant {
            Variant::Plain => 0.0,
            Variant::WithMha => 1.0,
        },
        cfg.in_channels as f32,
    ];
    v.extend(cfg.stage_channels.iter().map(|&c| c as f32));
    v.extend(cfg.stage_strides.iter().map(|&s| s as f32));
    v.push(cfg.blocks_per_stage as f32);
    v.push(cfg.mha_heads as f32);
    Tensor::new(vec![v.len()], v).expect("config vector")
}

fn decode_config(t: &Tensor<f32>, path: &Path) -> Result<ModelConfig> {
    let v = t.data();
    if v.len() != 12 || v.iter().any(|x| x.fract() != 0.0 || *x < 0.0) {
        return Err(Error::format(path, "malformed model configuration"));
    }
    let u = |i: usize| v[i] as usize;
    let variant = match u(0) {
        0 => Variant::Plain,
        1 => Variant::WithMha,
        _ => return Err(Error::format(path, "unknown model variant")),
    };
    Ok(ModelConfig {
        variant,
        in_channels: u(1),
        stage_channels: [u(2), u(3), u(4), u(5)],
        stage_strides: [u(6), u(7), u(8), u(9)],
        blocks_per_stage: u(10),
        mha_heads: u(11),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bad_magic_names_file() {
        let err = Checkpoint::from_bytes(b"NOPE\x01\0\0\0\0\0\0\0", Path::new("x.ckpt")).unwrap_err();
        assert!(err.to_string().contains("x.ckpt"));
    }

    #[test]
    fn truncated_payload() {
        let mut ck = Checkpoint::new();
        ck.insert("w", Tensor::ones(vec![2, 3]));
        let bytes = ck.to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 1], Path::new("t")).unwrap_err();
        assert!(err.to_string().contains("truncated"));
        assert_eq!(Checkpoint::from_bytes(&bytes, Path::new("t")).unwrap(), ck);
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let model = Model::build(ModelConfig::with_channels(Variant::WithMha, [4, 4, 8, 8]), 5).unwrap();
        let ck = Checkpoint::from_model(&model);
        let back = Checkpoint::from_bytes(&ck.to_bytes(), Path::new("m")).unwrap();
        let restored = back.to_model(Path::new("m")).unwrap();
        assert_eq!(restored.cfg, model.cfg);
        assert_eq!(restored.store, model.store);
        assert_eq!(Checkpoint::from_model(&restored).to_bytes(), ck.to_bytes());
    }
}
