//! Seeded epoch ordering and lazy batch assembly.

use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::manifest::Manifest;
use super::preprocess::Preprocessor;

/// Record order for one epoch: a permutation of `0..n` drawn from
/// `ChaCha8Rng::seed_from_u64(seed ^ epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch);
    order.shuffle(&mut rng);
    order
}

/// Index groups of at most `batch_size`; the last one may be short.
pub fn batch_plan(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `[N, 1, D, H, W]`.
    pub inputs: Tensor<f32>,
    pub labels: Vec<u8>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn targets(&self) -> Tensor<f32> {
        Tensor::from_fn(vec![self.labels.len()], |i| self.labels[i] as f32)
    }
}

/// Reads and preprocesses records of a manifest. Output never depends on
/// the worker count.
pub struct Loader {
    manifest: Manifest,
    pre: Preprocessor,
    pool: Option<rayon::ThreadPool>,
    cache: Option<Vec<OnceLock<Tensor<f32>>>>,
}

impl Loader {
    /// `workers <= 1` preprocesses on the calling thread.
    pub fn new(manifest: Manifest, pre: Preprocessor, workers: usize) -> Result<Self> {
        pre.validate()?;
        let pool = if workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .map_err(|e| Error::Config(format!("cannot start {workers} data workers: {e}")))?,
            )
        } else {
            None
        };
        Ok(Loader { manifest, pre, pool, cache: None })
    }

    /// Keep preprocessed volumes in memory after first use.
    pub fn cached(mut self) -> Self {
        self.cache = Some((0..self.manifest.len()).map(|_| OnceLock::new()).collect());
        self
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.manifest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.is_empty()
    }

    /// Preprocessed `[D, H, W]` volume of record `index`.
    pub fn volume(&self, index: usize) -> Result<Tensor<f32>> {
        let fresh = || -> Result<Tensor<f32>> {
            let rec = self.manifest.read_record(index)?;
            self.pre
                .apply(&rec.voxels)
                .map_err(|e| Error::Record { id: rec.id, source: Box::new(e) })
        };
        match &self.cache {
            Some(cache) => {
                if let Some(v) = cache[index].get() {
                    return Ok(v.clone());
                }
                let v = fresh()?;
                Ok(cache[index].get_or_init(|| v).clone())
            }
            None => fresh(),
        }
    }

    pub fn load_batch(&self, indices: &[usize]) -> Result<Batch> {
        let volumes: Vec<Tensor<f32>> = match &self.pool {
            Some(pool) => pool.install(|| indices.par_iter().map(|&i| self.volume(i)).collect::<Result<_>>())?,
            None => indices.iter().map(|&i| self.volume(i)).collect::<Result<_>>()?,
        };
        let stacked = Tensor::stack(&volumes)?;
        let mut shape = stacked.shape().to_vec();
        shape.insert(1, 1);
        Ok(Batch {
            ids: indices.iter().map(|&i| self.manifest.rows[i].id.clone()).collect(),
            inputs: stacked.reshape(shape)?,
            labels: indices.iter().map(|&i| self.manifest.rows[i].label).collect(),
        })
    }

    /// Lazy shuffled batches for one epoch.
    pub fn epoch(&self, batch_size: usize, seed: u64, epoch: u64) -> impl Iterator<Item = Result<Batch>> + '_ {
        let plan = batch_plan(&epoch_order(self.len(), seed, epoch), batch_size);
        plan.into_iter().map(move |idx| self.load_batch(&idx))
    }

    /// Batches in manifest order.
    pub fn sequential(&self, batch_size: usize) -> impl Iterator<Item = Result<Batch>> + '_ {
        let order: Vec<usize> = (0..self.len()).collect();
        batch_plan(&order, batch_size).into_iter().map(move |idx| self.load_batch(&idx))
    }
}

/// Shuffled batches of `manifest` for one epoch.
pub fn make_batches(
    manifest: &Manifest,
    pre: Preprocessor,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Batch>> {
    if manifest.is_empty() {
        return Err(Error::Config("manifest has no records".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let loader = Loader::new(manifest.clone(), pre, 1)?;
    loader.epoch(batch_size, seed, epoch).collect()
}
