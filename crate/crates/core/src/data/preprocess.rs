//! Depth windowing, in-plane resizing and intensity normalization.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_DEPTH: usize = 50;
pub const DEFAULT_SIDE: usize = 112;
pub const NORM_EPS: f64 = 1e-6;

/// Output extent `[D, H, W]` of the preprocessing chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl Geometry {
    pub const FULL: Geometry = Geometry { depth: DEFAULT_DEPTH, height: DEFAULT_SIDE, width: DEFAULT_SIDE };
    pub const TINY: Geometry = Geometry { depth: 16, height: 32, width: 32 };

    pub fn dims(&self) -> [usize; 3] {
        [self.depth, self.height, self.width]
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!("geometry {:?} has a zero extent", self.dims())));
        }
        Ok(())
    }
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry::FULL
    }
}

fn check_volume(v: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    match *v.shape() {
        [d, h, w] => Ok((d, h, w)),
        _ => Err(Error::InvalidShape(format!("volume must be [D, H, W], got {:?}", v.shape()))),
    }
}

/// First slice of the centred window: `floor((D - target) / 2)`.
pub fn window_start(depth: usize, target: usize) -> usize {
    depth.saturating_sub(target) / 2
}

/// `target` consecutive slices from the middle of the volume. Shorter
/// volumes are padded by repeating the first and last slices, with the
/// extra slice (if the padding is odd) at the back.
pub fn center_window(voxels: &Tensor<f32>, target: usize) -> Result<Tensor<f32>> {
    let (d, h, w) = check_volume(voxels)?;
    if target == 0 {
        return Err(Error::Config("window depth must be positive".into()));
    }
    let plane = h * w;
    let src = voxels.data();
    let mut out = Vec::with_capacity(target * plane);
    if d >= target {
        let s = window_start(d, target);
        out.extend_from_slice(&src[s * plane..(s + target) * plane]);
    } else {
        let front = (target - d) / 2;
        for z in 0..target {
            let zs = z.saturating_sub(front).min(d - 1);
            out.extend_from_slice(&src[zs * plane..(zs + 1) * plane]);
        }
    }
    Tensor::new(vec![target, h, w], out)
}

/// Source index pair and weight of the upper neighbour for one output
/// coordinate, half-pixel centres.
fn sample_coords(out_len: usize, in_len: usize) -> Vec<(usize, usize, f32)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

/// Bilinear resize of every slice to `out_h x out_w`; depth is untouched.
pub fn resize_slices(voxels: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let (d, h, w) = check_volume(voxels)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidShape(format!("cannot resize to {out_h}x{out_w}")));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(voxels.clone());
    }
    let ys = sample_coords(out_h, h);
    let xs = sample_coords(out_w, w);
    let mut out = vec![0f32; d * out_h * out_w];
    out.par_chunks_mut(out_h * out_w).zip(voxels.data().par_chunks(h * w)).for_each(|(dst, src)| {
        for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
            let (r0, r1) = (&src[y0 * w..(y0 + 1) * w], &src[y1 * w..(y1 + 1) * w]);
            for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                let top = r0[x0] + (r0[x1] - r0[x0]) * lx;
                let bottom = r1[x0] + (r1[x1] - r1[x0]) * lx;
                dst[oy * out_w + ox] = top + (bottom - top) * ly;
            }
        }
    });
    Tensor::new(vec![d, out_h, out_w], out)
}

/// Per-volume z-score `(x - mean) / (std + 1e-6)` with population std.
pub fn normalize(voxels: &Tensor<f32>) -> Tensor<f32> {
    let n = voxels.numel() as f64;
    let mean = voxels.data().iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = voxels.data().iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + NORM_EPS;
    voxels.map(|x| ((x as f64 - mean) / denom) as f32)
}

/// The full chain: window, resize, optional clamp, normalize.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Preprocessor {
    pub geometry: Geometry,
    /// Raw-intensity clamp applied before normalization. Off by default.
    pub clamp: Option<(f32, f32)>,
}

impl Preprocessor {
    pub fn new(geometry: Geometry) -> Self {
        Preprocessor { geometry, clamp: None }
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if let Some((lo, hi)) = self.clamp {
            if lo.partial_cmp(&hi) != Some(std::cmp::Ordering::Less) {
                return Err(Error::Config(format!("clamp range [{lo}, {hi}] is empty")));
            }
        }
        Ok(())
    }

    /// `[D, H, W]` raw voxels to `[depth, height, width]` normalized voxels.
    pub fn apply(&self, voxels: &Tensor<f32>) -> Result<Tensor<f32>> {
        let g = self.geometry;
        let windowed = center_window(voxels, g.depth)?;
        let mut v = resize_slices(&windowed, g.height, g.width)?;
        if let Some((lo, hi)) = self.clamp {
            v = v.map(|x| x.clamp(lo, hi));
        }
        Ok(normalize(&v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(d: usize, h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn(vec![d, h, w], |i| (i / (h * w)) as f32)
    }

    #[test]
    fn window_of_120_starts_at_35() {
        let out = center_window(&ramp(120, 2, 2), 50).unwrap();
        let firsts: Vec<f32> = out.data().chunks(4).map(|c| c[0]).collect();
        assert_eq!(firsts, (35..=84).map(|z| z as f32).collect::<Vec<_>>());
    }

    #[test]
    fn window_of_50_is_identity() {
        let v = ramp(50, 3, 2);
        assert_eq!(center_window(&v, 50).unwrap(), v);
    }

    #[test]
    fn short_volume_replicates_edges() {
        let out = center_window(&ramp(30, 2, 2), 50).unwrap();
        let firsts: Vec<f32> = out.data().chunks(4).map(|c| c[0]).collect();
        assert_eq!(firsts.len(), 50);
        assert!(firsts[..10].iter().all(|&z| z == 0.0));
        assert!(firsts[40..].iter().all(|&z| z == 29.0));
        assert_eq!(firsts[10..40], (0..30).map(|z| z as f32).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn window_is_centred() {
        for d in 50..300 {
            let s = window_start(d, 50) as f64;
            assert!((s + 25.0 - d as f64 / 2.0).abs() <= 1.0);
        }
    }

    #[test]
    fn constant_slice_resizes_to_constant() {
        let v = Tensor::full(vec![2, 7, 9], 3.25f32);
        let out = resize_slices(&v, 112, 112).unwrap();
        assert!(out.data().iter().all(|&x| x == 3.25));
    }

    #[test]
    fn same_size_is_identity() {
        let v = Tensor::from_fn(vec![1, 112, 112], |i| (i as f32).sqrt());
        assert_eq!(resize_slices(&v, 112, 112).unwrap(), v);
    }

    #[test]
    fn upsample_two_by_two() {
        // 2x2 -> 4x4: output pixel 1 samples source coordinate 0.25.
        let v = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let out = resize_slices(&v, 4, 4).unwrap();
        assert_eq!(out.at(&[0, 0, 0]), 0.0);
        assert!((out.at(&[0, 0, 1]) - 0.25).abs() < 1e-6);
        assert!((out.at(&[0, 1, 1]) - 0.75).abs() < 1e-6);
        assert_eq!(out.at(&[0, 3, 3]), 3.0);
    }

    #[test]
    fn constant_volume_normalizes_to_zero() {
        let out = normalize(&Tensor::full(vec![3, 4, 5], -1000.0f32));
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn normalized_moments() {
        let v = Tensor::from_fn(vec![4, 8, 8], |i| ((i * 7919) % 101) as f32 * 3.0 - 40.0);
        let out = normalize(&v);
        let n = out.numel() as f64;
        let mean = out.data().iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = out.data().iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-5);
        assert!((var.sqrt() - 1.0).abs() < 1e-4);
    }

    #[test]
    fn chain_output_geometry() {
        let p = Preprocessor::default();
        for dims in [[2, 2, 2], [120, 64, 80], [49, 113, 111]] {
            let v = Tensor::from_fn(dims.to_vec(), |i| i as f32);
            assert_eq!(p.apply(&v).unwrap().shape(), &[50, 112, 112]);
        }
    }

    #[test]
    fn clamp_range_validated() {
        let p = Preprocessor { clamp: Some((10.0, -10.0)), ..Default::default() };
        assert!(p.validate().is_err());
    }
}
