//! Synthetic chest-CT phantoms: a body cylinder with two lung ellipsoids,
//! plus bright spherical lesions inside the lungs for the positive class.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::manifest::{Manifest, ManifestRow, Split};
use super::volf;

pub const AIR: f32 = -1000.0;
pub const BODY: f32 = 40.0;
pub const LUNG: f32 = -850.0;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    /// `[D, H, W]` of generated volumes.
    pub dims: [usize; 3],
    /// Lung semi-axes as fractions of `[D, H, W]`.
    pub lung_axes: [f64; 3],
    /// Lateral offset of each lung centre from the midline, fraction of W.
    pub lung_offset: f64,
    /// Body cross-section semi-axes as fractions of `[H, W]`.
    pub body_axes: [f64; 2],
    pub lesion_count: (usize, usize),
    /// Lesion radius range as fractions of H.
    pub lesion_radius: (f64, f64),
    pub lesion_intensity: (f32, f32),
    /// Half-width of the uniform voxel noise.
    pub noise: f32,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [64, 128, 128],
            lung_axes: [0.45, 0.3, 0.16],
            lung_offset: 0.2,
            body_axes: [0.45, 0.45],
            lesion_count: (1, 4),
            lesion_radius: (0.06, 0.12),
            lesion_intensity: (100.0, 300.0),
            noise: 30.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn tiny() -> Self {
        PhantomSpec { dims: [24, 40, 40], ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dims.iter().any(|&d| d < 2) {
            return bad(format!("phantom dims {:?} must all be at least 2", self.dims));
        }
        if self.lesion_count.0 == 0 || self.lesion_count.0 > self.lesion_count.1 {
            return bad(format!("lesion count range {:?} must be non-empty and start at 1 or more", self.lesion_count));
        }
        let (r0, r1) = self.lesion_radius;
        if !(r0 > 0.0 && r0 <= r1) {
            return bad(format!("lesion radius range {:?} is invalid", self.lesion_radius));
        }
        let (i0, i1) = self.lesion_intensity;
        if i0.partial_cmp(&i1).is_none_or(|o| o.is_gt()) || self.noise.is_nan() || self.noise < 0.0 {
            return bad("lesion intensity range or noise level is invalid".into());
        }
        // Lesion voxels must stay brighter than any lung voxel.
        if i0 - self.noise <= LUNG + self.noise {
            return bad("lesion intensities overlap lung intensities".into());
        }
        if self.lung_axes.iter().any(|&a| a <= 0.0) || self.body_axes.iter().any(|&a| a <= 0.0) {
            return bad("ellipsoid axes must be positive".into());
        }
        Ok(())
    }

    fn centre(&self) -> [f64; 3] {
        self.dims.map(|d| (d as f64 - 1.0) / 2.0)
    }

    /// True if voxel `(z, y, x)` lies inside either lung.
    pub fn in_lung(&self, z: usize, y: usize, x: usize) -> bool {
        let [d, h, w] = self.dims.map(|v| v as f64);
        let [cz, cy, cx] = self.centre();
        let [az, ay, ax] = [self.lung_axes[0] * d, self.lung_axes[1] * h, self.lung_axes[2] * w];
        let off = self.lung_offset * w;
        [cx - off, cx + off].iter().any(|&lx| {
            let dz = (z as f64 - cz) / az;
            let dy = (y as f64 - cy) / ay;
            let dx = (x as f64 - lx) / ax;
            dz * dz + dy * dy + dx * dx <= 1.0
        })
    }

    fn in_body(&self, y: usize, x: usize) -> bool {
        let [_, h, w] = self.dims.map(|v| v as f64);
        let [_, cy, cx] = self.centre();
        let dy = (y as f64 - cy) / (self.body_axes[0] * h);
        let dx = (x as f64 - cx) / (self.body_axes[1] * w);
        dy * dy + dx * dx <= 1.0
    }

    /// Lung mask in `[D, H, W]` order.
    pub fn lung_mask(&self) -> Vec<bool> {
        let [d, h, w] = self.dims;
        let mut m = Vec::with_capacity(d * h * w);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    m.push(self.in_lung(z, y, x));
                }
            }
        }
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lesion {
    pub centre: [f64; 3],
    pub radius: f64,
    pub intensity: f32,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Lesions drawn from the lesion stream. Centres are taken from lung voxels
/// in the middle third of the depth axis.
fn draw_lesions(spec: &PhantomSpec, mask: &[bool], rng: &mut ChaCha8Rng) -> Vec<Lesion> {
    let [d, h, w] = spec.dims;
    let (z0, z1) = (d / 3, (2 * d).div_ceil(3).max(d / 3 + 1));
    let candidates: Vec<usize> = (z0 * h * w..z1 * h * w).filter(|&i| mask[i]).collect();
    let count = rng.gen_range(spec.lesion_count.0..=spec.lesion_count.1);
    (0..count)
        .map(|_| {
            let i = candidates[rng.gen_range(0..candidates.len())];
            let centre = [(i / (h * w)) as f64, ((i / w) % h) as f64, (i % w) as f64];
            let radius = rng.gen_range(spec.lesion_radius.0..=spec.lesion_radius.1) * h as f64;
            let intensity = rng.gen_range(spec.lesion_intensity.0..=spec.lesion_intensity.1);
            Lesion { centre, radius, intensity }
        })
        .collect()
}

/// One phantom. `stream` selects the noise and lesion streams; volumes
/// sharing a stream differ only inside the lung mask.
pub fn generate_volume(spec: &PhantomSpec, stream: u64, positive: bool) -> Result<(Tensor<f32>, Vec<Lesion>)> {
    spec.validate()?;
    let [d, h, w] = spec.dims;
    let mask = spec.lung_mask();
    let lesions = if positive {
        let mut lesion_rng = rng_for(spec.seed, 2 * stream + 1);
        draw_lesions(spec, &mask, &mut lesion_rng)
    } else {
        Vec::new()
    };
    if positive && mask.iter().all(|&m| !m) {
        return Err(Error::Config("phantom lung mask is empty".into()));
    }
    let mut noise_rng = rng_for(spec.seed, 2 * stream);
    let mut data = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                let mut v = if mask[i] {
                    LUNG
                } else if spec.in_body(y, x) {
                    BODY
                } else {
                    AIR
                };
                if mask[i] {
                    for l in &lesions {
                        let dist2 = (z as f64 - l.centre[0]).powi(2)
                            + (y as f64 - l.centre[1]).powi(2)
                            + (x as f64 - l.centre[2]).powi(2);
                        if dist2 <= l.radius * l.radius {
                            v = v.max(l.intensity);
                        }
                    }
                }
                let n = if spec.noise > 0.0 { noise_rng.gen_range(-spec.noise..=spec.noise) } else { 0.0 };
                data.push(v + n);
            }
        }
    }
    Ok((Tensor::new(vec![d, h, w], data)?, lesions))
}

/// Writes `volumes/<id>.volf` files and `manifest.csv` under `dir`.
/// Each split holds `n` negatives and `n` positives; record pairs share a
/// noise stream.
pub fn generate_phantoms(spec: &PhantomSpec, train_per_class: usize, val_per_class: usize, dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    if train_per_class + val_per_class == 0 {
        return Err(Error::Config("no phantoms requested".into()));
    }
    let mut rows = Vec::new();
    let mut stream = 0u64;
    for (split, n) in [(Split::Train, train_per_class), (Split::Val, val_per_class)] {
        for k in 0..n {
            for label in [0u8, 1] {
                let id = format!("{split}_{k:04}_{}", if label == 1 { "pos" } else { "neg" });
                let rel = format!("volumes/{id}.volf");
                let (vol, _) = generate_volume(spec, stream, label == 1)?;
                volf::write_volume(&dir.join(&rel), &vol)?;
                rows.push(ManifestRow { id, path: rel.into(), label, split });
            }
            stream += 1;
        }
    }
    let manifest = Manifest::new(dir, rows)?;
    manifest.save(&dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomSpec {
        PhantomSpec { dims: [12, 24, 24], seed: 7, ..Default::default() }
    }

    #[test]
    fn positives_have_lesions_negatives_none() {
        let s = small();
        for stream in 0..5 {
            let (_, pos) = generate_volume(&s, stream, true).unwrap();
            let (_, neg) = generate_volume(&s, stream, false).unwrap();
            assert!((1..=4).contains(&pos.len()));
            assert!(neg.is_empty());
        }
    }

    #[test]
    fn pairs_differ_only_inside_lung() {
        let s = small();
        let mask = s.lung_mask();
        let (p, _) = generate_volume(&s, 3, true).unwrap();
        let (n, _) = generate_volume(&s, 3, false).unwrap();
        let mut differing = 0;
        for (i, (a, b)) in p.data().iter().zip(n.data()).enumerate() {
            if a != b {
                assert!(mask[i]);
                differing += 1;
            }
        }
        assert!(differing > 0);
    }

    #[test]
    fn max_lung_intensity_separates_classes() {
        let s = small();
        let mask = s.lung_mask();
        let lung_max =
            |v: &Tensor<f32>| v.data().iter().zip(&mask).filter(|(_, &m)| m).map(|(&x, _)| x).fold(f32::MIN, f32::max);
        let pos_min = (0..6).map(|k| lung_max(&generate_volume(&s, k, true).unwrap().0)).fold(f32::MAX, f32::min);
        let neg_max = (0..6).map(|k| lung_max(&generate_volume(&s, k, false).unwrap().0)).fold(f32::MIN, f32::max);
        assert!(pos_min > neg_max);
    }

    #[test]
    fn same_seed_same_volume() {
        let s = small();
        assert_eq!(generate_volume(&s, 1, true).unwrap().0, generate_volume(&s, 1, true).unwrap().0);
        let other = PhantomSpec { seed: 8, ..small() };
        assert_ne!(generate_volume(&s, 1, true).unwrap().0, generate_volume(&other, 1, true).unwrap().0);
    }

    #[test]
    fn overlapping_intensity_ranges_rejected() {
        let s = PhantomSpec { lesion_intensity: (-900.0, 0.0), ..small() };
        assert!(s.validate().is_err());
    }
}
