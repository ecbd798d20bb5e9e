//! 3D convolution lowered to patch-matrix x weight-matrix products.
//!
//! Output positions are processed in tiles so the patch matrix never exceeds
//! [`TILE_ELEMS`] elements, whatever the volume size.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

const TILE_ELEMS: usize = 1 << 18;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Conv3dSpec {
    pub fn new(stride: [usize; 3], padding: [usize; 3]) -> Self {
        Conv3dSpec { stride, padding }
    }

    /// Stride 1, no padding.
    pub fn unit() -> Self {
        Conv3dSpec { stride: [1; 3], padding: [0; 3] }
    }
}

/// Output extent of one axis: `floor((len + 2 * pad - kernel) / stride) + 1`.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 {
        return None;
    }
    (len + 2 * pad).checked_sub(kernel).map(|span| span / stride + 1)
}

/// Fully resolved sizes of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub input: [usize; 3],
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub spec: Conv3dSpec,
    pub output: [usize; 3],
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], spec: Conv3dSpec) -> Result<Self> {
        if input.len() != 5 || weight.len() != 5 || input[1] != weight[1] {
            return Err(Error::ShapeMismatch { lhs: input.to_vec(), rhs: weight.to_vec() });
        }
        let mut output = [0; 3];
        for axis in 0..3 {
            output[axis] = conv_out_len(
                input[2 + axis],
                weight[2 + axis],
                spec.stride[axis],
                spec.padding[axis],
            )
            .ok_or_else(|| {
                Error::InvalidGeometry(format!(
                    "kernel {:?} with stride {:?} and padding {:?} does not fit input {:?}",
                    &weight[2..],
                    spec.stride,
                    spec.padding,
                    &input[2..]
                ))
            })?;
        }
        Ok(ConvGeometry {
            batch: input[0],
            in_channels: input[1],
            input: [input[2], input[3], input[4]],
            out_channels: weight[0],
            kernel: [weight[2], weight[3], weight[4]],
            spec,
            output,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.output[0], self.output[1], self.output[2]]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    fn positions(&self) -> usize {
        self.output.iter().product()
    }

    fn sample_len(&self) -> usize {
        self.in_channels * self.input.iter().product::<usize>()
    }

    fn tile(&self) -> usize {
        (TILE_ELEMS / self.patch_len()).clamp(1, self.positions())
    }
}

/// Top-left-front input coordinate (may be negative) of each output position in a tile.
struct TileOrigins {
    z: Vec<isize>,
    y: Vec<isize>,
    x: Vec<isize>,
}

impl TileOrigins {
    fn new(g: &ConvGeometry, start: usize, len: usize) -> Self {
        let [_, oh, ow] = g.output;
        let mut o = TileOrigins {
            z: Vec::with_capacity(len),
            y: Vec::with_capacity(len),
            x: Vec::with_capacity(len),
        };
        for p in start..start + len {
            let (zo, rem) = (p / (oh * ow), p % (oh * ow));
            let (yo, xo) = (rem / ow, rem % ow);
            o.z.push((zo * g.spec.stride[0]) as isize - g.spec.padding[0] as isize);
            o.y.push((yo * g.spec.stride[1]) as isize - g.spec.padding[1] as isize);
            o.x.push((xo * g.spec.stride[2]) as isize - g.spec.padding[2] as isize);
        }
        o
    }
}

/// Calls `f(row, col, input_offset)` for every in-bounds patch entry of a tile.
#[inline]
fn for_each_patch_entry(
    g: &ConvGeometry,
    origins: &TileOrigins,
    mut f: impl FnMut(usize, usize, usize),
) {
    let [d, h, w] = g.input.map(|v| v as isize);
    let [kd, kh, kw] = g.kernel;
    let len = origins.z.len();
    let mut row = 0;
    for c in 0..g.in_channels {
        let channel_base = c * (d * h * w) as usize;
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    for j in 0..len {
                        let iz = origins.z[j] + a as isize;
                        let iy = origins.y[j] + b as isize;
                        let ix = origins.x[j] + e as isize;
                        if iz >= 0 && iz < d && iy >= 0 && iy < h && ix >= 0 && ix < w {
                            f(row, j, channel_base + ((iz * h + iy) * w + ix) as usize);
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Patch matrix `[patch_len, len]` (row stride `len`) for one sample.
fn im2col<T: Scalar>(g: &ConvGeometry, x: &[T], origins: &TileOrigins, cols: &mut [T]) {
    let len = origins.z.len();
    cols[..g.patch_len() * len].fill(T::zero());
    for_each_patch_entry(g, origins, |row, j, off| cols[row * len + j] = x[off]);
}

fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], origins: &TileOrigins, dx: &mut [T]) {
    let len = origins.z.len();
    for_each_patch_entry(g, origins, |row, j, off| dx[off] = dx[off] + cols[row * len + j]);
}

pub fn conv3d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: Conv3dSpec,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), spec)?;
    if let Some(b) = bias {
        if b.shape() != [g.out_channels] {
            return Err(Error::ShapeMismatch { lhs: b.shape().to_vec(), rhs: vec![g.out_channels] });
        }
    }
    let (positions, ck, k) = (g.positions(), g.patch_len(), g.out_channels);
    let tile = g.tile();
    let mut out = vec![T::zero(); g.batch * k * positions];
    out.par_chunks_mut(k * positions)
        .zip(input.data().par_chunks(g.sample_len()))
        .for_each(|(out_n, x_n)| {
            let mut cols = vec![T::zero(); ck * tile];
            for start in (0..positions).step_by(tile) {
                let len = tile.min(positions - start);
                let origins = TileOrigins::new(&g, start, len);
                im2col(&g, x_n, &origins, &mut cols);
                gemm(
                    MatRef::new(weight.data(), k, ck),
                    MatRef::new(&cols, ck, len),
                    T::zero(),
                    &mut out_n[start..],
                    positions,
                );
            }
            if let Some(b) = bias {
                for (row, &bv) in out_n.chunks_mut(positions).zip(b.data()) {
                    row.iter_mut().for_each(|v| *v = *v + bv);
                }
            }
        });
    Tensor::new(g.output_shape(), out)
}

pub struct Conv3dGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv3d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    spec: Conv3dSpec,
    grad: &Tensor<T>,
) -> Result<Conv3dGrads<T>> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), spec)?;
    if grad.shape() != g.output_shape().as_slice() {
        return Err(Error::ShapeMismatch { lhs: grad.shape().to_vec(), rhs: g.output_shape() });
    }
    let (positions, ck, k) = (g.positions(), g.patch_len(), g.out_channels);
    let tile = g.tile();
    let mut dx = vec![T::zero(); input.numel()];
    // Per-sample weight gradients, summed afterwards in sample order.
    let partial_dw: Vec<Vec<T>> = dx
        .par_chunks_mut(g.sample_len())
        .zip(input.data().par_chunks(g.sample_len()))
        .zip(grad.data().par_chunks(k * positions))
        .map(|((dx_n, x_n), dy_n)| {
            let mut dw = vec![T::zero(); k * ck];
            let mut cols = vec![T::zero(); ck * tile];
            for start in (0..positions).step_by(tile) {
                let len = tile.min(positions - start);
                let origins = TileOrigins::new(&g, start, len);
                im2col(&g, x_n, &origins, &mut cols);
                let dy_tile = MatRef::new(&dy_n[start..], k, len).with_ld(positions);
                gemm(dy_tile, MatRef::transposed(&cols, len, ck), T::one(), &mut dw, ck);
                gemm(
                    MatRef::transposed(weight.data(), ck, k),
                    dy_tile,
                    T::zero(),
                    &mut cols,
                    len,
                );
                col2im(&g, &cols, &origins, dx_n);
            }
            dw
        })
        .collect();
    let mut dw = vec![T::zero(); k * ck];
    for part in &partial_dw {
        for (acc, &v) in dw.iter_mut().zip(part) {
            *acc = *acc + v;
        }
    }
    let mut db = vec![T::zero(); k];
    for dy_n in grad.data().chunks(k * positions) {
        for (acc, row) in db.iter_mut().zip(dy_n.chunks(positions)) {
            *acc = *acc + T::of(row.iter().map(|v| v.as_f64()).sum());
        }
    }
    Ok(Conv3dGrads {
        input: Tensor::new(input.shape().to_vec(), dx)?,
        weight: Tensor::new(weight.shape().to_vec(), dw)?,
        bias: Tensor::new(vec![k], db)?,
    })
}
