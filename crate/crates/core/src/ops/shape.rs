//! Layout kernels: permute, concat and slice. Each copies into a fresh buffer.

use crate::error::{Error, Result};
use crate::ops::softmax::split_axis;
use crate::tensor::{strides, Scalar, Tensor};

fn check_perm(rank: usize, perm: &[usize]) -> Result<()> {
    let mut seen = vec![false; rank];
    if perm.len() != rank {
        return Err(Error::InvalidShape(format!("permutation {perm:?} for rank {rank}")));
    }
    for &p in perm {
        if p >= rank || std::mem::replace(&mut seen[p], true) {
            return Err(Error::InvalidShape(format!("invalid permutation {perm:?}")));
        }
    }
    Ok(())
}

/// Output axis `i` is input axis `perm[i]`.
pub fn permute<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    check_perm(x.rank(), perm)?;
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = out_shape.len();
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..src.len() {
        out.push(src[off]);
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            off += src_strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            off -= src_strides[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidShape("concat of zero tensors".into()))?;
    split_axis(first.shape(), axis)?;
    let mut shape = first.shape().to_vec();
    shape[axis] = 0;
    for p in parts {
        let compatible = p.rank() == first.rank()
            && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::ShapeMismatch { lhs: first.shape().to_vec(), rhs: p.shape().to_vec() });
        }
        shape[axis] += p.shape()[axis];
    }
    let (outer, _, inner) = split_axis(&shape, axis)?;
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::new(shape, out)
}

/// Splits a gradient of a concat back into pieces with the given axis lengths.
pub fn concat_backward<T: Scalar>(grad: &Tensor<T>, axis: usize, lens: &[usize]) -> Result<Vec<Tensor<T>>> {
    let mut start = 0;
    lens.iter()
        .map(|&len| {
            let piece = slice(grad, axis, start, len);
            start += len;
            piece
        })
        .collect()
}

/// `[start, start + len)` along `axis`.
pub fn slice<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    let (outer, axis_len, inner) = split_axis(x.shape(), axis)?;
    if len == 0 || start + len > axis_len {
        return Err(Error::InvalidShape(format!(
            "slice {start}..{} out of range for axis {axis} of {:?}",
            start + len,
            x.shape()
        )));
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * axis_len + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    Tensor::new(shape, out)
}

pub fn slice_backward<T: Scalar>(
    input_shape: &[usize],
    grad: &Tensor<T>,
    axis: usize,
    start: usize,
) -> Result<Tensor<T>> {
    let (outer, axis_len, inner) = split_axis(input_shape, axis)?;
    let len = grad.shape()[axis];
    let mut out = Tensor::zeros(input_shape.to_vec());
    let dst = out.data_mut();
    for o in 0..outer {
        let base = (o * axis_len + start) * inner;
        dst[base..base + len * inner].copy_from_slice(&grad.data()[o * len * inner..(o + 1) * len * inner]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_layout_matches_index_formula() {
        let (n, c, d, h, w) = (2, 3, 2, 3, 4);
        let x = Tensor::<f32>::from_fn(vec![n, c, d, h, w], |i| i as f32);
        let tokens = permute(&x, &[0, 2, 3, 4, 1])
            .unwrap()
            .reshape(vec![n, d * h * w, c])
            .unwrap();
        for b in 0..n {
            for z in 0..d {
                for y in 0..h {
                    for xx in 0..w {
                        let t = z * (h * w) + y * w + xx;
                        for ch in 0..c {
                            assert_eq!(tokens.at(&[b, t, ch]), x.at(&[b, ch, z, y, xx]));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn permute_inverse_round_trip() {
        let x = Tensor::<f32>::from_fn(vec![2, 3, 4], |i| i as f32);
        let perm = [2, 0, 1];
        let y = permute(&x, &perm).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        assert_eq!(permute(&y, &inverse_permutation(&perm)).unwrap(), x);
        assert!(permute(&x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn concat_then_slice() {
        let a = Tensor::<f32>::from_fn(vec![2, 2], |i| i as f32);
        let b = Tensor::<f32>::from_fn(vec![2, 3], |i| 10.0 + i as f32);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.data(), &[0.0, 1.0, 10.0, 11.0, 12.0, 2.0, 3.0, 13.0, 14.0, 15.0]);
        assert_eq!(slice(&c, 1, 2, 3).unwrap(), b);
        assert!(concat(&[&a, &b], 0).is_err());
    }
}
