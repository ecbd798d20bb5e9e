//! Broadcasting elementwise kernels.
//!
//! Broadcasting aligns trailing dimensions; a dimension of 1 (or a missing
//! leading dimension) stretches to match the other operand.

use crate::error::{Error, Result};
use crate::tensor::{strides, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Mul,
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::ShapeMismatch { lhs: a.to_vec(), rhs: b.to_vec() }),
        };
    }
    Ok(out)
}

/// Offset into an input of shape `input` for every element of `out`.
fn broadcast_offsets(out: &[usize], input: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let in_strides = strides(input);
    let mut eff = vec![0usize; rank];
    for (k, (&d, &s)) in input.iter().zip(&in_strides).enumerate() {
        let axis = rank - input.len() + k;
        eff[axis] = if d == 1 { 0 } else { s };
    }
    let total: usize = out.iter().product();
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            off += eff[axis];
            if idx[axis] < out[axis] {
                break;
            }
            off -= eff[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
    offsets
}

pub fn binary<T: Scalar>(op: BinaryOp, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let f = |x: T, y: T| match op {
        BinaryOp::Add => x + y,
        BinaryOp::Mul => x * y,
    };
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let oa = broadcast_offsets(&shape, a.shape());
    let ob = broadcast_offsets(&shape, b.shape());
    let (da, db) = (a.data(), b.data());
    let data = oa.iter().zip(&ob).map(|(&i, &j)| f(da[i], db[j])).collect();
    Tensor::new(shape, data)
}

/// Sum `grad` (shaped like the broadcast output) back down to `target` shape.
pub fn reduce_to_shape<T: Scalar>(grad: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if grad.shape() == target {
        return grad.clone();
    }
    let offsets = broadcast_offsets(grad.shape(), target);
    let mut out = Tensor::zeros(target.to_vec());
    let acc = out.data_mut();
    for (&o, &g) in offsets.iter().zip(grad.data()) {
        acc[o] = acc[o] + g;
    }
    out
}

/// Gradients of a broadcasting binary op with respect to both operands.
pub fn binary_backward<T: Scalar>(
    op: BinaryOp,
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    match op {
        BinaryOp::Add => Ok((reduce_to_shape(grad, a.shape()), reduce_to_shape(grad, b.shape()))),
        BinaryOp::Mul => {
            let ga = binary(BinaryOp::Mul, grad, b)?;
            let gb = binary(BinaryOp::Mul, grad, a)?;
            Ok((reduce_to_shape(&ga, a.shape()), reduce_to_shape(&gb, b.shape())))
        }
    }
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Subgradient 0 at exactly 0.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Saturating logistic function; never overflows.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn add_same_shape() {
        let out = binary(BinaryOp::Add, &t(&[2], &[1.0, 2.0]), &t(&[2], &[3.0, 4.0])).unwrap();
        assert_eq!(out.data(), &[4.0, 6.0]);
    }

    #[test]
    fn relu_clamps_negatives() {
        assert_eq!(relu(&t(&[3], &[-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape(&[4, 1, 5], &[3, 1]).unwrap(), vec![4, 3, 5]);
        let err = broadcast_shape(&[2, 3], &[2]).unwrap_err();
        assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[2]"));
    }

    #[test]
    fn broadcast_gradient_sums_stretched_axes() {
        let g = t(&[2, 3], &[1.0; 6]);
        assert_eq!(reduce_to_shape(&g, &[3]).data(), &[2.0, 2.0, 2.0]);
        assert_eq!(reduce_to_shape(&g, &[2, 1]).data(), &[3.0, 3.0]);
    }

    #[test]
    fn sigmoid_saturates() {
        assert_eq!(sigmoid(0.0f32), 0.5);
        assert_eq!(sigmoid(100.0f32), 1.0);
        assert!(sigmoid(-100.0f32) >= 0.0 && sigmoid(-100.0f32) < 1e-40);
    }
}
