use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

/// Resolved shapes of a (possibly batched) matrix product.
#[derive(Clone, Copy, Debug)]
struct Dims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    /// `b` is a single `[k, n]` matrix shared across the batch.
    shared_rhs: bool,
}

fn dims(a: &[usize], b: &[usize]) -> Result<Dims> {
    let mismatch = || Error::ShapeMismatch { lhs: a.to_vec(), rhs: b.to_vec() };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != kb {
        return Err(mismatch());
    }
    let batch: usize = a[..a.len() - 2].iter().product();
    if b.len() == 2 {
        return Ok(Dims { batch, m, k, n, shared_rhs: true });
    }
    if a[..a.len() - 2] != b[..b.len() - 2] {
        return Err(mismatch());
    }
    Ok(Dims { batch, m, k, n, shared_rhs: false })
}

/// `a[..., m, k] x b[k, n]` or `a[..., m, k] x b[..., k, n]` with equal batch dims.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let d = dims(a.shape(), b.shape())?;
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = d.n;
    let mut out = vec![T::zero(); d.batch * d.m * d.n];
    if d.shared_rhs {
        gemm(
            MatRef::new(a.data(), d.batch * d.m, d.k),
            MatRef::new(b.data(), d.k, d.n),
            T::zero(),
            &mut out,
            d.n,
        );
    } else {
        for i in 0..d.batch {
            gemm(
                MatRef::new(&a.data()[i * d.m * d.k..], d.m, d.k),
                MatRef::new(&b.data()[i * d.k * d.n..], d.k, d.n),
                T::zero(),
                &mut out[i * d.m * d.n..(i + 1) * d.m * d.n],
                d.n,
            );
        }
    }
    Tensor::new(shape, out)
}

pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let d = dims(a.shape(), b.shape())?;
    let g = grad.data();
    let mut ga = vec![T::zero(); a.numel()];
    let mut gb = vec![T::zero(); b.numel()];
    if d.shared_rhs {
        let rows = d.batch * d.m;
        gemm(
            MatRef::new(g, rows, d.n),
            MatRef::transposed(b.data(), d.n, d.k),
            T::zero(),
            &mut ga,
            d.k,
        );
        gemm(
            MatRef::transposed(a.data(), d.k, rows),
            MatRef::new(g, rows, d.n),
            T::zero(),
            &mut gb,
            d.n,
        );
    } else {
        let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
        for i in 0..d.batch {
            let gi = &g[i * sc..(i + 1) * sc];
            gemm(
                MatRef::new(gi, d.m, d.n),
                MatRef::transposed(&b.data()[i * sb..(i + 1) * sb], d.n, d.k),
                T::zero(),
                &mut ga[i * sa..(i + 1) * sa],
                d.k,
            );
            gemm(
                MatRef::transposed(&a.data()[i * sa..(i + 1) * sa], d.k, d.m),
                MatRef::new(gi, d.m, d.n),
                T::zero(),
                &mut gb[i * sb..(i + 1) * sb],
                d.n,
            );
        }
    }
    Ok((Tensor::new(a.shape().to_vec(), ga)?, Tensor::new(b.shape().to_vec(), gb)?))
}
