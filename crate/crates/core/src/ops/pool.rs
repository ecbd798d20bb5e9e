use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mean over all spatial positions: `[N, C, ...] -> [N, C]`.
pub fn avgpool_global<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = x.shape();
    if shape.len() < 3 {
        return Err(Error::InvalidShape(format!("global pooling needs [N, C, ...], got {shape:?}")));
    }
    let spatial: usize = shape[2..].iter().product();
    let inv = 1.0 / spatial as f64;
    let data = x
        .data()
        .chunks(spatial)
        .map(|c| T::of(c.iter().map(|v| v.as_f64()).sum::<f64>() * inv))
        .collect();
    Tensor::new(vec![shape[0], shape[1]], data)
}

pub fn avgpool_global_backward<T: Scalar>(input_shape: &[usize], grad: &Tensor<T>) -> Tensor<T> {
    let spatial: usize = input_shape[2..].iter().product();
    let inv = T::of(1.0 / spatial as f64);
    let mut out = Vec::with_capacity(grad.numel() * spatial);
    for &g in grad.data() {
        out.extend(std::iter::repeat_n(g * inv, spatial));
    }
    Tensor::new(input_shape.to_vec(), out).expect("pool gradient shape")
}
