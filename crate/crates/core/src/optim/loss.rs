//! Binary cross-entropy on logits.
//!
//! Per element, with `L = 1 + (pos_weight - 1) * y`:
//! `loss = (1 - y) * x + L * softplus(-x)`, which for `pos_weight = 1` is the
//! usual `max(x, 0) - x * y + ln(1 + exp(-|x|))`. The batch reduction is the mean.

use crate::error::{Error, Result};
use crate::ops::elementwise::sigmoid;
use crate::tensor::{Scalar, Tensor};

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn check(logits: &[usize], targets: &[usize]) -> Result<()> {
    if logits != targets {
        return Err(Error::ShapeMismatch { lhs: logits.to_vec(), rhs: targets.to_vec() });
    }
    Ok(())
}

pub fn bce_with_logits<T: Scalar>(logits: &Tensor<T>, targets: &Tensor<T>, pos_weight: f64) -> Result<T> {
    check(logits.shape(), targets.shape())?;
    let total: f64 = logits
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&x, &y)| {
            let (x, y) = (x.as_f64(), y.as_f64());
            let l = 1.0 + (pos_weight - 1.0) * y;
            (1.0 - y) * x + l * softplus(-x)
        })
        .sum();
    Ok(T::of(total / logits.numel() as f64))
}

/// Gradient with respect to the logits, scaled by the upstream scalar gradient.
pub fn bce_with_logits_backward<T: Scalar>(
    logits: &Tensor<T>,
    targets: &Tensor<T>,
    pos_weight: f64,
    upstream: T,
) -> Result<Tensor<T>> {
    check(logits.shape(), targets.shape())?;
    let scale = upstream.as_f64() / logits.numel() as f64;
    let data = logits
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&x, &y)| {
            let (x, y) = (x.as_f64(), y.as_f64());
            let l = 1.0 + (pos_weight - 1.0) * y;
            T::of(((1.0 - y) - l * sigmoid(-x)) * scale)
        })
        .collect();
    Tensor::new(logits.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(x: f64, y: f64) -> f64 {
        let t = |v| Tensor::<f64>::new(vec![1], vec![v]).unwrap();
        bce_with_logits(&t(x), &t(y), 1.0).unwrap()
    }

    #[test]
    fn zero_logit_is_ln2() {
        assert!((one(0.0, 0.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((one(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn extreme_logits() {
        assert!(one(100.0, 1.0).abs() < 1e-30);
        assert!((one(-100.0, 1.0) - 100.0).abs() < 1e-9);
        for x in [-1e4, -50.0, 0.0, 50.0, 1e4] {
            for y in [0.0, 1.0] {
                assert!(one(x, y).is_finite());
            }
        }
    }

    #[test]
    fn gradient_is_sigmoid_minus_target_over_n() {
        let x = Tensor::<f64>::new(vec![2], vec![0.3, -1.2]).unwrap();
        let y = Tensor::<f64>::new(vec![2], vec![1.0, 0.0]).unwrap();
        let g = bce_with_logits_backward(&x, &y, 1.0, 1.0).unwrap();
        assert!((g.data()[0] - (sigmoid(0.3) - 1.0) / 2.0).abs() < 1e-15);
        assert!((g.data()[1] - sigmoid(-1.2) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn pos_weight_scales_positive_term() {
        let x = Tensor::<f64>::new(vec![1], vec![0.7]).unwrap();
        let y = Tensor::<f64>::new(vec![1], vec![1.0]).unwrap();
        let w1 = bce_with_logits(&x, &y, 1.0).unwrap();
        let w3 = bce_with_logits(&x, &y, 3.0).unwrap();
        assert!((w3 - 3.0 * w1).abs() < 1e-12);
    }
}
