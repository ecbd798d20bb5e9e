//! Batch normalization over every axis except the channel axis (axis 1).

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Values saved by the forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct BnSaved<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mode: BnMode,
}

pub struct BnOutput<T> {
    pub output: Tensor<T>,
    pub saved: BnSaved<T>,
    /// Batch mean and biased batch variance per channel (train mode only).
    pub batch_stats: Option<(Vec<f64>, Vec<f64>)>,
}

fn layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::InvalidShape(format!("batchnorm needs [N, C, ...], got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// `running` holds `(mean, var)` and is required in eval mode.
pub fn batchnorm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: Option<(&Tensor<T>, &Tensor<T>)>,
    mode: BnMode,
    eps: f64,
) -> Result<BnOutput<T>> {
    let (n, c, inner) = layout(x.shape())?;
    for p in [gamma, beta] {
        if p.shape() != [c] {
            return Err(Error::ShapeMismatch { lhs: p.shape().to_vec(), rhs: vec![c] });
        }
    }
    let data = x.data();
    let (mean, var, batch_stats) = match mode {
        BnMode::Train => {
            let count = (n * inner) as f64;
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for ch in 0..c {
                let plane = |s: usize| &data[(s * c + ch) * inner..(s * c + ch + 1) * inner];
                let m = (0..n).flat_map(|s| plane(s).iter()).map(|v| v.as_f64()).sum::<f64>() / count;
                let v = (0..n)
                    .flat_map(|s| plane(s).iter())
                    .map(|v| (v.as_f64() - m).powi(2))
                    .sum::<f64>()
                    / count;
                mean[ch] = m;
                var[ch] = v;
            }
            (mean.clone(), var.clone(), Some((mean, var)))
        }
        BnMode::Eval => {
            let (rm, rv) = running.ok_or_else(|| {
                Error::InvalidShape("eval-mode batchnorm requires running statistics".into())
            })?;
            if rm.shape() != [c] || rv.shape() != [c] {
                return Err(Error::ShapeMismatch { lhs: rm.shape().to_vec(), rhs: vec![c] });
            }
            let mean = rm.data().iter().map(|v| v.as_f64()).collect();
            let var = rv.data().iter().map(|v| v.as_f64()).collect();
            (mean, var, None)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut normalized = vec![T::zero(); data.len()];
    let mut out = vec![T::zero(); data.len()];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * inner;
            let (g, b) = (gamma.data()[ch], beta.data()[ch]);
            let (m, is) = (mean[ch], inv_std[ch]);
            for i in base..base + inner {
                let xh = T::of((data[i].as_f64() - m) * is);
                normalized[i] = xh;
                out[i] = g * xh + b;
            }
        }
    }
    Ok(BnOutput {
        output: Tensor::new(x.shape().to_vec(), out)?,
        saved: BnSaved {
            normalized: Tensor::new(x.shape().to_vec(), normalized)?,
            inv_std: inv_std.into_iter().map(T::of).collect(),
            mode,
        },
        batch_stats,
    })
}

pub struct BnGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub fn batchnorm_backward<T: Scalar>(
    saved: &BnSaved<T>,
    gamma: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<BnGrads<T>> {
    let (n, c, inner) = layout(grad.shape())?;
    let (dy, xh) = (grad.data(), saved.normalized.data());
    let count = (n * inner) as f64;
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * inner;
            for i in base..base + inner {
                dbeta[ch] += dy[i].as_f64();
                dgamma[ch] += dy[i].as_f64() * xh[i].as_f64();
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * inner;
            let scale = gamma.data()[ch].as_f64() * saved.inv_std[ch].as_f64();
            for i in base..base + inner {
                let v = match saved.mode {
                    BnMode::Eval => scale * dy[i].as_f64(),
                    BnMode::Train => {
                        scale
                            * (dy[i].as_f64()
                                - dbeta[ch] / count
                                - xh[i].as_f64() * dgamma[ch] / count)
                    }
                };
                dx[i] = T::of(v);
            }
        }
    }
    Ok(BnGrads {
        input: Tensor::new(grad.shape().to_vec(), dx)?,
        gamma: Tensor::new(vec![c], dgamma.into_iter().map(T::of).collect())?,
        beta: Tensor::new(vec![c], dbeta.into_iter().map(T::of).collect())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn channel_moments(t: &Tensor<f64>, ch: usize) -> (f64, f64) {
        let (n, c, inner) = layout(t.shape()).unwrap();
        let vals: Vec<f64> = (0..n)
            .flat_map(|s| t.data()[(s * c + ch) * inner..(s * c + ch + 1) * inner].iter().copied())
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
        (m, v)
    }

    #[test]
    fn train_mode_standardizes_each_channel() {
        let x = Tensor::<f64>::from_fn(vec![2, 3, 2, 3, 3], |i| ((i * 37) % 11) as f64 * 0.7 - 2.0);
        let out = batchnorm(&x, &Tensor::ones(vec![3]), &Tensor::zeros(vec![3]), None, BnMode::Train, 1e-5)
            .unwrap();
        for ch in 0..3 {
            let (m, v) = channel_moments(&out.output, ch);
            assert!(m.abs() < 1e-4, "mean {m}");
            assert!((v - 1.0).abs() < 1e-3, "var {v}");
        }
    }

    #[test]
    fn zero_gamma_outputs_beta() {
        let x = Tensor::<f32>::from_fn(vec![2, 2, 4], |i| i as f32);
        let beta = Tensor::new(vec![2], vec![0.25, -3.0]).unwrap();
        let out = batchnorm(&x, &Tensor::zeros(vec![2]), &beta, None, BnMode::Train, 1e-5).unwrap();
        for s in 0..2 {
            for ch in 0..2 {
                assert!(out.output.data()[(s * 2 + ch) * 4..][..4].iter().all(|&v| v == beta.data()[ch]));
            }
        }
    }

    #[test]
    fn eval_mode_requires_running_stats() {
        let x = Tensor::<f32>::zeros(vec![1, 2, 2]);
        let p = Tensor::<f32>::ones(vec![2]);
        assert!(batchnorm(&x, &p, &p, None, BnMode::Eval, 1e-5).is_err());
    }
}
