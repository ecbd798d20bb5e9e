//! Finite-difference verification of analytic gradients.
//!
//! Checks run in `f64`. Coordinates whose perturbation flips any relu
//! activation (detected through [`Graph::kink_signature`]) are skipped, since
//! central differences are meaningless across a kink.

mod suite;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use suite::{registry, run_suite, GradCheckCase, CORRUPTED_FIXTURE};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 3e-6;

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor<f64>, h: f64) -> Tensor<f64>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Denominator floor of the relative error, so gradients that are
    /// analytically near zero are compared in absolute terms.
    pub floor: f64,
    /// Coordinates sampled per input tensor; smaller tensors are checked fully.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions { step: DEFAULT_STEP, tolerance: 1e-3, floor: 1e-3, max_coords: 24, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates skipped because a perturbation crossed a relu kink.
    pub skipped: usize,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare `backward()` of the scalar built by `build` against central differences
/// with respect to every tensor in `inputs`.
pub fn check_gradients<F>(name: &str, inputs: &[Tensor<f64>], opts: &CheckOptions, build: F) -> Result<CheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = xs.iter().map(|x| g.input(x.clone())).collect();
        let out = build(&mut g, &vars)?;
        let v = g.value(out);
        if v.numel() != 1 {
            return Err(Error::NonScalarLoss(v.shape().to_vec()));
        }
        Ok((v.item(), g.kink_signature()))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let base_sig = g.kink_signature();
    let grads = g.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = CheckReport {
        name: name.to_string(),
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
        tolerance: opts.tolerance,
    };
    for (k, var) in vars.iter().enumerate() {
        let n = inputs[k].numel();
        let coords: Vec<usize> = if n <= opts.max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        for i in coords {
            let analytic = grads.get(*var).map_or(0.0, |t| t.data()[i]);
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + opts.step;
            let (plus, sig_plus) = eval(&probe)?;
            probe[k].data_mut()[i] = orig - opts.step;
            let (minus, sig_minus) = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            if sig_plus != base_sig || sig_minus != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = relative_error(analytic, numeric, opts.floor);
            report.max_rel_err = report.max_rel_err.max(if err.is_nan() { f64::INFINITY } else { err });
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_has_unit_gradient() {
        let x = Tensor::<f64>::new(vec![3], vec![0.3, -2.0, 7.5]).unwrap();
        let g = finite_diff_grad(|t| t.data().iter().sum(), &x, DEFAULT_STEP);
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn square_gradient() {
        let x = Tensor::<f64>::new(vec![2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| t.data().iter().map(|v| v * v).sum(), &x, DEFAULT_STEP);
        assert!((g.data()[0] - 2.0).abs() < 1e-6);
        assert!((g.data()[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn corrupted_backward_fails() {
        let x = Tensor::<f64>::new(vec![3], vec![0.5, -0.2, 0.9]).unwrap();
        let report = check_gradients("faulty", &[x], &CheckOptions::default(), |g, v| {
            let y = g.faulty_identity(v[0]);
            let sq = g.mul(y, y)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(!report.passed());
        assert!(report.max_rel_err > 0.1);
    }
}
