use crate::autodiff::{GradMap, Var};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Training hyperparameters. Defaults: lr 1e-4, batch 4, 50 epochs; Adam
/// betas and epsilon use the canonical values.
#[derive(Clone, Debug, PartialEq)]
pub struct Hyperparams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Weight of the positive-class term of the loss; 1 means unweighted.
    pub pos_weight: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, batch_size: 4, epochs: 50, pos_weight: 1.0 }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if self.eps <= 0.0 {
            return bad("adam eps must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.pos_weight > 0.0 && self.pos_weight.is_finite()) {
            return bad("pos_weight must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    /// First moments, one per parameter in store order.
    pub m: Vec<Tensor<T>>,
    /// Second moments.
    pub v: Vec<Tensor<T>>,
    /// Steps taken so far.
    pub t: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, hp: &Hyperparams) -> Self {
        let zeros = || store.params().iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        Adam {
            lr: hp.lr,
            beta1: hp.beta1,
            beta2: hp.beta2,
            eps: hp.eps,
            state: AdamState { m: zeros(), v: zeros(), t: 0 },
        }
    }

    /// One in-place update of every trainable parameter. `grads` is aligned
    /// with the store's parameter order.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        let params = store.params_mut();
        if grads.len() != params.len() || self.state.m.len() != params.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} parameters, store has {}, got {} gradients",
                self.state.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if !p.trainable {
                continue;
            }
            match g {
                Some(g) if g.shape() == p.value.shape() => {}
                Some(g) => {
                    return Err(Error::ShapeMismatch { lhs: p.value.shape().to_vec(), rhs: g.shape().to_vec() })
                }
                None => return Err(Error::MissingGradient(p.name.clone())),
            }
        }
        self.state.t += 1;
        let t = self.state.t as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = grads[i].as_ref().filter(|_| p.trainable) else { continue };
            let (m, v) = (self.state.m[i].data_mut(), self.state.v[i].data_mut());
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let gi = gi.as_f64();
                let m_new = b1 * mi.as_f64() + (1.0 - b1) * gi;
                let v_new = b2 * vi.as_f64() + (1.0 - b2) * gi * gi;
                *mi = T::of(m_new);
                *vi = T::of(v_new);
                let update = self.lr * (m_new / c1) / ((v_new / c2).sqrt() + self.eps);
                *w = T::of(w.as_f64() - update);
            }
        }
        Ok(())
    }
}

/// Gradients for each parameter of `store`, aligned with its order.
pub fn collect_grads<T: Scalar>(grads: &mut GradMap<T>, param_vars: &[Var]) -> Vec<Option<Tensor<T>>> {
    param_vars.iter().map(|&v| grads.take(v)).collect()
}
