use std::collections::HashMap;

use rand::distributions::{Distribution, Uniform};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::ops::norm::BnMode;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T = f32> {
    /// Dot-separated path, unique within a store.
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

/// Named non-trainable state such as batchnorm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Buffer<T = f32> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Ordered parameters and buffers of a network.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T = f32> {
    params: Vec<Parameter<T>>,
    buffers: Vec<Buffer<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), buffers: Vec::new() }
    }

    fn name_taken(&self, name: &str) -> bool {
        self.params.iter().any(|p| p.name == name) || self.buffers.iter().any(|b| b.name == name)
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.name_taken(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.params.push(Parameter { name, value, trainable });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<BufferId> {
        let name = name.into();
        if self.name_taken(&name) {
            return Err(Error::Config(format!("duplicate buffer name `{name}`")));
        }
        self.buffers.push(Buffer { name, value });
        Ok(BufferId(self.buffers.len() - 1))
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer<T>] {
        &mut self.buffers
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0].value
    }

    pub fn find_param(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of scalar trainable parameters.
    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter { name: p.name.clone(), value: p.value.cast(), trainable: p.trainable })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| Buffer { name: b.name.clone(), value: b.value.cast() })
                .collect(),
        }
    }

    /// Overwrite values from another store with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        let by_name: HashMap<&str, &Tensor<T>> = other
            .params
            .iter()
            .map(|p| (p.name.as_str(), &p.value))
            .chain(other.buffers.iter().map(|b| (b.name.as_str(), &b.value)))
            .collect();
        let slots = self
            .params
            .iter_mut()
            .map(|p| (&p.name, &mut p.value))
            .chain(self.buffers.iter_mut().map(|b| (&b.name, &mut b.value)));
        for (name, value) in slots {
            let src = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::Config(format!("missing tensor `{name}`")))?;
            if src.shape() != value.shape() {
                return Err(Error::ShapeMismatch { lhs: value.shape().to_vec(), rhs: src.shape().to_vec() });
            }
            *value = (*src).clone();
        }
        Ok(())
    }

    /// Put every parameter into `graph`; trainable ones track gradients.
    pub fn bind(&self, graph: &mut Graph<T>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| graph.leaf(p.value.clone(), p.trainable))
            .collect()
    }
}

/// Running-statistics update produced by a train-mode batchnorm.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub mean: BufferId,
    pub var: BufferId,
    pub batch_mean: Vec<f64>,
    /// Unbiased batch variance.
    pub batch_var: Vec<f64>,
    pub momentum: f64,
}

impl<T: Scalar> ParamStore<T> {
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn apply_stat_update(&mut self, u: &StatUpdate) {
        for (buf, batch) in [(u.mean, &u.batch_mean), (u.var, &u.batch_var)] {
            for (r, &b) in self.buffer_mut(buf).data_mut().iter_mut().zip(batch) {
                *r = T::of((1.0 - u.momentum) * r.as_f64() + u.momentum * b);
            }
        }
    }
}

/// Per-forward state: graph, bound parameter variables, mode and pending
/// batchnorm updates.
pub struct Ctx<'a, T: Scalar = f32> {
    pub graph: &'a mut Graph<T>,
    pub store: &'a ParamStore<T>,
    pub mode: BnMode,
    vars: Vec<Var>,
    updates: Vec<StatUpdate>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(graph: &'a mut Graph<T>, store: &'a ParamStore<T>, mode: BnMode) -> Self {
        let vars = store.bind(graph);
        Ctx { graph, store, mode, vars, updates: Vec::new() }
    }

    /// Use caller-supplied variables (one per parameter, in store order)
    /// instead of binding the stored values.
    pub fn with_vars(graph: &'a mut Graph<T>, store: &'a ParamStore<T>, vars: Vec<Var>, mode: BnMode) -> Result<Self> {
        if vars.len() != store.params().len() {
            return Err(Error::Config(format!(
                "expected {} parameter variables, got {}",
                store.params().len(),
                vars.len()
            )));
        }
        Ok(Ctx { graph, store, mode, vars, updates: Vec::new() })
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Graph variable of every parameter, in store order.
    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn push_update(&mut self, u: StatUpdate) {
        self.updates.push(u);
    }

    pub fn into_updates(self) -> (Vec<Var>, Vec<StatUpdate>) {
        (self.vars, self.updates)
    }
}

/// Adds freshly initialised parameters to a store.
pub struct ParamBuilder<'a> {
    pub store: &'a mut ParamStore<f32>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore<f32>, rng: &'a mut ChaCha8Rng) -> Self {
        ParamBuilder { store, rng }
    }

    /// Kaiming-uniform: `U(-b, b)` with `b = sqrt(6 / fan_in)`, i.e. variance `2 / fan_in`.
    pub fn kaiming_uniform(&mut self, name: &str, shape: Vec<usize>, fan_in: usize) -> Result<ParamId> {
        let bound = (6.0 / fan_in as f64).sqrt() as f32;
        let dist = Uniform::new_inclusive(-bound, bound);
        let value = Tensor::from_fn(shape, |_| dist.sample(self.rng));
        self.store.add_param(name, value, true)
    }

    pub fn constant(&mut self, name: &str, shape: Vec<usize>, value: f32) -> Result<ParamId> {
        self.store.add_param(name, Tensor::full(shape, value), true)
    }

    pub fn buffer(&mut self, name: &str, shape: Vec<usize>, value: f32) -> Result<BufferId> {
        self.store.add_buffer(name, Tensor::full(shape, value))
    }
}
