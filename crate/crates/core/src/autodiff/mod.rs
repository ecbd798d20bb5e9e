//! Reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its variables in creation
//! order, which is a topological order by construction. [`Graph::backward`]
//! walks that list once in reverse and accumulates gradients into a
//! [`GradMap`].

use crate::error::{Error, Result};
use crate::ops::conv::{conv3d, conv3d_backward, Conv3dSpec};
use crate::ops::elementwise::{binary, binary_backward, relu, relu_backward, BinaryOp};
use crate::ops::matmul::{matmul, matmul_backward};
use crate::ops::norm::{batchnorm, batchnorm_backward, BnMode, BnSaved};
use crate::ops::pool::{avgpool_global, avgpool_global_backward};
use crate::ops::shape::{concat, concat_backward, inverse_permutation, permute, slice, slice_backward};
use crate::ops::softmax::{softmax, softmax_backward};
use crate::optim::loss::{bce_with_logits, bce_with_logits_backward};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Binary { op: BinaryOp, a: Var, b: Var },
    Relu(Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Conv3d { input: Var, weight: Var, bias: Option<Var>, spec: Conv3dSpec },
    AvgPoolGlobal(Var),
    BatchNorm { input: Var, gamma: Var, beta: Var, saved: BnSaved<T> },
    Softmax { input: Var, axis: usize },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    BceWithLogits { logits: Var, targets: Tensor<T>, pos_weight: f64 },
    FaultyIdentity(Var),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation.
#[derive(Clone, Debug)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    kink_signature: u64,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to the graph's leaves.
#[derive(Clone, Debug)]
pub struct GradMap<T = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> GradMap<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grad_enabled: true, kink_signature: 0 }
    }

    /// A graph that records values only; nothing it produces requires a gradient.
    pub fn inference() -> Self {
        Graph { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of every relu activation pattern recorded so far. Two evaluations
    /// of the same function with equal signatures took the same linear piece.
    pub fn kink_signature(&self) -> u64 {
        self.kink_signature
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf tracked for gradients.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let value = binary(op, self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Binary { op, a, b }, &[a, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = relu(self.value(x));
        let mut h = self.kink_signature;
        for (i, v) in self.value(x).data().iter().enumerate() {
            if *v > T::zero() {
                h = (h ^ (i as u64).wrapping_add(0x9e37_79b9_7f4a_7c15)).wrapping_mul(0x1000_0000_01b3);
            }
        }
        self.kink_signature = h.rotate_left(17) ^ self.nodes.len() as u64;
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale(x, factor), &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `x . weight + bias` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: Conv3dSpec) -> Result<Var> {
        let value = conv3d(self.value(input), self.value(weight), bias.map(|b| self.value(b)), spec)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        Ok(self.push(value, Op::Conv3d { input, weight, bias, spec }, &deps))
    }

    pub fn avgpool_global(&mut self, x: Var) -> Result<Var> {
        let value = avgpool_global(self.value(x))?;
        Ok(self.push(value, Op::AvgPoolGlobal(x), &[x]))
    }

    /// Returns the output and, in train mode, the per-channel batch mean and
    /// biased variance.
    #[allow(clippy::type_complexity)]
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&Tensor<T>, &Tensor<T>)>,
        mode: BnMode,
        eps: f64,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let out = batchnorm(self.value(input), self.value(gamma), self.value(beta), running, mode, eps)?;
        let var = self.push(
            out.output,
            Op::BatchNorm { input, gamma, beta, saved: out.saved },
            &[input, gamma, beta],
        );
        Ok((var, out.batch_stats))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = softmax(self.value(x), axis)?;
        Ok(self.push(value, Op::Softmax { input: x, axis }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let value = permute(self.value(x), perm)?;
        Ok(self.push(value, Op::Permute(x, perm.to_vec()), &[x]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let parts: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let value = concat(&parts, axis)?;
        Ok(self.push(value, Op::Concat { inputs: inputs.to_vec(), axis }, inputs))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = slice(self.value(x), axis, start, len)?;
        Ok(self.push(value, Op::Slice { input: x, axis, start }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(T::of(t.sum().as_f64() / t.numel() as f64));
        self.push(value, Op::Mean(x), &[x])
    }

    /// Mean binary cross-entropy of `logits` against constant `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Tensor<T>, pos_weight: f64) -> Result<Var> {
        let value = Tensor::scalar(bce_with_logits(self.value(logits), &targets, pos_weight)?);
        Ok(self.push(value, Op::BceWithLogits { logits, targets, pos_weight }, &[logits]))
    }

    /// Identity whose backward pass doubles the gradient. Exists only as a
    /// negative control for gradient checking.
    #[doc(hidden)]
    pub fn faulty_identity(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::FaultyIdentity(x), &[x])
    }

    /// Gradients of the scalar `loss` with respect to every leaf that requires one.
    pub fn backward(&self, loss: Var) -> Result<GradMap<T>> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(loss_value.shape().to_vec()));
        for i in (0..=loss.0).rev() {
            let Some(grad) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(grad);
                continue;
            }
            for (var, g) in self.local_grads(node, &grad)? {
                if self.nodes[var.0].requires_grad {
                    accumulate(&mut grads[var.0], g);
                }
            }
        }
        Ok(GradMap { grads })
    }

    fn local_grads(&self, node: &Node<T>, grad: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let v = |var: Var| self.value(var);
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Binary { op, a, b } => {
                let (ga, gb) = binary_backward(*op, v(*a), v(*b), grad)?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Relu(x) => vec![(*x, relu_backward(v(*x), grad))],
            Op::Scale(x, f) => vec![(*x, grad.map(|g| g * *f))],
            Op::MatMul(a, b) => {
                let (ga, gb) = matmul_backward(v(*a), v(*b), grad)?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Conv3d { input, weight, bias, spec } => {
                let g = conv3d_backward(v(*input), v(*weight), *spec, grad)?;
                let mut out = vec![(*input, g.input), (*weight, g.weight)];
                if let Some(b) = bias {
                    out.push((*b, g.bias));
                }
                out
            }
            Op::AvgPoolGlobal(x) => vec![(*x, avgpool_global_backward(v(*x).shape(), grad))],
            Op::BatchNorm { input, gamma, beta, saved } => {
                let g = batchnorm_backward(saved, v(*gamma), grad)?;
                vec![(*input, g.input), (*gamma, g.gamma), (*beta, g.beta)]
            }
            Op::Softmax { input, axis } => {
                vec![(*input, softmax_backward(&node.value, grad, *axis)?)]
            }
            Op::Reshape(x) => vec![(*x, grad.clone().reshape(v(*x).shape().to_vec())?)],
            Op::Permute(x, perm) => vec![(*x, permute(grad, &inverse_permutation(perm))?)],
            Op::Concat { inputs, axis } => {
                let lens: Vec<usize> = inputs.iter().map(|&i| v(i).shape()[*axis]).collect();
                inputs.iter().copied().zip(concat_backward(grad, *axis, &lens)?).collect()
            }
            Op::Slice { input, axis, start } => {
                vec![(*input, slice_backward(v(*input).shape(), grad, *axis, *start)?)]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(v(*x).shape().to_vec(), grad.item()))],
            Op::Mean(x) => {
                let n = T::of(v(*x).numel() as f64);
                vec![(*x, Tensor::full(v(*x).shape().to_vec(), grad.item() / n))]
            }
            Op::BceWithLogits { logits, targets, pos_weight } => {
                vec![(*logits, bce_with_logits_backward(v(*logits), targets, *pos_weight, grad.item())?)]
            }
            Op::FaultyIdentity(x) => vec![(*x, grad.map(|g| g + g))],
        })
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn square_via_reused_operand() {
        let mut g = Graph::new();
        let x = g.param(t(&[1], &[3.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn relu_subgradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[-1.0, 2.0, 0.0]));
        let r = g.relu(x);
        let loss = g.sum(r);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn inputs_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let c = g.input(t(&[2], &[5.0, 7.0]));
        let p = g.mul(x, c).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[5.0, 7.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn inference_graph_tracks_nothing() {
        let mut g = Graph::<f32>::inference();
        let x = g.param(Tensor::ones(vec![2]));
        let y = g.relu(x);
        assert!(!g.requires_grad(y));
    }

    #[test]
    fn kink_signature_follows_activation_pattern() {
        let sig = |vals: &[f64]| {
            let mut g = Graph::new();
            let x = g.param(t(&[vals.len()], vals));
            g.relu(x);
            g.kink_signature()
        };
        assert_eq!(sig(&[1.0, -2.0]), sig(&[3.0, -0.5]));
        assert_ne!(sig(&[1.0, -2.0]), sig(&[-1.0, -2.0]));
    }
}
