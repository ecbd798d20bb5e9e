//! Multi-head self-attention over a token sequence, with a residual connection.
//!
//! Heads share the `[E, E]` projection matrices: head `h` owns columns
//! `h * head_dim .. (h + 1) * head_dim` of `W_q`, `W_k` and `W_v`. No
//! positional encoding and no normalization are applied, so the block is
//! permutation-equivariant over tokens.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

use super::params::{Ctx, ParamBuilder, ParamId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MhaConfig {
    pub num_heads: usize,
    pub embed_dim: usize,
}

impl MhaConfig {
    pub fn new(num_heads: usize, embed_dim: usize) -> Result<Self> {
        let cfg = MhaConfig { num_heads, embed_dim };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// `3 E^2` for Q/K/V, `E^2 + E` for the output projection.
    pub fn param_count(&self) -> usize {
        4 * self.embed_dim * self.embed_dim + self.embed_dim
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub cfg: MhaConfig,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
}

impl MultiHeadAttention {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, cfg: MhaConfig) -> Result<Self> {
        cfg.validate()?;
        let e = cfg.embed_dim;
        Ok(MultiHeadAttention {
            cfg,
            w_q: b.kaiming_uniform(&format!("{name}.w_q"), vec![e, e], e)?,
            w_k: b.kaiming_uniform(&format!("{name}.w_k"), vec![e, e], e)?,
            w_v: b.kaiming_uniform(&format!("{name}.w_v"), vec![e, e], e)?,
            w_o: b.kaiming_uniform(&format!("{name}.w_o"), vec![e, e], e)?,
            b_o: b.constant(&format!("{name}.b_o"), vec![e], 0.0)?,
        })
    }

    /// `[N, T, E] -> [N, T, E]`.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        self.forward_with_weights(ctx, x).map(|(y, _)| y)
    }

    /// Also returns the attention weights `[N * heads, T, T]`.
    pub fn forward_with_weights<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<(Var, Var)> {
        let shape = ctx.graph.shape(x).to_vec();
        let (heads, hd, e) = (self.cfg.num_heads, self.cfg.head_dim(), self.cfg.embed_dim);
        if shape.len() != 3 || shape[2] != e {
            return Err(Error::ShapeMismatch { lhs: shape, rhs: vec![0, 0, e] });
        }
        let (n, t) = (shape[0], shape[1]);
        let [w_q, w_k, w_v, w_o, b_o] = [self.w_q, self.w_k, self.w_v, self.w_o, self.b_o].map(|p| ctx.var(p));
        let g = &mut *ctx.graph;
        // [N, T, E] -> [N * heads, ...] with the per-head axes ordered by `perm`.
        let mut split_heads = |proj: Var, perm: &[usize], tail: [usize; 2]| -> Result<Var> {
            let y = g.matmul(x, proj)?;
            let y = g.reshape(y, vec![n, t, heads, hd])?;
            let y = g.permute(y, perm)?;
            g.reshape(y, vec![n * heads, tail[0], tail[1]])
        };
        let q = split_heads(w_q, &[0, 2, 1, 3], [t, hd])?;
        let k_t = split_heads(w_k, &[0, 2, 3, 1], [hd, t])?;
        let v = split_heads(w_v, &[0, 2, 1, 3], [t, hd])?;
        let scores = g.matmul(q, k_t)?;
        let scores = g.scale(scores, T::of(1.0 / (hd as f64).sqrt()));
        let weights = g.softmax(scores, 2)?;
        let heads_out = g.matmul(weights, v)?;
        let merged = g.reshape(heads_out, vec![n, heads, t, hd])?;
        let merged = g.permute(merged, &[0, 2, 1, 3])?;
        let merged = g.reshape(merged, vec![n, t, e])?;
        let attended = g.linear(merged, w_o, Some(b_o))?;
        Ok((g.add(x, attended)?, weights))
    }
}
