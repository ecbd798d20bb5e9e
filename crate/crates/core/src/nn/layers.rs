use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::ops::conv::Conv3dSpec;
use crate::ops::norm::BnMode;
use crate::tensor::Scalar;

use super::params::{BufferId, Ctx, ParamBuilder, ParamId, StatUpdate};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv3dSpec,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut ParamBuilder<'_>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        spec: Conv3dSpec,
        with_bias: bool,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel.iter().product::<usize>();
        let weight = b.kaiming_uniform(
            &format!("{name}.weight"),
            vec![out_channels, in_channels, kernel[0], kernel[1], kernel[2]],
            fan_in,
        )?;
        let bias = if with_bias {
            Some(b.constant(&format!("{name}.bias"), vec![out_channels], 0.0)?)
        } else {
            None
        };
        Ok(Conv3d { weight, bias, spec })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.var(self.weight), self.bias.map(|b| ctx.var(b)));
        ctx.graph.conv3d(x, w, b, self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm3d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm3d {
    /// gamma = 1, beta = 0, running mean 0 and running variance 1.
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm3d {
            gamma: b.constant(&format!("{name}.gamma"), vec![channels], 1.0)?,
            beta: b.constant(&format!("{name}.beta"), vec![channels], 0.0)?,
            running_mean: b.buffer(&format!("{name}.running_mean"), vec![channels], 0.0)?,
            running_var: b.buffer(&format!("{name}.running_var"), vec![channels], 1.0)?,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        })
    }

    /// Train mode normalizes with batch statistics and queues a running-stat
    /// update (unbiased variance); eval mode uses the running statistics.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (ctx.var(self.gamma), ctx.var(self.beta));
        let running = match ctx.mode {
            BnMode::Eval => Some((ctx.store.buffer(self.running_mean), ctx.store.buffer(self.running_var))),
            BnMode::Train => None,
        };
        let shape = ctx.graph.shape(x).to_vec();
        let (y, stats) = ctx.graph.batchnorm(x, gamma, beta, running, ctx.mode, self.eps)?;
        if let Some((mean, var)) = stats {
            let count = (shape.iter().product::<usize>() / shape[1]) as f64;
            let correction = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            ctx.push_update(StatUpdate {
                mean: self.running_mean,
                var: self.running_var,
                batch_mean: mean,
                batch_var: var.into_iter().map(|v| v * correction).collect(),
                momentum: self.momentum,
            });
        }
        Ok(y)
    }
}

/// `y = x . W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, in_features: usize, out_features: usize) -> Result<Self> {
        Ok(Linear {
            weight: b.kaiming_uniform(&format!("{name}.weight"), vec![in_features, out_features], in_features)?,
            bias: b.constant(&format!("{name}.bias"), vec![out_features], 0.0)?,
            in_features,
            out_features,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let last = *ctx.graph.shape(x).last().unwrap_or(&0);
        if last != self.in_features {
            return Err(Error::ShapeMismatch {
                lhs: ctx.graph.shape(x).to_vec(),
                rhs: vec![self.in_features, self.out_features],
            });
        }
        let (w, b) = (ctx.var(self.weight), ctx.var(self.bias));
        ctx.graph.linear(x, w, Some(b))
    }
}
