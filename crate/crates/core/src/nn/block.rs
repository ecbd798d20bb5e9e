//! Residual basic block: two 3x3x3 convolutions with batchnorm and a shortcut.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::ops::conv::Conv3dSpec;
use crate::tensor::Scalar;

use super::layers::{BatchNorm3d, Conv3d};
use super::params::{Ctx, ParamBuilder};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Stride of the first convolution along all three axes.
    pub stride: usize,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.stride, 1 | 2) {
            return Err(Error::Config(format!("block stride must be 1 or 2, got {}", self.stride)));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("block channels must be positive".into()));
        }
        Ok(())
    }

    pub fn needs_projection(&self) -> bool {
        self.stride != 1 || self.in_channels != self.out_channels
    }
}

#[derive(Clone, Debug)]
pub struct BasicBlock {
    pub cfg: BlockConfig,
    pub conv1: Conv3d,
    pub bn1: BatchNorm3d,
    pub conv2: Conv3d,
    pub bn2: BatchNorm3d,
    pub shortcut: Option<(Conv3d, BatchNorm3d)>,
}

impl BasicBlock {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, cfg: BlockConfig) -> Result<Self> {
        cfg.validate()?;
        let (cin, cout, s) = (cfg.in_channels, cfg.out_channels, cfg.stride);
        let conv1 = Conv3d::new(b, &format!("{name}.conv1"), cin, cout, [3; 3], Conv3dSpec::new([s; 3], [1; 3]), false)?;
        let bn1 = BatchNorm3d::new(b, &format!("{name}.bn1"), cout)?;
        let conv2 = Conv3d::new(b, &format!("{name}.conv2"), cout, cout, [3; 3], Conv3dSpec::new([1; 3], [1; 3]), false)?;
        let bn2 = BatchNorm3d::new(b, &format!("{name}.bn2"), cout)?;
        let shortcut = if cfg.needs_projection() {
            let conv = Conv3d::new(
                b,
                &format!("{name}.shortcut.conv"),
                cin,
                cout,
                [1; 3],
                Conv3dSpec::new([s; 3], [0; 3]),
                false,
            )?;
            Some((conv, BatchNorm3d::new(b, &format!("{name}.shortcut.bn"), cout)?))
        } else {
            None
        };
        Ok(BasicBlock { cfg, conv1, bn1, conv2, bn2, shortcut })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let shape = ctx.graph.shape(x);
        if shape.len() != 5 || shape[1] != self.cfg.in_channels {
            return Err(Error::ShapeMismatch {
                lhs: shape.to_vec(),
                rhs: vec![0, self.cfg.in_channels, 0, 0, 0],
            });
        }
        let h = self.conv1.forward(ctx, x)?;
        let h = self.bn1.forward(ctx, h)?;
        let h = ctx.graph.relu(h);
        let h = self.conv2.forward(ctx, h)?;
        let h = self.bn2.forward(ctx, h)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(ctx, x)?;
                bn.forward(ctx, s)?
            }
            None => x,
        };
        let sum = ctx.graph.add(h, skip)?;
        Ok(ctx.graph.relu(sum))
    }
}
