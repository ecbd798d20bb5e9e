//! The 3D ResNet-18 classifier, with or without a multi-head attention block
//! after the last convolutional stage.

pub mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{
    BasicBlock, BatchNorm3d, BlockConfig, Conv3d, Ctx, Linear, MhaConfig, MultiHeadAttention, ParamBuilder,
    ParamStore, StatUpdate,
};
use crate::ops::conv::{conv_out_len, Conv3dSpec};
use crate::ops::elementwise::sigmoid;
use crate::ops::norm::BnMode;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Plain,
    WithMha,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Variant::Plain => "ResNet3D-18",
            Variant::WithMha => "ResNet3D-18 + MHA",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Plain => "plain",
            Variant::WithMha => "with_mha",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Variant::Plain),
            "with_mha" => Ok(Variant::WithMha),
            other => Err(Error::Config(format!("unknown model variant `{other}` (plain|with_mha)"))),
        }
    }
}

pub const STEM_KERNEL: [usize; 3] = [3, 7, 7];
pub const STEM_STRIDE: [usize; 3] = [1, 2, 2];
pub const STEM_PADDING: [usize; 3] = [1, 3, 3];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub in_channels: usize,
    /// Output channels of each of the four stages; the stem uses the first.
    pub stage_channels: [usize; 4],
    pub stage_strides: [usize; 4],
    pub blocks_per_stage: usize,
    pub mha_heads: usize,
}

impl ModelConfig {
    /// Standard R3D-18: 64-128-256-512 channels, two blocks per stage.
    pub fn r3d18(variant: Variant) -> Self {
        ModelConfig {
            variant,
            in_channels: 1,
            stage_channels: [64, 128, 256, 512],
            stage_strides: [1, 2, 2, 2],
            blocks_per_stage: 2,
            mha_heads: 4,
        }
    }

    /// Same topology with narrow stages, for tests and desk-scale runs.
    pub fn tiny(variant: Variant) -> Self {
        ModelConfig { stage_channels: [4, 8, 16, 32], ..Self::r3d18(variant) }
    }

    pub fn with_channels(variant: Variant, stage_channels: [usize; 4]) -> Self {
        ModelConfig { stage_channels, ..Self::r3d18(variant) }
    }

    pub fn embed_dim(&self) -> usize {
        self.stage_channels[3]
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.blocks_per_stage == 0 {
            return Err(Error::Config("in_channels and blocks_per_stage must be positive".into()));
        }
        for (&c, &s) in self.stage_channels.iter().zip(&self.stage_strides) {
            BlockConfig { in_channels: c, out_channels: c, stride: s }.validate()?;
        }
        if self.variant == Variant::WithMha {
            MhaConfig::new(self.mha_heads, self.embed_dim())?;
        }
        Ok(())
    }

    /// Spatial extent after the stem and after each stage, following the
    /// floor convolution formula.
    pub fn feature_extents(&self, input: [usize; 3]) -> Result<Vec<[usize; 3]>> {
        let too_small = || Error::InvalidGeometry(format!("input {input:?} is too small for the stem"));
        let mut cur = [0; 3];
        for a in 0..3 {
            cur[a] = conv_out_len(input[a], STEM_KERNEL[a], STEM_STRIDE[a], STEM_PADDING[a]).ok_or_else(too_small)?;
        }
        let mut out = vec![cur];
        for &s in &self.stage_strides {
            cur = cur.map(|len| conv_out_len(len, 3, s, 1).expect("3x3x3 with padding 1 always fits"));
            out.push(cur);
        }
        Ok(out)
    }
}

/// Output of a forward pass.
pub struct Forward {
    /// Logits `[N]`.
    pub logits: Var,
    /// Graph variable of every parameter, in store order.
    pub param_vars: Vec<Var>,
    /// Pending batchnorm running-stat updates (train mode only).
    pub updates: Vec<StatUpdate>,
}

#[derive(Clone, Debug)]
pub struct Model<T = f32> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    stem_conv: Conv3d,
    stem_bn: BatchNorm3d,
    stages: Vec<Vec<BasicBlock>>,
    mha: Option<MultiHeadAttention>,
    head: Linear,
}

impl Model<f32> {
    /// Fresh parameters, deterministic for a given seed.
    pub fn build(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let c0 = cfg.stage_channels[0];
        let stem_conv = Conv3d::new(
            &mut b,
            "stem.conv",
            cfg.in_channels,
            c0,
            STEM_KERNEL,
            Conv3dSpec::new(STEM_STRIDE, STEM_PADDING),
            false,
        )?;
        let stem_bn = BatchNorm3d::new(&mut b, "stem.bn", c0)?;
        let mut stages = Vec::new();
        let mut in_ch = c0;
        for (s, (&out_ch, &stride)) in cfg.stage_channels.iter().zip(&cfg.stage_strides).enumerate() {
            let mut blocks = Vec::new();
            for i in 0..cfg.blocks_per_stage {
                let bc = BlockConfig {
                    in_channels: in_ch,
                    out_channels: out_ch,
                    stride: if i == 0 { stride } else { 1 },
                };
                blocks.push(BasicBlock::new(&mut b, &format!("layer{}.{i}", s + 1), bc)?);
                in_ch = out_ch;
            }
            stages.push(blocks);
        }
        let mha = match cfg.variant {
            Variant::WithMha => Some(MultiHeadAttention::new(&mut b, "mha", MhaConfig::new(cfg.mha_heads, in_ch)?)?),
            Variant::Plain => None,
        };
        let head = Linear::new(&mut b, "fc", in_ch, 1)?;
        Ok(Model { cfg, store, stem_conv, stem_bn, stages, mha, head })
    }
}

impl<T: Scalar> Model<T> {
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            stem_conv: self.stem_conv.clone(),
            stem_bn: self.stem_bn.clone(),
            stages: self.stages.clone(),
            mha: self.mha.clone(),
            head: self.head.clone(),
        }
    }

    pub fn attention(&self) -> Option<&MultiHeadAttention> {
        self.mha.as_ref()
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    /// Logits `[N]` for a batch `[N, C, D, H, W]`.
    pub fn forward(&self, graph: &mut Graph<T>, batch: Tensor<T>, mode: BnMode) -> Result<Forward> {
        let mut ctx = Ctx::new(graph, &self.store, mode);
        let x = ctx.graph.input(batch);
        let logits = self.forward_ctx(&mut ctx, x)?;
        let (param_vars, updates) = ctx.into_updates();
        Ok(Forward { logits, param_vars, updates })
    }

    /// Forward pass on an already-bound context.
    pub fn forward_ctx(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let shape = ctx.graph.shape(x).to_vec();
        if shape.len() != 5 || shape[1] != self.cfg.in_channels {
            return Err(Error::ShapeMismatch { lhs: shape, rhs: vec![0, self.cfg.in_channels, 0, 0, 0] });
        }
        self.cfg.feature_extents([shape[2], shape[3], shape[4]])?;
        let n = shape[0];
        let h = self.stem_conv.forward(ctx, x)?;
        let h = self.stem_bn.forward(ctx, h)?;
        let mut h = ctx.graph.relu(h);
        for block in self.stages.iter().flatten() {
            h = block.forward(ctx, h)?;
        }
        if let Some(mha) = &self.mha {
            let fs = ctx.graph.shape(h).to_vec();
            let (c, d, hh, w) = (fs[1], fs[2], fs[3], fs[4]);
            let tokens = ctx.graph.permute(h, &[0, 2, 3, 4, 1])?;
            let tokens = ctx.graph.reshape(tokens, vec![n, d * hh * w, c])?;
            let attended = mha.forward(ctx, tokens)?;
            let grid = ctx.graph.reshape(attended, vec![n, d, hh, w, c])?;
            h = ctx.graph.permute(grid, &[0, 4, 1, 2, 3])?;
        }
        let pooled = ctx.graph.avgpool_global(h)?;
        let logits = self.head.forward(ctx, pooled)?;
        ctx.graph.reshape(logits, vec![n])
    }

    /// Eval-mode logits without recording gradients.
    pub fn logits(&self, batch: Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let out = self.forward(&mut g, batch, BnMode::Eval)?;
        Ok(g.value(out.logits).clone())
    }

    /// Eval-mode probabilities `sigmoid(logit)`.
    pub fn predict(&self, batch: Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.logits(batch)?.map(sigmoid))
    }

    pub fn apply_updates(&mut self, updates: &[StatUpdate]) {
        for u in updates {
            self.store.apply_stat_update(u);
        }
    }
}
