//! Registered finite-difference checks for every differentiable kernel and
//! layer, at sizes small enough to run in seconds.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Variant};
use crate::nn::{BasicBlock, BatchNorm3d, BlockConfig, Ctx, Linear, MhaConfig, MultiHeadAttention, ParamBuilder, ParamStore};
use crate::ops::conv::Conv3dSpec;
use crate::ops::norm::BnMode;
use crate::tensor::Tensor;

use super::{check_gradients, CheckOptions, CheckReport};

/// Scope name of the negative-control fixture; never part of `all`.
pub const CORRUPTED_FIXTURE: &str = "fixture:corrupted";

#[derive(Clone, Copy)]
pub struct GradCheckCase {
    pub name: &'static str,
    run: fn(&CheckOptions) -> Result<CheckReport>,
}

impl GradCheckCase {
    pub fn run(&self, opts: &CheckOptions) -> Result<CheckReport> {
        (self.run)(opts)
    }
}

impl std::fmt::Debug for GradCheckCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GradCheckCase").field("name", &self.name).finish()
    }
}

pub fn registry() -> Vec<GradCheckCase> {
    macro_rules! case {
        ($name:literal, $f:ident) => {
            GradCheckCase { name: $name, run: $f }
        };
    }
    vec![
        case!("conv3d", conv3d),
        case!("conv3d_strided", conv3d_strided),
        case!("batchnorm_train", batchnorm_train),
        case!("batchnorm_eval", batchnorm_eval),
        case!("softmax", softmax),
        case!("matmul", matmul),
        case!("linear", linear),
        case!("add_broadcast", add_broadcast),
        case!("mul_broadcast", mul_broadcast),
        case!("relu", relu),
        case!("avgpool_global", avgpool),
        case!("permute_reshape", permute_reshape),
        case!("concat_slice", concat_slice),
        case!("mha", mha),
        case!("basic_block", basic_block),
        case!("basic_block_projection", basic_block_projection),
        case!("bce_with_logits", bce),
        case!("model_tiny_plain", model_plain),
        case!("model_tiny_mha", model_mha),
    ]
}

/// `all`, a registered case name, or the corrupted-backward fixture.
pub fn run_suite(scope: &str, opts: &CheckOptions) -> Result<Vec<CheckReport>> {
    if scope == CORRUPTED_FIXTURE {
        return Ok(vec![corrupted(opts)?]);
    }
    let cases: Vec<GradCheckCase> = registry().into_iter().filter(|c| scope == "all" || c.name == scope).collect();
    if cases.is_empty() {
        let names: Vec<&str> = registry().iter().map(|c| c.name).collect();
        return Err(Error::Config(format!(
            "unknown gradcheck scope `{scope}`; expected all, {CORRUPTED_FIXTURE} or one of {}",
            names.join(", ")
        )));
    }
    cases.iter().map(|c| c.run(opts)).collect()
}

fn rng(opts: &CheckOptions, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(opts.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let u = Uniform::new(-1.0, 1.0);
    Tensor::from_fn(shape.to_vec(), |_| u.sample(rng))
}

/// `sum(out * w)` for a fixed random `w`, so every output coordinate
/// contributes a distinct weight.
fn weighted_sum(g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.input(weights.clone());
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn conv3d(opts: &CheckOptions) -> Result<CheckReport> {
    let mut r = rng(opts, 1);
    let inputs = [random(&mut r, &[2, 2, 3, 4, 4]), random(&mut r, &[3, 2, 2, 3, 3]), random(&mut r, &[3])];
    let w = random(&mut r, &[2, 3, 2, 2, 2]);
    check_gradients("conv3d", &inputs, opts, |g, v| {
        let y = g.conv3d(v[0], v[1], Some(v[2]), Conv3dSpec::unit())?;
        weighted_sum(g, y, &w)
    })
}

fn conv3d_strided(opts: &CheckOptions) -> Result<CheckReport> {
    let mut r = rng(opts, 2);
    let inputs = [random(&mut r, &[1, 2, 5, 6, 7]), random(&mut r, &[2, 2, 3, 3, 3])];
    let spec = Conv3dSpec::new([1, 2, 2], [1, 1, 1]);
    let w = random(&mut r, &[1, 2, 5, 3, 4]);
    check_gradients("conv3d_strided", &inputs, opts, |g, v| {
        let y = g.conv3d(v[0], v[1], None, spec)?;
        weighted_sum(g, y, &w)
    })
}

fn bn_store(opts: &CheckOptions, channels: usize) -> Result<(ParamStore<f64>, BatchNorm3d)> {
    let mut store = ParamStore::new();
    let mut r = rng(opts, 3);
    let bn = BatchNorm3d::new(&mut ParamBuilder::new(&mut store, &mut r), "bn", channels)?;
    let mut store = store.cast::<f64>();
    for (i, b) in store.buffers_mut().iter_mut().enumerate() {
        b.value = b.value.map(|x| x + 0.3 * (i as f64 + 1.0));
    }
    Ok((store, bn))
}

fn batchnorm_case(opts: &CheckOptions, name: &str, mode: BnMode) -> Result<CheckReport> {
    let (store, bn) = bn_store(opts, 3)?;
    let mut r = rng(opts, 4);
    let x = random(&mut r, &[2, 3, 2, 2, 3]);
    let gamma = Tensor::from_fn(vec![3], |i| 0.5 + i as f64 * 0.25);
    let beta = random(&mut r, &[3]);
    let w = random(&mut r, &[2, 3, 2, 2, 3]);
    check_gradients(name, &[x, gamma, beta], opts, |g, v| {
        let mut ctx = Ctx::with_vars(g, &store, v[1..].to_vec(), mode)?;
        let y = bn.forward(&mut ctx, v[0])?;
        weighted_sum(ctx.graph, y, &w)
    })
}

fn batchnorm_train(opts: &CheckOptions) -> Result<CheckReport> {
    batchnorm_case(opts, "batchnorm_train", BnMode::Train)
}

fn batchnorm_eval(opts: &CheckOptions) -> Result<CheckReport> {
    batchnorm_case(opts, "batchnorm_eval", BnMode::Eval)
}

fn softmax(opts: &CheckOptions) -> Result<CheckReport> {
    let mut r = rng(opts, 5);
    let x = random(&mut r, &[3, 4, 5]).map(|v| 3.0 * v);
    let w = random(&mut r, &[3, 4, 5]);
    check_gradients("softmax", &[x], opts, |g, v| {
        let a = g.softmax(v[0], 2)?;
        let b = g.softmax(a, 1)?;
        weighted_sum(g, b, &w)
    })
}

fn matmul(opts: &CheckOptions) -> Result<CheckReport> {
    let mut r = rng(opts, 6);
    let inputs = [random(&mut r, &[2, 3, 4]), random(&mut r, &[2, 4, 5]), random(&mut r, &[5, 2])];
    let w = random(&mut r, &[2, 3, 2]);
    check_gradients("matmul", &inputs, opts, |g, v| {
        let ab = g.matmul(v[0], v[1])?;
        let abc = g.matmul(ab, v[2])?;
        weighted_sum(g, abc, &w)
    })
}

fn linear(opts: &CheckOptions) -> Result<CheckReport> {
    let mut store = ParamStore::new();
    let mut r = rng(opts, 7);
    let lin = Linear::new(&mut ParamBuilder::new(&mut store, &mut r), "fc", 4, 3)?;
    let store = store.cast::<f64>();
    let mut inputs = vec![random(&mut r, &[5, 4])];
    inputs.extend(store.params().iter().map(|p| p.value.map(|x| x + 0.1)));
    let w = random(&mut r, &[5, 3]);
    check_gradients("linear", &inputs, opts, |g, v| {
        let mut ctx = Ctx::with_vars(g, &store, v[1..].to_vec(), BnMode::Train)?;
        let y = lin.forward(&mut ctx, v[0])?;
        weighted_sum(ctx.graph, y, &w)
    })
}

fn add_broadcast(opts: &CheckOptions) -> Result<CheckReport> {
    let mut r = rng(opts, 8);
    let inputs = [random(&mut r, &[2, 3, 4]), random(&mut r, &[3, 1]), random(&mut r, &[4])];
    let w = random(&mut r, &[2, 3, 4]);
    check_gradients("add_broadcast", &inputs, opts, |g, v| {
        let a = g.add(v[0], v[1])?;
        let b = g.add(a, v[2])?;
        weighted_sum(g, b, &w)
    })
}

fn mul_broadcast(opts: &CheckOptions) -> Result<CheckReport> {
    let mut r = rng(opts, 9);
    let inputs = [random(&mut r, &[2, 3, 4]), random(&mut r, &[2, 1, 4])];
    let w = random(&mut r, &[2, 3, 4]);
    check_gradients("mul_broadcast", &inputs, opts, |g, v| {
        let a = g.mul(v[0], v[1])?;
        let s = g.scale(a, 1.5);
        weighted_sum(g, s, &w)
    })
}

fn relu(opts: &CheckOptions) -> Result<CheckReport> {
    let mut r = rng(opts, 10);
    let x = random(&mut r, &[4, 6]);
    let w = random(&mut r, &[4, 6]);
    check_gradients("relu", &[x], opts, |g, v| {
        let y = g.relu(v[0]);
        weighted_sum(g, y, &w)
    })
}

fn avgpool(opts: &CheckOptions) -> Result<CheckReport> {
    let mut r = rng(opts, 11);
    let x = random(&mut r, &[2, 3, 2, 3, 2]);
    let w = random(&mut r, &[2, 3]);
    check_gradients("avgpool_global", &[x], opts, |g, v| {
        let y = g.avgpool_global(v[0])?;
        weighted_sum(g, y, &w)
    })
}

fn permute_reshape(opts: &CheckOptions) -> Result<CheckReport> {
    let mut r = rng(opts, 12);
    let x = random(&mut r, &[2, 3, 2, 2, 1]);
    let w = random(&mut r, &[2, 4, 3]);
    check_gradients("permute_reshape", &[x], opts, |g, v| {
        let p = g.permute(v[0], &[0, 2, 3, 4, 1])?;
        let t = g.reshape(p, vec![2, 4, 3])?;
        let sq = g.mul(t, t)?;
        weighted_sum(g, sq, &w)
    })
}

fn concat_slice(opts: &CheckOptions) -> Result<CheckReport> {
    let mut r = rng(opts, 13);
    let inputs = [random(&mut r, &[2, 3, 4]), random(&mut r, &[2, 2, 4])];
    let w = random(&mut r, &[2, 3, 4]);
    check_gradients("concat_slice", &inputs, opts, |g, v| {
        let c = g.concat(&[v[0], v[1]], 1)?;
        let s = g.slice(c, 1, 1, 3)?;
        let sq = g.mul(s, s)?;
        weighted_sum(g, sq, &w)
    })
}

fn mha(opts: &CheckOptions) -> Result<CheckReport> {
    let mut store = ParamStore::new();
    let mut r = rng(opts, 14);
    let layer = MultiHeadAttention::new(&mut ParamBuilder::new(&mut store, &mut r), "mha", MhaConfig::new(2, 4)?)?;
    let store = store.cast::<f64>();
    let mut inputs = vec![random(&mut r, &[2, 3, 4])];
    inputs.extend(store.params().iter().map(|p| p.value.map(|x| x + 0.05)));
    let w = random(&mut r, &[2, 3, 4]);
    check_gradients("mha", &inputs, opts, |g, v| {
        let mut ctx = Ctx::with_vars(g, &store, v[1..].to_vec(), BnMode::Train)?;
        let y = layer.forward(&mut ctx, v[0])?;
        weighted_sum(ctx.graph, y, &w)
    })
}

fn block_case(opts: &CheckOptions, name: &str, cfg: BlockConfig, input: [usize; 5]) -> Result<CheckReport> {
    let mut store = ParamStore::new();
    let mut r = rng(opts, 15);
    let block = BasicBlock::new(&mut ParamBuilder::new(&mut store, &mut r), "block", cfg)?;
    let store = store.cast::<f64>();
    let mut inputs = vec![random(&mut r, &input)];
    inputs.extend(store.params().iter().map(|p| p.value.clone()));
    let mut probe = Graph::inference();
    let mut ctx = Ctx::new(&mut probe, &store, BnMode::Train);
    let x = ctx.graph.input(inputs[0].clone());
    let y = block.forward(&mut ctx, x)?;
    let w = random(&mut r, ctx.graph.shape(y));
    check_gradients(name, &inputs, opts, |g, v| {
        let mut ctx = Ctx::with_vars(g, &store, v[1..].to_vec(), BnMode::Train)?;
        let y = block.forward(&mut ctx, v[0])?;
        weighted_sum(ctx.graph, y, &w)
    })
}

fn basic_block(opts: &CheckOptions) -> Result<CheckReport> {
    let cfg = BlockConfig { in_channels: 2, out_channels: 2, stride: 1 };
    block_case(opts, "basic_block", cfg, [2, 2, 3, 3, 3])
}

fn basic_block_projection(opts: &CheckOptions) -> Result<CheckReport> {
    let cfg = BlockConfig { in_channels: 2, out_channels: 3, stride: 2 };
    block_case(opts, "basic_block_projection", cfg, [2, 2, 4, 4, 4])
}

fn bce(opts: &CheckOptions) -> Result<CheckReport> {
    let mut r = rng(opts, 16);
    let logits = random(&mut r, &[6]).map(|v| 4.0 * v);
    let targets = Tensor::from_fn(vec![6], |i| (i % 2) as f64);
    check_gradients("bce_with_logits", &[logits], opts, |g, v| {
        let plain = g.bce_with_logits(v[0], targets.clone(), 1.0)?;
        let weighted = g.bce_with_logits(v[0], targets.clone(), 2.5)?;
        g.add(plain, weighted)
    })
}

/// Channels `[4, 8, 16, 32]` on `2 x 1 x 8 x 16 x 16` inputs.
fn model_case(opts: &CheckOptions, name: &str, variant: Variant) -> Result<CheckReport> {
    let model = Model::build(ModelConfig::with_channels(variant, [4, 8, 16, 32]), opts.seed)?.cast::<f64>();
    let mut r = rng(opts, 17);
    let mut inputs = vec![random(&mut r, &[2, 1, 8, 16, 16])];
    inputs.extend(model.store.params().iter().map(|p| p.value.clone()));
    let targets = Tensor::from_f64(vec![2], &[0.0, 1.0])?;
    let opts = CheckOptions { max_coords: opts.max_coords.min(6), ..opts.clone() };
    check_gradients(name, &inputs, &opts, |g, v| {
        let mut ctx = Ctx::with_vars(g, &model.store, v[1..].to_vec(), BnMode::Train)?;
        let logits = model.forward_ctx(&mut ctx, v[0])?;
        ctx.graph.bce_with_logits(logits, targets.clone(), 1.0)
    })
}

fn model_plain(opts: &CheckOptions) -> Result<CheckReport> {
    model_case(opts, "model_tiny_plain", Variant::Plain)
}

fn model_mha(opts: &CheckOptions) -> Result<CheckReport> {
    model_case(opts, "model_tiny_mha", Variant::WithMha)
}

/// Negative control: an identity whose backward doubles the gradient.
fn corrupted(opts: &CheckOptions) -> Result<CheckReport> {
    let mut r = rng(opts, 99);
    let x = random(&mut r, &[3, 3]);
    let w = random(&mut r, &[3, 3]);
    check_gradients(CORRUPTED_FIXTURE, &[x], opts, |g, v| {
        let y = g.faulty_identity(v[0]);
        weighted_sum(g, y, &w)
    })
}
