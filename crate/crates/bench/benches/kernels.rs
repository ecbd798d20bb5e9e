use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use volnet_core::autodiff::Graph;
use volnet_core::data::Batch;
use volnet_core::nn::{Ctx, MhaConfig, MultiHeadAttention, ParamBuilder, ParamStore};
use volnet_core::ops::{conv3d, Conv3dSpec};
use volnet_core::{BnMode, Hyperparams, Model, ModelConfig, Tensor, Trainer, Variant};

fn random(seed: u64, shape: &[usize]) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = Uniform::new(-1.0f32, 1.0);
    Tensor::from_fn(shape.to_vec(), |_| u.sample(&mut rng))
}

fn conv(c: &mut Criterion) {
    let x = random(0, &[4, 16, 16, 32, 32]);
    let w = random(1, &[16, 16, 3, 3, 3]);
    c.bench_function("conv3d 4x16x16x32x32 k3", |b| {
        b.iter(|| conv3d(black_box(&x), black_box(&w), None, Conv3dSpec::new([1; 3], [1; 3])).unwrap())
    });
}

fn attention(c: &mut Criterion) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let layer =
        MultiHeadAttention::new(&mut ParamBuilder::new(&mut store, &mut rng), "mha", MhaConfig::new(4, 512).unwrap())
            .unwrap();
    let x = random(3, &[4, 343, 512]);
    c.bench_function("mha 4x343x512 forward", |b| {
        b.iter(|| {
            let mut g = Graph::inference();
            let mut ctx = Ctx::new(&mut g, &store, BnMode::Eval);
            let xv = ctx.graph.input(black_box(x.clone()));
            layer.forward(&mut ctx, xv).unwrap()
        })
    });
}

fn train_step(c: &mut Criterion) {
    let model = Model::build(ModelConfig::tiny(Variant::WithMha), 0).unwrap();
    let mut trainer = Trainer::new(model, Hyperparams::default(), 0).unwrap();
    let batch = Batch {
        ids: (0..4).map(|i| format!("r{i}")).collect(),
        inputs: random(4, &[4, 1, 16, 32, 32]),
        labels: vec![0, 1, 0, 1],
    };
    let mut group = c.benchmark_group("train");
    group.sample_size(20);
    group.bench_function("tiny step batch 4", |b| b.iter(|| trainer.train_step(black_box(&batch)).unwrap()));
    group.finish();
}

criterion_group!(benches, conv, attention, train_step);
criterion_main!(benches);
