use std::path::Path;

use proptest::prelude::*;
use volnet_core::metrics::{confusion, macro_f1, Confusion};
use volnet_core::ops::softmax;
use volnet_core::optim::{bce_with_logits, bce_with_logits_backward};
use volnet_core::{Checkpoint, Model, ModelConfig, Tensor, Variant};
use volnet_testkit as oracle;

#[test]
fn bce_is_finite_over_wide_logits() {
    let logits: Vec<f32> = (0..=2000).map(|i| -1e4 + i as f32 * 10.0).collect();
    let n = logits.len();
    let z = Tensor::new(vec![n], logits).unwrap();
    for y in [0.0f32, 1.0] {
        let t = Tensor::full(vec![n], y);
        for pw in [1.0, 3.0] {
            assert!(bce_with_logits(&z, &t, pw).unwrap().is_finite());
            assert!(bce_with_logits_backward(&z, &t, pw, 1.0).unwrap().is_finite());
        }
    }
}

#[test]
fn softmax_is_finite_over_wide_inputs() {
    let x = Tensor::from_fn(vec![4, 501], |i| -1e4 + (i % 501) as f32 * 40.0 * (1 + i / 501) as f32 % 2e4);
    let y = softmax(&x, 1).unwrap();
    assert!(y.is_finite());
    for row in y.data().chunks(501) {
        assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-5);
    }
    let extremes = Tensor::new(vec![1, 3], vec![-1e4f32, 1e4, 1e4]).unwrap();
    assert_eq!(softmax(&extremes, 1).unwrap().data(), &[0.0, 0.5, 0.5]);
}

proptest! {
    #[test]
    fn bce_matches_high_precision_oracle(z in prop::collection::vec(-40.0f64..40.0, 1..16), pw in 0.5f64..4.0, seed in any::<u64>()) {
        let y: Vec<f64> = (0..z.len()).map(|i| ((seed >> (i % 64)) & 1) as f64).collect();
        let got = bce_with_logits(
            &Tensor::<f64>::new(vec![z.len()], z.clone()).unwrap(),
            &Tensor::new(vec![z.len()], y.clone()).unwrap(),
            pw,
        ).unwrap();
        prop_assert!((got - oracle::bce_with_logits(&z, &y, pw)).abs() < 1e-9);
    }

    #[test]
    fn confusion_matches_record_loop(probs in prop::collection::vec(0.0f64..=1.0, 1..60), seed in any::<u64>(), th in 0.05f64..0.95) {
        let labels: Vec<u8> = (0..probs.len()).map(|i| ((seed.rotate_left(i as u32 * 7)) & 1) as u8).collect();
        let c = confusion(&probs, &labels, th).unwrap();
        let mut expect = Confusion::default();
        for (p, l) in probs.iter().zip(&labels) {
            let pred = *p >= th;
            match (pred, *l == 1) {
                (true, true) => expect.tp += 1,
                (true, false) => expect.fp += 1,
                (false, true) => expect.fn_ += 1,
                (false, false) => expect.tn += 1,
            }
        }
        prop_assert_eq!(c, expect);
        prop_assert_eq!(c.total(), probs.len() as u64);
    }

    #[test]
    fn macro_f1_is_relabeling_symmetric(tp in 0u64..50, fp in 0u64..50, fn_ in 0u64..50, tn in 0u64..50) {
        let c = Confusion { tp, fp, fn_, tn };
        let (a, r) = macro_f1(c);
        let (b, _) = macro_f1(c.relabeled());
        prop_assert!((a - b).abs() < 1e-12);
        for v in [r.recall_pos, r.precision_pos, r.f1_pos, r.recall_neg, r.precision_neg, r.f1_neg, r.macro_f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn macro_f1_fixture() {
    let (m, _) = macro_f1(Confusion { tp: 3, fp: 1, fn_: 1, tn: 5 });
    assert!((m - 0.791667).abs() < 1e-6);
}

#[test]
fn parameter_counts_match_closed_form() {
    for variant in [Variant::Plain, Variant::WithMha] {
        for cfg in [ModelConfig::r3d18(variant), ModelConfig::tiny(variant)] {
            let model = Model::build(cfg.clone(), 0).unwrap();
            let expect = oracle::r3d18_param_count(
                cfg.in_channels,
                cfg.stage_channels,
                cfg.stage_strides,
                cfg.blocks_per_stage,
                variant == Variant::WithMha,
            );
            assert_eq!(model.store.num_trainable(), expect, "{variant} {:?}", cfg.stage_channels);
        }
    }
    let mha = Model::build(ModelConfig::r3d18(Variant::WithMha), 0).unwrap().store.num_trainable()
        - Model::build(ModelConfig::r3d18(Variant::Plain), 0).unwrap().store.num_trainable();
    assert_eq!(mha, 4 * 512 * 512 + 512);
}

#[test]
fn checkpoint_round_trip_is_bit_exact_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.vnck");
    let model = Model::build(ModelConfig::tiny(Variant::WithMha), 9).unwrap();
    let ck = Checkpoint::from_model(&model);
    ck.save(&path).unwrap();
    let restored = Checkpoint::load(&path).unwrap().to_model(&path).unwrap();
    let again = dir.path().join("again.vnck");
    Checkpoint::from_model(&restored).save(&again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    let x = Tensor::from_fn(vec![2, 1, 16, 32, 32], |i| ((i % 17) as f32 - 8.0) / 4.0);
    assert_eq!(model.logits(x.clone()).unwrap(), restored.logits(x).unwrap());
}

#[test]
fn corrupt_checkpoint_names_file() {
    let err = Checkpoint::from_bytes(b"VNCK\x02\0\0\0\0\0\0\0", Path::new("bad.vnck")).unwrap_err();
    assert!(err.to_string().contains("bad.vnck"));
}

#[test]
fn full_geometry_forward_shape() {
    let model = Model::build(ModelConfig::with_channels(Variant::WithMha, [4, 4, 8, 8]), 0).unwrap();
    let extents = model.cfg.feature_extents([50, 112, 112]).unwrap();
    assert_eq!(extents.last().unwrap(), &[7, 7, 7]);
    let y = model.predict(Tensor::zeros(vec![1, 1, 50, 112, 112])).unwrap();
    assert_eq!(y.shape(), &[1]);
    assert!(y.data()[0] > 0.0 && y.data()[0] < 1.0);
}
