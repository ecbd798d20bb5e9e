//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Set `VOLNET_ACCEPTANCE_FULL=1` to also run the ablation at
//! 50x112x112 inputs (about 45 minutes on one core).

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{step_losses, synth_tiny, volnet, write_config};
use volnet_cli::commands::{ABLATION_JSON, ABLATION_TABLE, TABLE_COLUMNS};
use volnet_core::autodiff::Graph;
use volnet_core::data::{center_window, resize_slices, Preprocessor};
use volnet_core::gradcheck::{run_suite, CheckOptions, CORRUPTED_FIXTURE};
use volnet_core::metrics::{macro_f1, Confusion};
use volnet_core::nn::{Ctx, MhaConfig, MultiHeadAttention, ParamBuilder, ParamStore};
use volnet_core::ops::{avgpool_global, conv3d, matmul, softmax, Conv3dSpec};
use volnet_core::optim::{bce_with_logits, bce_with_logits_backward};
use volnet_core::{BnMode, Checkpoint, Hyperparams, Tensor, Trainer};
use volnet_testkit as oracle;

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor<f32> {
    let u = Uniform::new(-scale, scale);
    Tensor::from_fn(shape.to_vec(), |_| u.sample(rng))
}

fn f64s(t: &Tensor<f32>) -> Vec<f64> {
    t.data().iter().map(|&x| x as f64).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn gradient_suite(work: &Path) -> Outcome {
    let cfg = write_config(work, "gradcheck.cfg", "gradcheck_scope = all\n");
    let start = Instant::now();
    let run = volnet("gradcheck", &cfg, &[]);
    let took = start.elapsed();
    ensure(run.ok(), || format!("exit {}: {}{}", run.code, run.stdout, run.stderr))?;
    let rows: Vec<(&str, f64)> = run
        .stdout
        .lines()
        .skip(1)
        .filter_map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            (f.len() == 5 && matches!(f[4], "PASS" | "FAIL")).then(|| (f[0], f[1].parse().unwrap_or(f64::INFINITY)))
        })
        .collect();
    for needed in ["conv3d", "batchnorm_train", "softmax", "mha", "basic_block", "bce_with_logits", "model_tiny_mha"] {
        ensure(rows.iter().any(|(n, _)| *n == needed), || format!("no `{needed}` check"))?;
    }
    ensure(rows.len() >= 19, || format!("only {} checks ran", rows.len()))?;
    let worst = rows.iter().map(|r| r.1).fold(0.0, f64::max);
    ensure(worst < 1e-3, || format!("max relative error {worst:.3e}"))?;
    ensure(took < Duration::from_secs(60), || format!("took {:.1}s", secs(took)))?;
    let control = run_suite(CORRUPTED_FIXTURE, &CheckOptions::default()).map_err(|e| e.to_string())?;
    ensure(!control[0].passed(), || "corrupted backward was not caught".into())?;
    Ok(format!("{} checks, max rel err {worst:.2e}, {:.1}s", rows.len(), secs(took)))
}

const GEOMETRIES: usize = 128;

fn oracle_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = [0.0f64; 5];
    for _ in 0..GEOMETRIES {
        let (n, c, o) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
        let k: [usize; 3] = std::array::from_fn(|_| rng.gen_range(1..4));
        let s: [usize; 3] = std::array::from_fn(|_| rng.gen_range(1..3));
        let p: [usize; 3] = std::array::from_fn(|_| rng.gen_range(0..2));
        let d: [usize; 3] = std::array::from_fn(|i| rng.gen_range(k[i]..8));
        let x = random(&mut rng, &[n, c, d[0], d[1], d[2]], 1.0);
        let w = random(&mut rng, &[o, c, k[0], k[1], k[2]], 1.0);
        let b = random(&mut rng, &[o], 1.0);
        let y = conv3d(&x, &w, Some(&b), Conv3dSpec::new(s, p)).map_err(|e| e.to_string())?;
        let (expect, _) =
            oracle::conv3d(&f64s(&x), [n, c, d[0], d[1], d[2]], &f64s(&w), [o, c, k[0], k[1], k[2]], Some(&f64s(&b)), s, p);
        worst[0] = worst[0].max(max_diff(&f64s(&y), &expect));

        let x = random(&mut rng, &[n, c, d[0], d[1], d[2]], 10.0);
        let y = avgpool_global(&x).map_err(|e| e.to_string())?;
        worst[1] = worst[1].max(max_diff(&f64s(&y), &oracle::avgpool_global(&f64s(&x), n, c)));

        let (m, kk, nn) = (rng.gen_range(1..12), rng.gen_range(1..12), rng.gen_range(1..12));
        let a = random(&mut rng, &[1, m, kk], 1.0);
        let bm = random(&mut rng, &[kk, nn], 1.0);
        let cm = matmul(&a, &bm).map_err(|e| e.to_string())?;
        worst[2] = worst[2].max(max_diff(&f64s(&cm), &oracle::matmul(&f64s(&a), &f64s(&bm), m, kk, nn)));

        let (h, wd, oh, ow) = (rng.gen_range(1..40), rng.gen_range(1..40), rng.gen_range(1..40), rng.gen_range(1..40));
        let img = random(&mut rng, &[1, h, wd], 1.0);
        let r = resize_slices(&img, oh, ow).map_err(|e| e.to_string())?;
        worst[3] = worst[3].max(max_diff(&f64s(&r), &oracle::bilinear(&f64s(&img), h, wd, oh, ow)));

        let (t, heads, hd) = (rng.gen_range(1..9), rng.gen_range(1..4), rng.gen_range(1..5));
        let e = heads * hd;
        let mut store = ParamStore::new();
        let layer = MultiHeadAttention::new(
            &mut ParamBuilder::new(&mut store, &mut rng),
            "mha",
            MhaConfig::new(heads, e).map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())?;
        store.param_mut(layer.b_o).value = random(&mut rng, &[e], 0.5);
        let x = random(&mut rng, &[n, t, e], 1.0);
        let mut g = Graph::inference();
        let mut ctx = Ctx::new(&mut g, &store, BnMode::Eval);
        let xv = ctx.graph.input(x.clone());
        let yv = layer.forward(&mut ctx, xv).map_err(|e| e.to_string())?;
        let pv = |id| f64s(&store.param(id).value);
        let expect = oracle::mha_residual(
            &f64s(&x),
            n,
            t,
            e,
            heads,
            &pv(layer.w_q),
            &pv(layer.w_k),
            &pv(layer.w_v),
            &pv(layer.w_o),
            &pv(layer.b_o),
        );
        worst[4] = worst[4].max(max_diff(&f64s(g.value(yv)), &expect));
    }
    let names = ["conv3d", "pool", "matmul", "bilinear", "mha"];
    for (name, err) in names.iter().zip(worst) {
        ensure(err < 1e-4, || format!("{name} differs by {err:.3e}"))?;
    }
    Ok(format!("{GEOMETRIES} geometries per op, worst abs err {:.2e}", worst.iter().cloned().fold(0.0, f64::max)))
}

fn overfit(work: &Path) -> Outcome {
    let dir = work.join("overfit");
    std::fs::create_dir_all(&dir).unwrap();
    synth_tiny(&dir, 4, 1, 11);
    // 8 records at batch 4: 100 epochs are 200 Adam steps.
    let cfg = write_config(
        &dir,
        "train.cfg",
        "manifest = data/manifest.csv\nout_dir = run\nlr = 0.0001\nbatch_size = 4\nepochs = 100\ncheckpoint_interval = 100\n\
         checkpoint = run/last.vnck\neval_split = train\n",
    );
    let start = Instant::now();
    let run = volnet("train", &cfg, &["--tiny"]);
    ensure(run.ok(), || format!("train exit {}: {}", run.code, run.stderr))?;
    let eval = volnet("eval", &cfg, &["--tiny"]);
    let took = start.elapsed();
    ensure(eval.ok(), || format!("eval exit {}: {}", eval.code, eval.stderr))?;
    let losses = step_losses(&dir.join("run/train_log.jsonl"));
    ensure(losses.len() == 200, || format!("{} steps", losses.len()))?;
    let last = *losses.last().unwrap();
    let first_below = losses.iter().position(|&l| l < 0.05).map(|i| i + 1);
    ensure(last < 0.05, || format!("final loss {last:.4}"))?;
    let f1: f64 = eval
        .stdout
        .lines()
        .find_map(|l| l.strip_prefix("macro_f1: "))
        .and_then(|v| v.parse().ok())
        .ok_or("no macro_f1 in eval output")?;
    ensure(f1 == 1.0, || format!("train macro F1 {f1}"))?;
    ensure(took < Duration::from_secs(300), || format!("took {:.1}s", secs(took)))?;
    Ok(format!(
        "loss < 0.05 from step {}, final {last:.2e}, train macro F1 {f1}, {:.1}s",
        first_below.unwrap_or(0),
        secs(took)
    ))
}

fn check_ablation(dir: &Path, limit: Duration, took: Duration) -> Outcome {
    let table = std::fs::read_to_string(dir.join("run").join(ABLATION_TABLE)).map_err(|e| e.to_string())?;
    let lines: Vec<&str> = table.lines().collect();
    let header = format!("| {} |", TABLE_COLUMNS.join(" | "));
    ensure(lines.len() == 4 && lines[0] == header, || format!("unexpected table:\n{table}"))?;
    ensure(lines[0] == "| Architecture | Recall | Precision | Macro F1 Score |", || "column names".into())?;
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("run").join(ABLATION_JSON)).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let mut scores = Vec::new();
    for (row, arch) in json.as_array().ok_or("rows")?.iter().zip(["ResNet3D-18", "ResNet3D-18 + MHA"]) {
        ensure(row["architecture"] == arch, || format!("row {row}"))?;
        let f1 = row["report"]["macro_f1"].as_f64().ok_or("macro_f1")?;
        let epoch = row["best_epoch"].as_u64().ok_or("best_epoch")?;
        ensure(f1 >= 0.90, || format!("{arch}: val macro F1 {f1:.4}"))?;
        ensure(epoch < 20, || format!("{arch}: best epoch {epoch}"))?;
        scores.push(format!("{arch} {f1:.4}"));
    }
    ensure(scores.len() == 2, || "two rows expected".into())?;
    ensure(took < limit, || format!("took {:.1}s", secs(took)))?;
    Ok(format!("{}, {:.1}s", scores.join(", "), secs(took)))
}

fn ablation(work: &Path, full: bool) -> Outcome {
    let dir = work.join(if full { "ablation_full" } else { "ablation_tiny" });
    std::fs::create_dir_all(&dir).unwrap();
    let (tiny, limit) = if full { (false, Duration::from_secs(6 * 3600)) } else { (true, Duration::from_secs(600)) };
    let synth = write_config(&dir, "synth.cfg", "synth_dir = data\nn_per_class = 100\nn_val_per_class = 30\nseed = 7\n");
    let mut body = String::from("manifest = data/manifest.csv\nout_dir = run\nbatch_size = 4\nepochs = 5\nseed = 7\n");
    if full {
        // Full input geometry with reduced channel widths.
        body += "stage_channels = 4, 8, 16, 32\ndepth = 50\nheight = 112\nwidth = 112\n";
    }
    let cfg = write_config(&dir, "ablate.cfg", &body);
    let flags: &[&str] = if tiny { &["--tiny"] } else { &[] };
    let start = Instant::now();
    let run = volnet("synth", &synth, flags);
    ensure(run.ok(), || format!("synth exit {}: {}", run.code, run.stderr))?;
    let run = volnet("ablate", &cfg, flags);
    let took = start.elapsed();
    ensure(run.ok(), || format!("ablate exit {}: {}", run.code, run.stderr))?;
    print!("{}", run.stdout);
    check_ablation(&dir, limit, took)
}

fn metric_fixture() -> Outcome {
    let (m, _) = macro_f1(Confusion { tp: 3, fp: 1, fn_: 1, tn: 5 });
    ensure((m - 0.791667).abs() < 1e-6, || format!("fixture macro F1 {m}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let c = Confusion { tp: rng.gen_range(0..40), fp: rng.gen_range(0..40), fn_: rng.gen_range(0..40), tn: rng.gen_range(0..40) };
        let (a, b) = (macro_f1(c).0, macro_f1(c.relabeled()).0);
        ensure((a - b).abs() < 1e-12, || format!("{c:?}: {a} vs {b}"))?;
    }
    Ok(format!("fixture {m:.6}, symmetric over 1000 random matrices"))
}

fn preprocessing_fixture(work: &Path) -> Outcome {
    let v = Tensor::from_fn(vec![120, 2, 2], |i| (i / 4) as f32);
    let w = center_window(&v, 50).map_err(|e| e.to_string())?;
    let slices: Vec<usize> = w.data().chunks(4).map(|c| c[0] as usize).collect();
    ensure(slices == (35..=84).collect::<Vec<_>>(), || format!("window {slices:?}"))?;
    let pre = Preprocessor::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let shape = vec![rng.gen_range(1..130), rng.gen_range(1..200), rng.gen_range(1..200)];
        let out = pre.apply(&random(&mut rng, &shape, 900.0)).map_err(|e| e.to_string())?;
        ensure(out.shape() == [50, 112, 112], || format!("{shape:?} -> {:?}", out.shape()))?;
    }
    let flat = pre.apply(&Tensor::full(vec![64, 90, 70], -300.0f32)).map_err(|e| e.to_string())?;
    ensure(flat.data().iter().all(|&x| x == 0.0), || "constant volume not all zeros".into())?;

    let dir = work.join("preprocess");
    std::fs::create_dir_all(&dir).unwrap();
    synth_tiny(&dir, 2, 1, 3);
    let cfg = write_config(&dir, "pre.cfg", "manifest = data/manifest.csv\npreprocess_out = pre\n");
    let run = volnet("preprocess", &cfg, &[]);
    ensure(run.ok(), || format!("preprocess exit {}: {}", run.code, run.stderr))?;
    let m = volnet_core::data::Manifest::load(&dir.join("pre/manifest.csv")).map_err(|e| e.to_string())?;
    for row in &m.rows {
        let v = volnet_core::data::read_volume(&m.resolve(row)).map_err(|e| e.to_string())?;
        ensure(v.shape() == [50, 112, 112], || format!("{}: {:?}", row.id, v.shape()))?;
    }
    Ok("window 35..=84, outputs 50x112x112, constant volume gives zeros".into())
}

fn determinism(work: &Path) -> Outcome {
    let dir = work.join("determinism");
    std::fs::create_dir_all(&dir).unwrap();
    synth_tiny(&dir, 8, 2, 21);
    let base = "manifest = data/manifest.csv\nbatch_size = 4\nepochs = 3\nworkers = 1\nseed = 3\n";
    let a = write_config(&dir, "a.cfg", &format!("{base}out_dir = a\n"));
    let b = write_config(&dir, "b.cfg", &format!("{base}out_dir = b\n"));
    for cfg in [&a, &b] {
        let run = volnet("train", cfg, &["--tiny"]);
        ensure(run.ok(), || format!("train exit {}: {}", run.code, run.stderr))?;
    }
    let (la, lb) = (step_losses(&dir.join("a/train_log.jsonl")), step_losses(&dir.join("b/train_log.jsonl")));
    ensure(la.len() == lb.len() && !la.is_empty(), || "trace lengths differ".into())?;
    let gap = la.iter().zip(&lb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    ensure(gap <= 1e-6, || format!("loss traces differ by {gap:e}"))?;
    for name in ["best.vnck", "last.vnck"] {
        let (x, y) = (std::fs::read(dir.join("a").join(name)), std::fs::read(dir.join("b").join(name)));
        ensure(matches!((&x, &y), (Ok(x), Ok(y)) if x == y), || format!("{name} differs"))?;
    }
    let path = dir.join("a/last.vnck");
    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    let ck = Checkpoint::from_bytes(&bytes, &path).map_err(|e| e.to_string())?;
    let resumed = Trainer::from_checkpoint(&ck, Hyperparams::default(), 3, &path).map_err(|e| e.to_string())?;
    ensure(ck.to_bytes() == bytes, || "checkpoint re-encoding differs".into())?;
    ensure(resumed.to_checkpoint().to_bytes() == bytes, || "trainer round trip differs".into())?;
    Ok(format!("{} steps identical, checkpoints bit-identical", la.len()))
}

fn stability(work: &Path) -> Outcome {
    let logits: Vec<f32> = (0..=4000).map(|i| -1e4 + i as f32 * 5.0).collect();
    let n = logits.len();
    let z = Tensor::new(vec![n], logits.clone()).map_err(|e| e.to_string())?;
    for y in [0.0f32, 1.0] {
        let t = Tensor::full(vec![n], y);
        let loss = bce_with_logits(&z, &t, 1.0).map_err(|e| e.to_string())?;
        let grad = bce_with_logits_backward(&z, &t, 1.0, 1.0).map_err(|e| e.to_string())?;
        ensure(loss.is_finite() && grad.is_finite(), || format!("BCE not finite for target {y}"))?;
    }
    let rows = Tensor::new(vec![1, n], logits).map_err(|e| e.to_string())?;
    ensure(softmax(&rows, 1).map_err(|e| e.to_string())?.is_finite(), || "softmax not finite".into())?;
    let spikes = Tensor::new(vec![2, 3], vec![-1e4f32, 0.0, 1e4, 1e4, 1e4, -1e4]).map_err(|e| e.to_string())?;
    ensure(softmax(&spikes, 1).map_err(|e| e.to_string())?.is_finite(), || "softmax spikes".into())?;

    let dir = work.join("stability");
    std::fs::create_dir_all(&dir).unwrap();
    let manifest = synth_tiny(&dir, 2, 1, 4);
    let m = volnet_core::data::Manifest::load(&manifest).map_err(|e| e.to_string())?;
    let row = &m.rows[0];
    let mut v = volnet_core::data::read_volume(&m.resolve(row)).map_err(|e| e.to_string())?;
    let mid = v.numel() / 2;
    v.data_mut()[mid] = f32::NAN;
    volnet_core::data::write_volume(&m.resolve(row), &v).map_err(|e| e.to_string())?;
    let cfg = write_config(&dir, "train.cfg", "manifest = data/manifest.csv\nout_dir = run\nepochs = 1\n");
    let run = volnet("train", &cfg, &["--tiny"]);
    ensure(run.code == 3, || format!("NaN run exited {}: {}", run.code, run.stderr))?;
    Ok("BCE and softmax finite over [-1e4, 1e4], NaN loss exits 3".into())
}

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let full = std::env::var("VOLNET_ACCEPTANCE_FULL").is_ok_and(|v| v == "1");
    let criteria: Vec<Criterion> = vec![
        ("1 gradient suite", Box::new(|| gradient_suite(work.path()))),
        ("2 oracle suite", Box::new(oracle_suite)),
        ("3 overfit sanity", Box::new(|| overfit(work.path()))),
        ("4 phantom ablation (16x32x32)", Box::new(|| ablation(work.path(), false))),
        ("5 metric fixture", Box::new(metric_fixture)),
        ("6 preprocessing fixture", Box::new(|| preprocessing_fixture(work.path()))),
        ("7 determinism", Box::new(|| determinism(work.path()))),
        ("8 stability", Box::new(|| stability(work.path()))),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(reason) => {
                failed += 1;
                println!("FAIL criterion {name}: {reason}");
            }
        }
    }
    if full {
        match ablation(work.path(), true) {
            Ok(detail) => println!("PASS criterion 4 phantom ablation (50x112x112): {detail}"),
            Err(reason) => {
                failed += 1;
                println!("FAIL criterion 4 phantom ablation (50x112x112): {reason}");
            }
        }
    } else {
        println!("NOTE criterion 4 at 50x112x112 not run; set VOLNET_ACCEPTANCE_FULL=1");
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
