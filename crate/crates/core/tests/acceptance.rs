//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use common::{oracle_nmse, oracle_psnr, oracle_ssim, phantom_samples, random_image, rng};
use hinet::data::{
    build_samples, extract_patches, make_phantom_dataset, stitch_patches, Image2D, Modality, PhantomConfig, Sample,
    SamplePlan,
};
use hinet::experiments::{execute_run, run_ablation, DatasetSource, RunConfig, RunManifest, FINAL_MODEL};
use hinet::metrics::{evaluate_subjects, nmse, psnr, ssim};
use hinet::model::{
    init_block_params, init_params, mfb_forward, BlockKind, BlockSpec, Forward, FusionVariant, HiNetParams, Mode,
    ModelConfig, Session, Trainable,
};
use hinet::objectives::{discriminator_objective_var, generator_objective_var, AdversarialForm};
use hinet::synthesis::synthesize_subject;
use hinet::trainer::{checkpoint_path, lr_schedule, read_loss_log, LogRow, TrainConfig, Trainer, LOSS_LOG};
use hinet_tensor::{Graph, Tensor};
use rand::Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_tensor(shape: &[usize], r: &mut rand_chacha::ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0f32..1.0)).collect()).unwrap()
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let y = random_image(32, 32, &mut r);
        let g = random_image(32, 32, &mut r);
        worst = worst
            .max((psnr(&y, &g).unwrap() - oracle_psnr(&y, &g)).abs())
            .max((nmse(&y, &g).unwrap() - oracle_nmse(&y, &g)).abs())
            .max((ssim(&y, &g).unwrap() - oracle_ssim(&y, &g)).abs());
    }
    let y = random_image(32, 32, &mut r);
    let zero = Image2D::filled(32, 32, 0.0, Modality::Flair);
    let exact = ssim(&y, &y).unwrap() == 1.0 && nmse(&y, &zero).unwrap() == 1.0;
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= 1e-6 && exact && secs < 10.0,
        format!("max |diff| {worst:.2e}, identities exact: {exact}, {secs:.2}s"),
    )
}

fn patch_round_trip() -> Outcome {
    let start = Instant::now();
    let mut r = rng(2);
    let mut worst = 0.0f32;
    let mut anchors_ok = true;
    for _ in 0..100 {
        let img = random_image(160, 180, &mut r);
        let ps = extract_patches(&img).unwrap();
        anchors_ok &= ps.anchors == [(0, 0), (0, 52), (32, 0), (32, 52)];
        let back = stitch_patches(&ps).unwrap();
        for (a, b) in back.data().iter().zip(img.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= 1e-6 && anchors_ok && secs < 5.0,
        format!("max |diff| {worst:.2e}, anchors ok: {anchors_ok}, {secs:.2}s"),
    )
}

fn mfb_symmetry() -> Outcome {
    let base = ModelConfig::default();
    let mut r = rng(3);
    let mut mismatches = 0;
    for draw in 0..20u64 {
        let stage = (draw % 3) as usize;
        let channels = base.encoder_channels[stage];
        let filters = base.mfb_filters[stage];
        let prev = (stage > 0).then(|| base.mfb_filters[stage - 1].1);
        let spec = BlockSpec {
            kind: BlockKind::Mfb,
            channels,
            prev_channels: prev,
            filters,
        };
        let params = init_block_params(spec, 100 + draw).unwrap();
        let side = 16 >> stage;
        let s1 = random_tensor(&[2, channels, side, side], &mut r);
        let s2 = random_tensor(&[2, channels, side, side], &mut r);
        let fp = prev.map(|c| random_tensor(&[2, c, side, side], &mut r));
        let ab = mfb_forward(&s1, &s2, fp.as_ref(), &params, filters).unwrap();
        let ba = mfb_forward(&s2, &s1, fp.as_ref(), &params, filters).unwrap();
        if ab.data() != ba.data() {
            mismatches += 1;
        }
    }
    check(mismatches == 0, format!("{mismatches}/20 draws differ bitwise"))
}

fn shape_ladder() -> Outcome {
    let mut r = rng(4);
    let x1 = random_tensor(&[1, 1, 128, 128], &mut r);
    let x2 = random_tensor(&[1, 1, 128, 128], &mut r);
    let mut failures = Vec::new();
    for v in FusionVariant::ALL {
        let params = init_params(&ModelConfig::default().with_variant(v), 1).unwrap();
        let mut s = Session::new(Mode::Eval, Trainable::Nothing);
        let mut f = Forward::new(&mut s, &params);
        let a = f.session.input(x1.clone());
        let b = f.session.input(x2.clone());
        let out = f.generator(a, b).unwrap();
        let score = f.discriminator(a, b, out.y_hat).unwrap();
        let g = &s.graph;
        let pooled_ok = out.pyramids.iter().all(|p| {
            let got: Vec<_> = p.pooled.iter().map(|&v| g.shape(v).to_vec()).collect();
            got == [vec![1, 32, 64, 64], vec![1, 64, 32, 32], vec![1, 128, 16, 16]]
        });
        let ok = pooled_ok
            && g.shape(out.latent) == [1, 128, 16, 16]
            && g.shape(out.y_hat) == [1, 1, 128, 128]
            && g.shape(score) == [1, 1, 8, 8];
        if !ok {
            failures.push(v.name());
        }
    }
    check(failures.is_empty(), format!("six variants checked, failures: {failures:?}"))
}

fn random_batch(side: usize, n: usize, seed: u64) -> Vec<Sample> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let img = |m, r: &mut rand_chacha::ChaCha8Rng| {
                let data = (0..side * side).map(|_| r.random_range(-1.0f32..1.0)).collect();
                Image2D::new(side, side, data, m).unwrap()
            };
            let (a, b, c) = (img(Modality::T1, &mut r), img(Modality::T2, &mut r), img(Modality::Flair, &mut r));
            Sample::new(a, b, c, "random", i, (0, 0)).unwrap()
        })
        .collect()
}

fn central(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let h = 1e-4;
    (0..x.len())
        .map(|i| {
            let (mut p, mut m) = (x.to_vec(), x.to_vec());
            p[i] += h;
            m[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

fn worst_relative(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1e-8))
        .fold(0.0, f64::max)
}

fn toy_gradients() -> f64 {
    let t2 = |a: f64, b: f64| Tensor::new(&[1, 1, 1, 2], vec![a as f32, b as f32]).unwrap();
    let sig = |z: f64| 1.0 / (1.0 + (-z).exp());

    let (y, y_hat) = ([0.3, -0.6], [-0.2, 0.45]);
    let mut g = Graph::new();
    let yh = g.leaf(t2(y_hat[0], y_hat[1]), true);
    let yt = g.constant(t2(y[0], y[1]));
    let d = g.constant(t2(0.5, 0.5));
    let terms = generator_objective_var(&mut g, d, yh, yt, 100.0, AdversarialForm::NonSaturating).unwrap();
    let grads = g.backward(terms.l1).unwrap();
    let a: Vec<f64> = grads.get(yh).unwrap().data().iter().map(|&v| f64::from(v)).collect();
    let n = central(|v| ((y[0] - v[0]).abs() + (y[1] - v[1]).abs()) / 2.0, &y_hat);
    let l1_err = worst_relative(&a, &n);

    let z = [0.7, -0.4, 0.2, -1.1];
    let mut g = Graph::new();
    let zr = g.leaf(t2(z[0], z[1]), true);
    let zf = g.leaf(t2(z[2], z[3]), true);
    let (dr, df) = (g.sigmoid(zr), g.sigmoid(zf));
    let loss = discriminator_objective_var(&mut g, dr, df).unwrap();
    let grads = g.backward(loss).unwrap();
    let a: Vec<f64> = [zr, zf]
        .iter()
        .flat_map(|&v| grads.get(v).unwrap().data().to_vec())
        .map(f64::from)
        .collect();
    let n = central(
        |v| {
            -(sig(v[0]).ln() + sig(v[1]).ln()) / 2.0 - ((1.0 - sig(v[2])).ln() + (1.0 - sig(v[3])).ln()) / 2.0
        },
        &z,
    );
    l1_err.max(worst_relative(&a, &n))
}

fn gradient_coverage() -> Outcome {
    let batch = random_batch(32, 4, 5);
    let refs: Vec<&Sample> = batch.iter().collect();
    let mut dead = Vec::new();
    let mut total = 0;
    for v in FusionVariant::ALL {
        let cfg = ModelConfig::default().with_input_size(32, 32).with_variant(v);
        let tc = TrainConfig {
            lambda1: 100.0,
            lambda2: 20.0,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(init_params(&cfg, 6).unwrap(), tc).unwrap();
        let r = t.train_step(&refs, 2e-4).unwrap();
        for name in t.params.names() {
            total += 1;
            let n = r.grad_norms.get(name).copied().unwrap_or(0.0);
            if !(n.is_finite() && n > 0.0) {
                dead.push(format!("{v}:{name}"));
            }
        }
    }
    let fd = toy_gradients();
    check(
        dead.is_empty() && fd <= 1e-4,
        format!("{total} parameter tensors, zero-gradient: {dead:?}, toy FD rel err {fd:.2e}"),
    )
}

fn schedule() -> Outcome {
    let c = TrainConfig::default();
    let early = (1..=100).all(|e| lr_schedule(e, &c).unwrap() == 0.0002);
    let mid = lr_schedule(200, &c).unwrap();
    let end = lr_schedule(300, &c).unwrap();
    check(
        early && mid == 0.0001 && end == 0.0,
        format!("epochs 1-100 at 2e-4: {early}, epoch 200: {mid}, epoch 300: {end}"),
    )
}

fn overfit_smoke() -> Outcome {
    let start = Instant::now();
    let subjects = make_phantom_dataset(&PhantomConfig::new(2, (128, 128), 7)).unwrap();
    let samples: Vec<Sample> = subjects
        .iter()
        .flat_map(|s| build_samples(&s.x1, &s.x2, &s.y, &SamplePlan::whole()).unwrap())
        .collect();
    let cfg = ModelConfig::default().scaled(4);
    let tc = TrainConfig {
        epochs: 200,
        decay_start_epoch: 200,
        batch_size: 4,
        seed: 1,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(init_params(&cfg, 1).unwrap(), tc).unwrap();
    let rows = t.fit(&samples, None).unwrap();
    let m = evaluate_subjects(&t.params, &subjects, &SamplePlan::whole()).unwrap();
    let p = m.iter().map(|r| r.psnr).sum::<f64>() / m.len() as f64;
    let secs = start.elapsed().as_secs_f64();
    check(
        samples.len() == 8 && rows.len() == 400 && p >= 25.0 && secs < 600.0,
        format!("{} samples, {} steps, training PSNR {p:.2} dB, {secs:.0}s", samples.len(), rows.len()),
    )
}

fn ablation_ordering() -> Outcome {
    let mut phantom = PhantomConfig::new(12, (64, 64), 3);
    phantom.slices = 4;
    let base = RunConfig {
        dataset: DatasetSource::Phantom(phantom),
        model: ModelConfig::default().scaled(4).with_input_size(64, 64),
        train: TrainConfig {
            epochs: 30,
            decay_start_epoch: 15,
            ..TrainConfig::default()
        },
        ..RunConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let variants = [FusionVariant::Hybrid, FusionVariant::EarlyFusion, FusionVariant::ConcateD1];
    let table = run_ablation(&base, &variants, &[1, 2, 3], dir.path()).unwrap();
    let mean = |v| {
        let row = table.row(v).unwrap();
        assert!(row.error.is_none(), "{v}: {:?}", row.error);
        row.seed_psnr.iter().sum::<f64>() / row.seed_psnr.len() as f64
    };
    let (h, e, c) = (mean(variants[0]), mean(variants[1]), mean(variants[2]));
    check(
        h >= e && h >= c,
        format!("held-out PSNR hybrid {h:.3} / early_fusion {e:.3} / concate_d1 {c:.3} dB"),
    )
}

fn resume_config() -> (Vec<Sample>, Trainer) {
    let samples = phantom_samples(3, 32, 8);
    let tc = TrainConfig {
        epochs: 5,
        decay_start_epoch: 2,
        checkpoint_every: 1,
        seed: 4,
        ..TrainConfig::default()
    };
    let cfg = ModelConfig::default().scaled(4).with_input_size(32, 32);
    (samples, Trainer::new(init_params(&cfg, 2).unwrap(), tc).unwrap())
}

fn checkpoint_resume() -> Outcome {
    let (samples, mut full) = resume_config();
    let full_dir = tempfile::tempdir().unwrap();
    let full_rows = full.fit(&samples, Some(full_dir.path())).unwrap();

    // the interrupted run: a fresh process would only see the checkpoint file
    let resumed_dir = tempfile::tempdir().unwrap();
    let (_, mut first) = resume_config();
    first.run_epoch(&samples).unwrap();
    first.run_epoch(&samples).unwrap();
    first.save(&checkpoint_path(resumed_dir.path(), 2)).unwrap();
    let mut resumed = Trainer::load(&checkpoint_path(resumed_dir.path(), 2)).unwrap();
    let rows = resumed.fit(&samples, Some(resumed_dir.path())).unwrap();

    let window = |r: &[LogRow]| r.iter().filter(|x| x.epoch == 3 || x.epoch == 4).cloned().collect::<Vec<_>>();
    let (a, b) = (window(&full_rows), window(&rows));
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(&b) {
        for (p, q) in [
            (x.l_recon, y.l_recon),
            (x.l_g_adv, y.l_g_adv),
            (x.l_g_l1, y.l_g_l1),
            (x.l_g, y.l_g),
            (x.l_d, y.l_d),
            (x.lr, y.lr),
        ] {
            worst = worst.max((p - q).abs());
        }
    }
    let aligned = !a.is_empty() && a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| (x.epoch, x.step) == (y.epoch, y.step));
    check(
        aligned && worst <= 1e-5,
        format!("{} rows over the 2 epochs after the resume point, max |diff| {worst:.2e}", a.len()),
    )
}

fn determinism_config() -> RunConfig {
    let mut phantom = PhantomConfig::new(4, (32, 32), 5);
    phantom.slices = 2;
    RunConfig {
        dataset: DatasetSource::Phantom(phantom),
        train_fraction: 0.5,
        model: ModelConfig::default().scaled(4).with_input_size(32, 32),
        train: TrainConfig {
            epochs: 3,
            decay_start_epoch: 1,
            seed: 9,
            ..TrainConfig::default()
        },
        ..RunConfig::default()
    }
}

fn synthesized(run_dir: &Path, cfg: &RunConfig) -> Vec<f32> {
    let params = HiNetParams::load(&run_dir.join(FINAL_MODEL)).unwrap();
    let DatasetSource::Phantom(p) = &cfg.dataset else {
        unreachable!()
    };
    make_phantom_dataset(p)
        .unwrap()
        .iter()
        .flat_map(|s| synthesize_subject(&params, &s.x1, &s.x2, &cfg.plan).unwrap())
        .flat_map(|(_, img)| img.into_data())
        .collect()
}

fn determinism() -> Outcome {
    let cfg = determinism_config();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = RunManifest::new(cfg.clone()).unwrap();
    let mb = RunManifest::new(cfg.clone()).unwrap();
    let ra = execute_run(&ma, a.path()).unwrap();
    let rb = execute_run(&mb, b.path()).unwrap();
    let logs_equal = read_loss_log(&a.path().join(LOSS_LOG)).unwrap() == read_loss_log(&b.path().join(LOSS_LOG)).unwrap()
        && std::fs::read(a.path().join(LOSS_LOG)).unwrap() == std::fs::read(b.path().join(LOSS_LOG)).unwrap();
    let (sa, sb) = (synthesized(a.path(), &cfg), synthesized(b.path(), &cfg));
    let outputs_equal = sa.len() == sb.len() && sa.iter().zip(&sb).all(|(x, y)| x.to_bits() == y.to_bits());
    check(
        logs_equal && outputs_equal && ra == rb,
        format!("loss logs identical: {logs_equal}, {} synthesized voxels identical: {outputs_equal}", sa.len()),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("metric oracle equivalence", metric_oracles),
        ("patch round-trip", patch_round_trip),
        ("MFB symmetry", mfb_symmetry),
        ("shape ladder", shape_ladder),
        ("gradient coverage", gradient_coverage),
        ("schedule exactness", schedule),
        ("overfit smoke", overfit_smoke),
        ("ablation ordering", ablation_ordering),
        ("checkpoint/resume", checkpoint_resume),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {:>2} {name}: PASS ({d}) [{secs:.1}s]", i + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({d}) [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
