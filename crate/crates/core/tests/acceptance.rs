//! Acceptance criteria 1–11. Each test prints one `PASS` or `FAIL` line
//! (visible with `--nocapture`) and fails on `FAIL`. Criterion 9 is a
//! nightly run and is ignored by default.

use std::collections::BTreeMap;
use std::io::Write;
use std::rc::Rc;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use monoview::checkpoint;
use monoview::data::{generate_synthetic_dataset, load_dataset, random_scene_specs, read_manifest_entries, write_manifest, Shape, Solid};
use monoview::data::{SyntheticConfig, SyntheticSceneSpec, MANIFEST_FILE};
use monoview::evaluation::{evaluate_novel_views, held_out_pairs, psnr, ssim, AnalyticModel, EvalConfig, NovelViewModel, TrainedModel};
use monoview::field::{init_field_params, query_field, FieldConfig, LatentCodes, CODE_DIM};
use monoview::geometry::{fit_offset_rotation, generate_rays, sample_pose_prior, CameraPose, Intrinsics, PosePrior};
use monoview::math::Mat3;
use monoview::objectives::{adversarial_losses, combine_losses, LossTerms};
use monoview::rendering::{composite, composite_values, hierarchical_resample, render_values, FnField, SamplingConfig};
use monoview::training::{lr_at, run_training, LogRecord, Regime, TrainConfig, TrainState, STATE_FILE};
use monoview::{DatasetRecord, EncodingConfig, Image, LossWeights, RadianceSample};
use monoview_autodiff::gradcheck::probe_gradients;
use monoview_autodiff::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Long criteria run one at a time so their wall-clock budgets hold on a
/// single core.
static HEAVY: Mutex<()> = Mutex::new(());

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Writes to the raw stderr handle so the line shows even under output capture.
fn verdict(criterion: u32, name: &str, failures: &[String], detail: &str) {
    let line = if failures.is_empty() {
        format!("PASS criterion {criterion:>2} {name}: {detail}\n")
    } else {
        format!("FAIL criterion {criterion:>2} {name}: {}\n", failures.join("; "))
    };
    let _ = std::io::stderr().write_all(line.as_bytes());
    if !failures.is_empty() {
        panic!("criterion {criterion} failed");
    }
}

fn check(failures: &mut Vec<String>, ok: bool, what: impl FnOnce() -> String) {
    if !ok {
        failures.push(what());
    }
}

fn loss_lines(log: &[LogRecord]) -> Vec<String> {
    // Everything but the wall time.
    log.iter().map(|r| format!("{} {} {} {} {:?}", r.step, r.epoch, r.lr.to_bits(), r.progress.to_bits(), r.losses)).collect()
}

#[test]
fn criterion_01_compositing_exactness() {
    let start = Instant::now();
    let mut f = Vec::new();
    let mut worst: f64 = 0.0;
    for sigma in [0.05, 0.3, 1.0, 2.5] {
        let cfg = SamplingConfig { near: 0.1, far: 4.0, num_coarse: 256, num_fine: 0, jitter: false };
        let field = FnField(move |_p: [f64; 3], _d: [f64; 3]| RadianceSample { density: sigma, rgb: [0.5; 3] });
        let out = render_values(&field, &[0.0, 0.0, 0.0], &[0.0, 0.0, 1.0], &cfg, &mut rng(1)).unwrap();
        let want = 1.0 - (-sigma * (cfg.far - cfg.near)).exp();
        worst = worst.max((out.alpha[0] - want).abs());
    }
    check(&mut f, worst <= 1e-3, || format!("homogeneous alpha off by {worst}"));
    // One sample with σ·δ = ln 2 lets exactly half the light through.
    let (_, alpha, _, _) = composite_values(&[2f64.ln()], &[[1.0, 1.0, 1.0]], &[1.0], 2.0);
    check(&mut f, (alpha - 0.5).abs() <= 1e-9, || format!("single-sample alpha {alpha}"));
    let took = start.elapsed();
    check(&mut f, took < Duration::from_secs(1), || format!("took {took:?}"));
    verdict(1, "compositing exactness", &f, &format!("max homogeneous error {worst:.2e}, ln 2 sample alpha {alpha}, {took:.2?}"));
}

#[test]
fn criterion_02_renderer_differentiability() {
    let start = Instant::now();
    let mut r = rng(2);
    let mut f = Vec::new();
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let s = 8;
        let mut t: Vec<f64> = (0..s).map(|_| r.random_range(0.5..3.5)).collect();
        t.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let t: Rc<[f64]> = t.into();
        let sigma = Tensor::from_parts([s], (0..s).map(|_| r.random_range(0.0..3.0)).collect());
        let rgb = Tensor::from_parts([s, 3], (0..3 * s).map(|_| r.random_range(0.0..1.0)).collect());
        // Each output channel (rgb, alpha) separately.
        for out_col in 0..4 {
            let mut proj = vec![0.0; 5];
            proj[out_col] = 1.0;
            let proj = Tensor::from_parts([1, 5], proj);
            let probes: Vec<(usize, usize)> = (0..s).map(|j| (0, j)).chain((0..3 * s).map(|j| (1, j))).collect();
            let res = probe_gradients(&[sigma.clone(), rgb.clone()], &probes, 1e-6, |g, v| {
                composite(v[0], v[1], t.clone(), s, 4.0).mul(g.constant(proj.clone())).sum()
            });
            for p in &res {
                worst = worst.max(p.relative_error(1e-6));
            }
        }
    }
    check(&mut f, worst <= 1e-4, || format!("relative gradient error {worst:.2e}"));
    let took = start.elapsed();
    check(&mut f, took < Duration::from_secs(10), || format!("took {took:?}"));
    verdict(2, "renderer differentiability", &f, &format!("max relative error {worst:.2e} over rgb and alpha, {took:.2?}"));
}

#[test]
fn criterion_03_hierarchical_sampling() {
    let start = Instant::now();
    let mut r = rng(3);
    let mut f = Vec::new();
    let mut min_p: f64 = 1.0;
    for trial in 0..5 {
        let bins = 12;
        let edges: Vec<f64> = (0..=bins).map(|k| 0.5 + 3.0 * k as f64 / bins as f64).collect();
        let weights: Vec<f64> = (0..bins).map(|_| r.random_range(0.01..1.0)).collect();
        // Brute-force reference: the density integrated on a dense grid,
        // then summed into cells of half a bin.
        let grid = 120_000;
        let total: f64 = weights.iter().sum();
        let mut cdf = Vec::with_capacity(grid + 1);
        let mut acc = 0.0;
        cdf.push(0.0);
        for k in 0..grid {
            let x = 0.5 + 3.0 * (k as f64 + 0.5) / grid as f64;
            let bin = ((x - 0.5) / 3.0 * bins as f64) as usize;
            // mass of one grid cell: bin share times the cell's share of its bin
            acc += weights[bin.min(bins - 1)] / total * bins as f64 / grid as f64;
            cdf.push(acc);
        }
        let cell_of = |x: f64| (((x - 0.5) / 3.0 * (2 * bins) as f64) as usize).min(2 * bins - 1);
        let mut probs = vec![0.0; 2 * bins];
        for k in 0..grid {
            probs[cell_of(0.5 + 3.0 * (k as f64 + 0.5) / grid as f64)] += cdf[k + 1] - cdf[k];
        }
        check(&mut f, (cdf[grid] - 1.0).abs() < 1e-9, || format!("trial {trial}: reference mass {}", cdf[grid]));
        let draws = 100_000;
        let mut counts = vec![0.0; 2 * bins];
        for _ in 0..draws {
            counts[cell_of(hierarchical_resample(&edges, &weights, 1, Some(&mut r))[0])] += 1.0;
        }
        let stat: f64 = counts.iter().zip(&probs).map(|(o, p)| (o - p * draws as f64).powi(2) / (p * draws as f64)).sum();
        let p = 1.0 - ChiSquared::new((2 * bins - 1) as f64).unwrap().cdf(stat);
        min_p = min_p.min(p);
        check(&mut f, p > 0.01, || format!("trial {trial}: chi-square {stat:.1}, p {p:.4}"));
    }
    let took = start.elapsed();
    check(&mut f, took < Duration::from_secs(30), || format!("took {took:?}"));
    verdict(3, "hierarchical sampling", &f, &format!("5 weight vectors × 100 000 draws, min p {min_p:.3}, {took:.2?}"));
}

#[test]
fn criterion_04_geometry_round_trips() {
    let mut r = rng(4);
    let mut f = Vec::new();
    let intr = Intrinsics::new(70.4, 70.4, 31.5, 31.5, 64, 64).unwrap();
    let (mut reproj, mut ortho): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let pose = sample_pose_prior(&PosePrior::default(), &mut r).unwrap();
        ortho = ortho.max(pose.rotation().orthonormality_error()).max((pose.rotation().determinant() - 1.0).abs());
        let pixels: Vec<[f64; 2]> = (0..16).map(|_| [r.random_range(0.0..63.0), r.random_range(0.0..63.0)]).collect();
        let rays = generate_rays(&pose, &intr, &pixels).unwrap();
        for ((o, d), px) in rays.origins.iter().zip(&rays.directions).zip(&pixels) {
            let t = r.random_range(0.5..3.0);
            let uv = intr.project(&pose.rigid().to_camera(&[o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]]));
            reproj = reproj.max((uv[0] - px[0]).abs()).max((uv[1] - px[1]).abs());
        }
    }
    check(&mut f, reproj < 0.5, || format!("re-projection error {reproj} px"));
    check(&mut f, ortho < 1e-6, || format!("orthonormality error {ortho}"));

    let gt: Vec<CameraPose<f64>> = (0..30).map(|_| sample_pose_prior(&PosePrior::default(), &mut r).unwrap()).collect();
    let off = 30f64.to_radians();
    let pred: Vec<_> = gt.iter().map(|p| CameraPose::from_angles(p.azimuth() - off, p.elevation(), p.translation).unwrap()).collect();
    let fit = fit_offset_rotation(&pred, &gt).unwrap();
    let want = Mat3([[off.cos(), 0.0, off.sin()], [0.0, 1.0, 0.0], [-off.sin(), 0.0, off.cos()]]);
    let err = (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| (fit.rotation.0[i][j] - want.0[i][j]).abs()).fold(0.0, f64::max);
    check(&mut f, err < 1e-6, || format!("planted 30° offset recovered to {err}"));
    verdict(4, "geometry round trips", &f, &format!("re-projection {reproj:.1e} px, orthonormality {ortho:.1e}, offset error {err:.1e}"));
}

#[test]
fn criterion_05_field_constraints() {
    let mut r = rng(5);
    let mut f = Vec::new();
    let cfg = FieldConfig {
        mlp_depth: 4,
        mlp_width: 32,
        color_width: 16,
        position_encoding: EncodingConfig { num_frequencies: 6, include_raw_input: true, anneal_duration: 1 },
        direction_frequencies: 2,
        ..FieldConfig::default()
    };
    let params = init_field_params::<f64, _>(&cfg, &mut r);
    let codes = LatentCodes::new((0..CODE_DIM).map(|_| r.random_range(-1.0..1.0)).collect(), (0..CODE_DIM).map(|_| r.random_range(-1.0..1.0)).collect())
        .unwrap();
    let unit = |v: [f64; 3]| {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        [v[0] / n, v[1] / n, v[2] / n]
    };
    let n = 500;
    let dir = [unit([0.2, 0.3, 1.0])];
    let (mut outside_max, mut mirror_mismatch, mut dir_dev): (f64, usize, f64) = (0.0, 0, 0.0);
    for _ in 0..n {
        let mut p = [r.random_range(-1.5..1.5), r.random_range(-1.5..1.5), r.random_range(-1.5..1.5)];
        let axis = r.random_range(0..3);
        p[axis] = if p[axis] < 0.0 { p[axis] - 0.4 } else { p[axis] + 0.4 };
        let out = query_field(&[p], &dir, &codes, &cfg, &params, true, 1.0).unwrap();
        outside_max = outside_max.max(out[0].density.abs());

        let q = [r.random_range(-0.4..0.4), r.random_range(-0.4..0.4), r.random_range(-0.4..0.4)];
        let a = query_field(&[q], &dir, &codes, &cfg, &params, true, 1.0).unwrap();
        let b = query_field(&[[q[0], -q[1], q[2]]], &dir, &codes, &cfg, &params, true, 1.0).unwrap();
        mirror_mismatch += usize::from(a[0].density.to_bits() != b[0].density.to_bits());

        let other = [unit([r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)])];
        let c = query_field(&[q], &other, &codes, &cfg, &params, false, 0.7).unwrap();
        let d = query_field(&[q], &dir, &codes, &cfg, &params, false, 0.7).unwrap();
        dir_dev = dir_dev.max((c[0].density - d[0].density).abs());
    }
    check(&mut f, outside_max == 0.0, || format!("density {outside_max} outside the box"));
    check(&mut f, mirror_mismatch == 0, || format!("{mirror_mismatch} mirrored pairs differ"));
    check(&mut f, dir_dev == 0.0, || format!("density varies with direction by {dir_dev}"));
    verdict(5, "field constraints", &f, &format!("{n} points each: outside density 0, mirror bit-identical, direction deviation 0"));
}

#[test]
fn criterion_06_loss_unit_values() {
    let mut f = Vec::new();
    // Logit 0 is s = sigmoid(0) = 0.5.
    let (d, g) = adversarial_losses(&[0.0f64; 8], &[0.0; 8]);
    check(&mut f, (d - 2.0 * 2f64.ln()).abs() <= 1e-9 && (g - 2f64.ln()).abs() <= 1e-9, || format!("adversarial ({d}, {g})"));
    let lr = lr_at(1, &TrainConfig::default());
    check(&mut f, lr == 9.6e-4, || format!("lr_at(1) = {lr:e}"));
    let ones = LossTerms {
        recon_color: 1.0,
        recon_alpha: 1.0,
        adv_color: Some(1.0),
        adv_alpha: Some(1.0),
        pose_consistency: Some(1.0),
        pose_supervised: Some(1.0),
        disc_color: Some(1.0),
        disc_alpha: Some(1.0),
    };
    let total = combine_losses(&ones, &LossWeights::default()).total;
    check(&mut f, total == 54.0, || format!("unit terms total {total}"));
    verdict(6, "loss unit values", &f, &format!("adversarial ({d:.12}, {g:.12}), lr_at(1) {lr:e}, unit total {total}"));
}

fn sphere_views(dir: &std::path::Path, size: usize, views: usize) {
    let spec = SyntheticSceneSpec {
        instance_id: "ball".into(),
        parts: vec![Solid { shape: Shape::Sphere { center: [0.0; 3], radius: 0.3 }, albedo: [0.8, 0.4, 0.2] }],
        category: "sphere".into(),
        symmetric: true,
        density: 1000.0,
    };
    let cfg = SyntheticConfig { image_size: size, views_per_instance: views, seed: 1, ..SyntheticConfig::default() };
    generate_synthetic_dataset(&[spec], &cfg, dir).unwrap();
}

#[test]
fn criterion_07_toy_overfit() {
    let _guard = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let dir = tempfile::tempdir().unwrap();
    sphere_views(dir.path(), 64, 20);
    let (records, _) = load_dataset::<f32>(&dir.path().join(MANIFEST_FILE)).unwrap();
    // Posed, reconstruction only: pose supervision on every record, no
    // adversarial or consistency terms.
    let mut cfg = TrainConfig::desk(64);
    cfg.regime = Regime::Full;
    cfg.labeled_fraction = 1.0;
    cfg.weights = LossWeights { adv_color: 0.0, adv_alpha: 0.0, pose_consistency: 0.0, pose_supervised: 1.0, ..LossWeights::default() };
    // Five steps per epoch here, so the per-epoch decay is gentler.
    cfg.decay_rate = 0.99;
    cfg.epochs = 300;
    cfg.seed = 7;
    let start = Instant::now();
    let run = run_training(&records, &cfg, None, None).unwrap();
    let model = TrainedModel::new(run.config.clone(), run.state.generator_params());
    let mut total = 0.0;
    for r in &records {
        let ((latent, pose), _) = (model.encode(r).unwrap(), ());
        let (rgb, _) = model.render(&latent, &pose.rigid(), &r.intrinsics).unwrap();
        total += psnr(&rgb, &r.image).unwrap();
    }
    let mean = total / records.len() as f64;
    let took = start.elapsed();
    let mut f = Vec::new();
    check(&mut f, mean >= 25.0, || format!("mean reconstruction PSNR {mean:.2} dB"));
    check(&mut f, took <= Duration::from_secs(30 * 60), || format!("took {took:?}"));
    verdict(7, "toy overfit", &f, &format!("{} steps, mean PSNR {mean:.2} dB over 20 views, {:.0} s", run.log.len(), took.as_secs_f64()));
}

#[test]
fn criterion_08_unsupervised_smoke() {
    let _guard = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let dir = tempfile::tempdir().unwrap();
    let specs = random_scene_specs(50, &mut rng(8));
    let sc = SyntheticConfig { image_size: 32, views_per_instance: 1, seed: 8, ..SyntheticConfig::default() };
    generate_synthetic_dataset(&specs, &sc, dir.path()).unwrap();
    let (records, audit) = load_dataset::<f32>(&dir.path().join(MANIFEST_FILE)).unwrap();
    let mut cfg = TrainConfig::desk(32);
    cfg.sampling.num_coarse = 12;
    cfg.sampling.num_fine = 12;
    cfg.recon_patch = 12;
    cfg.recon_stride = 2.5;
    cfg.discriminator.patch_size = 12;
    cfg.max_steps = 2000;
    let start = Instant::now();
    let run = run_training(&records, &cfg, None, None).unwrap();
    let took = start.elapsed();
    let mut f = Vec::new();
    check(&mut f, run.log.len() == 2000, || format!("{} steps logged", run.log.len()));
    let bad = run.log.iter().find(|r| {
        let l = &r.losses;
        ![l.recon_color, l.recon_alpha, l.adv_color, l.adv_alpha, l.pose_consistency, l.disc_color, l.disc_alpha, l.total].iter().all(|v| v.is_finite())
    });
    check(&mut f, bad.is_none(), || format!("non-finite term at step {}", bad.unwrap().step));
    let active = run.log.iter().all(|r| r.losses.adv_color > 0.0 && r.losses.pose_consistency >= 0.0 && r.losses.disc_alpha > 0.0);
    check(&mut f, active, || "a loss term of the full stack is missing".into());
    let alphas: Vec<f64> = run.log.iter().filter_map(|r| r.novel_alpha).collect();
    let mass = alphas.iter().sum::<f64>() / alphas.len().max(1) as f64;
    check(&mut f, alphas.len() == run.log.len(), || "novel-view alpha missing from the log".into());
    check(&mut f, (0.05..=0.95).contains(&mass), || format!("mean novel-view alpha {mass:.3}"));
    check(&mut f, audit.reads() == 0, || format!("ground-truth pose read {} times", audit.reads()));
    check(&mut f, took <= Duration::from_secs(30 * 60), || format!("took {took:?}"));
    verdict(8, "unsupervised smoke", &f, &format!("2000 steps finite, mean novel alpha {mass:.3}, pose reads 0, {:.0} s", took.as_secs_f64()));
}

/// Mean held-out PSNR on unseen instances after training in one regime.
fn regime_psnr(train: &[DatasetRecord<f32>], eval: &[DatasetRecord<f32>], regime: &str, seed: u64) -> f64 {
    // Reconstruction plus pose supervision: at this scale the adversarial and
    // consistency terms stall learning within the step budget for every regime.
    const STEPS: u64 = 3000;
    let mut cfg = TrainConfig::desk(32);
    cfg.sampling.num_coarse = 12;
    cfg.sampling.num_fine = 12;
    cfg.recon_patch = 12;
    cfg.recon_stride = 2.5;
    cfg.decay_rate = 1.0;
    cfg.weights = LossWeights { adv_color: 0.0, adv_alpha: 0.0, pose_consistency: 0.0, pose_supervised: 1.0, ..LossWeights::default() };
    cfg.seed = seed;
    cfg.max_steps = STEPS;
    match regime {
        "full" => {
            cfg.regime = Regime::Full;
            cfg.labeled_fraction = 1.0;
        }
        _ => {
            // 1% of 200 records is 2, one batch per epoch.
            cfg.regime = Regime::Weak;
            cfg.labeled_fraction = 0.01;
            if regime == "weak" {
                cfg.pretrain_epochs = STEPS / 5;
            } else {
                cfg.pretrain_epochs = STEPS;
                cfg.finetune = false;
            }
        }
    }
    let run = run_training(train, &cfg, None, None).unwrap();
    let model = TrainedModel::new(run.config.clone(), run.state.generator_params());
    let ecfg = EvalConfig { regime: regime.into(), ..EvalConfig::default() };
    evaluate_novel_views(&model, eval, &held_out_pairs(eval), &ecfg).unwrap().mean_psnr
}

#[test]
#[ignore = "nightly: about 80 minutes on one core"]
fn criterion_09_regime_trend() {
    let _guard = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let train_dir = tempfile::tempdir().unwrap();
    let eval_dir = tempfile::tempdir().unwrap();
    let specs = random_scene_specs(60, &mut rng(9));
    let sc = SyntheticConfig { image_size: 32, views_per_instance: 4, seed: 9, ..SyntheticConfig::default() };
    generate_synthetic_dataset(&specs[..50], &sc, train_dir.path()).unwrap();
    generate_synthetic_dataset(&specs[50..], &SyntheticConfig { seed: 10, ..sc }, eval_dir.path()).unwrap();
    let (train, _) = load_dataset::<f32>(&train_dir.path().join(MANIFEST_FILE)).unwrap();
    let (eval, _) = load_dataset::<f32>(&eval_dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(train.len(), 200);
    let mut ordered = 0;
    let mut rows = Vec::new();
    for seed in [1, 2, 3] {
        let full = regime_psnr(&train, &eval, "full", seed);
        let weak = regime_psnr(&train, &eval, "weak", seed);
        let few = regime_psnr(&train, &eval, "labeled-only", seed);
        ordered += usize::from(full >= weak && weak >= few);
        rows.push(format!("seed {seed}: {full:.2}/{weak:.2}/{few:.2}"));
    }
    let took = start.elapsed();
    let mut f = Vec::new();
    check(&mut f, ordered >= 2, || format!("ordering held for {ordered} of 3 seeds ({})", rows.join(", ")));
    check(&mut f, took <= Duration::from_secs(3 * 3600), || format!("took {took:?}"));
    verdict(9, "regime trend", &f, &format!("full/weak/labeled-only PSNR {}; {:.0} s", rows.join(", "), took.as_secs_f64()));
}

#[test]
fn criterion_10_metric_golden_values() {
    let mut f = Vec::new();
    let a = Image::filled(16, 16, 3, 0.5f64);
    let b = Image::filled(16, 16, 3, 0.6f64);
    let p = psnr(&a, &b).unwrap();
    check(&mut f, (p - 20.0).abs() < 1e-9, || format!("psnr at MSE 0.01 is {p}"));
    let mut r = rng(10);
    let img = Image::from_data(24, 24, 3, (0..24 * 24 * 3).map(|_| r.random::<f64>()).collect()).unwrap();
    let s = ssim(&img, &img).unwrap();
    check(&mut f, (s - 1.0).abs() < 1e-12, || format!("ssim of identical images {s}"));

    let dir = tempfile::tempdir().unwrap();
    let specs = random_scene_specs(3, &mut rng(11));
    let sc = SyntheticConfig { image_size: 32, views_per_instance: 3, seed: 11, ..SyntheticConfig::default() };
    generate_synthetic_dataset(&specs, &sc, dir.path()).unwrap();
    let (records, _) = load_dataset::<f64>(&dir.path().join(MANIFEST_FILE)).unwrap();
    let model = AnalyticModel::new(&specs, sc.sampling.clone());
    let report = evaluate_novel_views(&model, &records, &held_out_pairs(&records), &EvalConfig::default()).unwrap();
    let worst = report.records.iter().map(|s| s.psnr).fold(f64::INFINITY, f64::min);
    check(&mut f, worst >= 40.0, || format!("analytic field scores {worst:.2} dB"));
    verdict(10, "metric golden values", &f, &format!("psnr {p}, ssim {s}, analytic field ≥ {worst:.1} dB on {} views", report.records.len()));
}

#[test]
fn criterion_11_reproducibility() {
    let mut f = Vec::new();
    let dir = tempfile::tempdir().unwrap();
    let specs = random_scene_specs(4, &mut rng(12));
    let sc = SyntheticConfig { image_size: 32, views_per_instance: 2, seed: 12, ..SyntheticConfig::default() };
    let written = generate_synthetic_dataset(&specs, &sc, dir.path()).unwrap();
    let manifest = dir.path().join(MANIFEST_FILE);
    let parsed = read_manifest_entries::<f32>(&manifest).unwrap();
    check(&mut f, parsed == written, || "manifest entries differ after parsing".into());
    let copy = dir.path().join("copy.tsv");
    write_manifest(&copy, &parsed).unwrap();
    check(&mut f, std::fs::read(&copy).unwrap() == std::fs::read(&manifest).unwrap(), || "manifest bytes differ after rewrite".into());

    let (records, _) = load_dataset::<f32>(&manifest).unwrap();
    let mut cfg = TrainConfig::desk(32);
    cfg.sampling.num_coarse = 8;
    cfg.sampling.num_fine = 8;
    cfg.recon_patch = 8;
    cfg.discriminator.patch_size = 8;
    cfg.max_steps = 10;
    cfg.epochs = 5;
    let out_a = tempfile::tempdir().unwrap();
    let out_b = tempfile::tempdir().unwrap();
    let a = run_training(&records, &cfg, Some(out_a.path()), None).unwrap();
    let b = run_training(&records, &cfg, Some(out_b.path()), None).unwrap();
    let logs_match = a.log.len() == 10 && loss_lines(&a.log) == loss_lines(&b.log);
    check(&mut f, logs_match, || "10-step loss logs differ".into());
    let read_back = monoview::training::read_log(&out_a.path().join(monoview::training::LOG_FILE)).unwrap();
    check(&mut f, loss_lines(&read_back) == loss_lines(&a.log), || "NDJSON log does not read back exactly".into());

    let bits = |s: &ParamStore<f32>| s.iter().map(|(k, t)| (k.clone(), t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())).collect::<Vec<_>>();
    check(&mut f, bits(&a.state.params) == bits(&b.state.params), || "final parameters differ".into());
    let meta = BTreeMap::from([("step".to_string(), "10".to_string())]);
    let (back, m) = checkpoint::from_bytes::<f32>(&checkpoint::to_bytes(&a.state.params, &meta).unwrap()).unwrap();
    check(&mut f, bits(&back) == bits(&a.state.params) && m == meta, || "checkpoint bytes do not round trip".into());
    let (state, _) = TrainState::<f32>::load(&out_a.path().join(STATE_FILE)).unwrap();
    check(&mut f, bits(&state.params) == bits(&a.state.params) && state.step == 10, || "state file does not round trip".into());
    verdict(11, "reproducibility", &f, "identical 10-step logs and parameters; manifest, checkpoint and state round trips bit-exact");
}
