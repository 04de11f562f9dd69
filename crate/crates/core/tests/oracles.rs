//! Independent oracles: closed forms, brute-force references and central
//! finite differences.

use std::rc::Rc;

use monoview::field::{field_forward, init_field_params, FieldConfig, FieldInputs, RadianceSample, CODE_DIM};
use monoview::geometry::{fit_offset_rotation, generate_rays, sample_pose_prior, CameraPose, Intrinsics, PosePrior};
use monoview::math::Mat3;
use monoview::networks::{
    discriminate, encoder_forward, init_discriminator_params, init_encoder_params, ChannelMode, DiscriminatorConfig, EncoderConfig,
};
use monoview::rendering::{composite, hierarchical_resample, pose_rays, render_values, stratified_sample, FnField, SamplingConfig};
use monoview::EncodingConfig;
use monoview_autodiff::gradcheck::probe_gradients;
use monoview_autodiff::{Bound, Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect())
}

/// Analytic gradients of `f` with respect to named parameter entries against
/// central differences. Returns `(analytic, numeric)` pairs.
fn param_fd<F>(store: &ParamStore<f64>, probes: &[(String, usize)], eps: f64, f: F) -> Vec<(f64, f64)>
where
    F: for<'g> Fn(&'g Graph<f64>, &Bound<'g, f64>) -> Var<'g, f64>,
{
    let g = Graph::new();
    let p = store.bind(&g, true);
    let grads = g.backward(f(&g, &p)).params();
    let eval = |s: &ParamStore<f64>| {
        let g = Graph::new();
        let p = s.bind(&g, false);
        f(&g, &p).value().item()
    };
    probes
        .iter()
        .map(|(name, j)| {
            let mut plus = store.clone();
            let mut minus = store.clone();
            plus.get_mut(name).unwrap().data_mut()[*j] += eps;
            minus.get_mut(name).unwrap().data_mut()[*j] -= eps;
            (grads[name].data()[*j], (eval(&plus) - eval(&minus)) / (2.0 * eps))
        })
        .collect()
}

fn assert_close_grads(pairs: &[(f64, f64)], tol: f64, floor: f64, what: &str) {
    for (k, (a, n)) in pairs.iter().enumerate() {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        assert!(rel <= tol, "{what} probe {k}: analytic {a} vs numeric {n} (rel {rel})");
    }
}

fn probes_for(store: &ParamStore<f64>, per_tensor: usize, r: &mut ChaCha8Rng) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for (name, t) in store.iter() {
        for _ in 0..per_tensor {
            out.push((name.clone(), r.random_range(0..t.len())));
        }
    }
    out
}

#[test]
fn homogeneous_medium_matches_beer_lambert() {
    for (sigma, jitter) in [(0.3, false), (1.0, false), (2.5, true)] {
        let cfg = SamplingConfig { near: 0.1, far: 4.0, num_coarse: 256, num_fine: 0, jitter };
        let field = FnField(move |_p: [f64; 3], _d: [f64; 3]| RadianceSample { density: sigma, rgb: [0.2, 0.4, 0.6] });
        let origins = [0.0, 0.0, 0.0, 0.1, -0.2, 0.0];
        let dirs = [0.0, 0.0, 1.0, 0.0, 0.6, 0.8];
        let out = render_values(&field, &origins, &dirs, &cfg, &mut rng(1)).unwrap();
        let want = 1.0 - (-sigma * (cfg.far - cfg.near)).exp();
        for a in &out.alpha {
            assert!((a - want).abs() < 1e-3, "sigma {sigma}: alpha {a} vs {want}");
        }
        for (c, a) in out.rgb.iter().zip(&out.alpha) {
            assert!((c[1] - 0.4 * a).abs() < 1e-12);
        }
    }
}

#[test]
fn composite_gradients_match_finite_differences() {
    let mut r = rng(2);
    for trial in 0..4 {
        let s = 8;
        let mut t: Vec<f64> = (0..s).map(|_| r.random_range(0.5..3.5)).collect();
        t.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let t: Rc<[f64]> = t.into();
        let sigma = random_tensor(&[s], 0.0, 3.0, &mut r);
        let rgb = random_tensor(&[s, 3], 0.0, 1.0, &mut r);
        let proj = random_tensor(&[1, 5], -1.0, 1.0, &mut r);
        let probes: Vec<(usize, usize)> = (0..s).map(|j| (0, j)).chain((0..3 * s).map(|j| (1, j))).collect();
        let res = probe_gradients(&[sigma, rgb], &probes, 1e-6, |g, v| {
            let out = composite(v[0], v[1], t.clone(), s, 4.0);
            out.mul(g.constant(proj.clone())).sum()
        });
        for p in &res {
            assert!(p.relative_error(1e-6) <= 1e-4, "trial {trial}: {p:?}");
        }
    }
}

/// Brute-force inverse CDF on a dense grid; returns the probability of each
/// histogram cell (each bin split in halves).
fn oracle_cell_probabilities(edges: &[f64], weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    let grid = 200_000;
    let (lo, hi) = (edges[0], *edges.last().unwrap());
    let mut cells = vec![0.0; 2 * weights.len()];
    for k in 0..grid {
        let x = lo + (hi - lo) * (k as f64 + 0.5) / grid as f64;
        let bin = edges.windows(2).position(|w| x >= w[0] && x < w[1]).unwrap_or(weights.len() - 1);
        let half = usize::from(x >= 0.5 * (edges[bin] + edges[bin + 1]));
        let density = weights[bin] / total / (edges[bin + 1] - edges[bin]);
        cells[2 * bin + half] += density * (hi - lo) / grid as f64;
    }
    cells
}

#[test]
fn hierarchical_samples_pass_chi_square_against_brute_force_inversion() {
    let mut r = rng(3);
    for trial in 0..5 {
        let bins = 12;
        let mut edges: Vec<f64> = (0..=bins).map(|k| 0.5 + 3.0 * k as f64 / bins as f64).collect();
        // uneven bins exercise the width handling
        for e in edges[1..bins].iter_mut() {
            *e += r.random_range(-0.05..0.05);
        }
        let weights: Vec<f64> = (0..bins).map(|_| r.random_range(0.01..1.0)).collect();
        let probs = oracle_cell_probabilities(&edges, &weights);
        let draws = 100_000;
        let mut counts = vec![0.0; 2 * bins];
        for _ in 0..draws {
            let x = hierarchical_resample(&edges, &weights, 1, Some(&mut r))[0];
            let bin = edges.windows(2).position(|w| x >= w[0] && x < w[1]).unwrap_or(bins - 1);
            let half = usize::from(x >= 0.5 * (edges[bin] + edges[bin + 1]));
            counts[2 * bin + half] += 1.0;
        }
        let stat: f64 = counts
            .iter()
            .zip(&probs)
            .map(|(o, p)| {
                let e = p * draws as f64;
                (o - e) * (o - e) / e
            })
            .sum();
        let p_value = 1.0 - ChiSquared::new((2 * bins - 1) as f64).unwrap().cdf(stat);
        assert!(p_value > 0.01, "trial {trial}: chi-square {stat}, p = {p_value}");
    }
}

#[test]
fn stratified_samples_are_uniform_within_bins() {
    let cfg = SamplingConfig { near: 0.1, far: 4.0, num_coarse: 16, num_fine: 0, jitter: true };
    let rays = stratified_sample::<f64, _>(&cfg, 4000, &mut rng(4));
    let step = (cfg.far - cfg.near) / 16.0;
    let mut mean = 0.0;
    let mut sq = 0.0;
    let mut n = 0.0;
    for ts in &rays {
        for (k, t) in ts.iter().enumerate() {
            let f = (t - cfg.near - k as f64 * step) / step;
            assert!((0.0..1.0).contains(&f));
            mean += f;
            sq += f * f;
            n += 1.0;
        }
    }
    mean /= n;
    let var = sq / n - mean * mean;
    // 64 000 draws of U(0, 1): standard error of the mean ≈ 0.0011
    assert!((mean - 0.5).abs() < 0.006, "mean {mean}");
    assert!((var - 1.0 / 12.0).abs() < 0.003, "variance {var}");
}

#[test]
fn pose_prior_monte_carlo_moments() {
    let prior = PosePrior::<f64>::default();
    let mut r = rng(5);
    let n = 20_000;
    let (mut az, mut el, mut tz) = (0.0, 0.0, 0.0);
    for _ in 0..n {
        let p = sample_pose_prior(&prior, &mut r).unwrap();
        let a = p.azimuth().rem_euclid(2.0 * std::f64::consts::PI);
        let e = p.elevation();
        assert!(e >= prior.elevation_range[0] - 1e-12 && e <= prior.elevation_range[1] + 1e-12);
        let z = p.translation[2];
        assert!((1.7 - 1e-12..=1.9 + 1e-12).contains(&z));
        az += a;
        el += e;
        tz += z;
    }
    let (az, el, tz) = (az / n as f64, el / n as f64, tz / n as f64);
    assert!((az - std::f64::consts::PI).abs() < 0.05, "azimuth mean {az}");
    let mid_el = 0.5 * (prior.elevation_range[0] + prior.elevation_range[1]);
    assert!((el - mid_el).abs() < 0.01, "elevation mean {el}");
    assert!((tz - 1.8).abs() < 0.002, "depth mean {tz}");
}

#[test]
fn rays_reproject_to_their_pixels() {
    let mut r = rng(6);
    let intr = Intrinsics::new(70.4, 70.4, 31.5, 31.5, 64, 64).unwrap();
    for _ in 0..50 {
        let pose = sample_pose_prior(&PosePrior::default(), &mut r).unwrap();
        let pixels: Vec<[f64; 2]> = (0..20).map(|_| [r.random_range(0.0..63.0), r.random_range(0.0..63.0)]).collect();
        let rays = generate_rays(&pose, &intr, &pixels).unwrap();
        let rigid = pose.rigid();
        for ((o, d), px) in rays.origins.iter().zip(&rays.directions).zip(&pixels) {
            let t = r.random_range(0.5..3.0);
            let world = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
            let uv = intr.project(&rigid.to_camera(&world));
            assert!((uv[0] - px[0]).abs() < 0.5 && (uv[1] - px[1]).abs() < 0.5);
            assert!((uv[0] - px[0]).abs() < 1e-9 && (uv[1] - px[1]).abs() < 1e-9);
        }
        assert!(pose.rotation().orthonormality_error() < 1e-6);
    }
}

fn yaw(deg: f64) -> Mat3<f64> {
    let a = deg.to_radians();
    Mat3([[a.cos(), 0.0, a.sin()], [0.0, 1.0, 0.0], [-a.sin(), 0.0, a.cos()]])
}

#[test]
fn planted_offset_is_recovered() {
    let mut r = rng(7);
    let gt: Vec<CameraPose<f64>> = (0..30).map(|_| sample_pose_prior(&PosePrior::default(), &mut r).unwrap()).collect();
    // O·R_pred = R_gt with O a 30° yaw, i.e. predicted azimuths lag by 30°
    let pred: Vec<_> = gt.iter().map(|p| CameraPose::from_angles(p.azimuth() - 30f64.to_radians(), p.elevation(), p.translation).unwrap()).collect();
    let fit = fit_offset_rotation(&pred, &gt).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            assert!((fit.rotation.0[i][j] - yaw(30.0).0[i][j]).abs() < 1e-6);
        }
    }
    assert!(fit.residual < 1e-12);

    // with 1° angular noise the fit stays within a degree
    let noisy: Vec<_> = pred
        .iter()
        .map(|p| {
            let mut n = || r.random_range(-1.0f64..1.0).to_radians();
            CameraPose::from_angles(p.azimuth() + n(), p.elevation() + n(), p.translation).unwrap()
        })
        .collect();
    let fit = fit_offset_rotation(&noisy, &gt).unwrap();
    assert!(fit.rotation.geodesic_distance(&yaw(30.0)) < 1f64.to_radians());
}

#[test]
fn pose_ray_gradients_match_finite_differences() {
    let mut r = rng(8);
    let intr = Intrinsics::new(40.0, 42.0, 15.5, 16.0, 32, 32).unwrap();
    let poses: Vec<f64> = (0..2).flat_map(|_| sample_pose_prior(&PosePrior::default(), &mut r).unwrap().params()).collect();
    let pixels: Vec<Vec<[f64; 2]>> = (0..2).map(|_| (0..5).map(|_| [r.random_range(0.0..31.0), r.random_range(0.0..31.0)]).collect()).collect();
    let wo = random_tensor(&[10, 3], -1.0, 1.0, &mut r);
    let wd = random_tensor(&[10, 3], -1.0, 1.0, &mut r);
    let probes: Vec<(usize, usize)> = (0..14).map(|j| (0, j)).collect();
    let res = probe_gradients(&[Tensor::from_parts([2, 7], poses)], &probes, 1e-6, |g, v| {
        let (o, d, _) = pose_rays(v[0], &pixels, &[intr, intr]).unwrap();
        o.mul(g.constant(wo.clone())).sum().add(d.mul(g.constant(wd.clone())).sum())
    });
    for p in &res {
        assert!(p.relative_error(1e-6) <= 1e-5, "{p:?}");
    }
}

fn small_field() -> FieldConfig {
    FieldConfig {
        mlp_depth: 3,
        mlp_width: 16,
        color_width: 8,
        position_encoding: EncodingConfig { num_frequencies: 3, include_raw_input: true, anneal_duration: 10 },
        direction_frequencies: 2,
        ..FieldConfig::default()
    }
}

#[test]
fn field_parameter_gradients_match_finite_differences() {
    let mut r = rng(9);
    let cfg = small_field();
    let store = init_field_params::<f64, _>(&cfg, &mut r);
    let n = 12;
    let points = random_tensor(&[n, 3], -0.35, 0.35, &mut r);
    let dirs = {
        let d = random_tensor(&[3, 3], -1.0, 1.0, &mut r);
        let mut v = d.data().to_vec();
        for row in v.chunks_mut(3) {
            let l = (row[0] * row[0] + row[1] * row[1] + row[2] * row[2]).sqrt();
            row.iter_mut().for_each(|x| *x /= l);
        }
        Tensor::from_parts([3, 3], v)
    };
    let zs = random_tensor(&[2, CODE_DIM], -1.0, 1.0, &mut r);
    let za = random_tensor(&[2, CODE_DIM], -1.0, 1.0, &mut r);
    let wd = random_tensor(&[n], -1.0, 1.0, &mut r);
    let wc = random_tensor(&[n, 3], -1.0, 1.0, &mut r);
    let sample_ray: Rc<[usize]> = (0..n).map(|i| i % 3).collect();
    let ray_item: Rc<[usize]> = vec![0, 1, 1].into();
    let symmetric: Rc<[bool]> = vec![true, false].into();
    let probes = probes_for(&store, 3, &mut r);
    let pairs = param_fd(&store, &probes, 1e-6, |g, p| {
        let inputs = FieldInputs {
            points: g.constant(points.clone()),
            sample_ray: sample_ray.clone(),
            directions: g.constant(dirs.clone()),
            ray_item: ray_item.clone(),
            shape_codes: g.constant(zs.clone()),
            appearance_codes: g.constant(za.clone()),
            symmetric: symmetric.clone(),
        };
        let (d, c) = field_forward(&cfg, p, &inputs, 0.6).unwrap();
        d.mul(g.constant(wd.clone())).sum().add(c.mul(g.constant(wc.clone())).sum())
    });
    assert_close_grads(&pairs, 1e-4, 1e-6, "field");
}

#[test]
fn encoder_parameter_gradients_match_finite_differences() {
    let mut r = rng(10);
    let cfg = EncoderConfig::tiny(16);
    let store = init_encoder_params::<f64, _>(&cfg, &mut r);
    let input = random_tensor(&[2, cfg.input_channels(), 16, 16], 0.0, 1.0, &mut r);
    let wc = random_tensor(&[2, CODE_DIM], -1.0, 1.0, &mut r);
    let wp = random_tensor(&[2, 7], -1.0, 1.0, &mut r);
    let probes = probes_for(&store, 1, &mut r);
    let pairs = param_fd(&store, &probes, 1e-6, |g, p| {
        let out = encoder_forward(&cfg, p, g.constant(input.clone())).unwrap();
        out.shape_codes.add(out.appearance_codes).mul(g.constant(wc.clone())).sum().add(out.pose.mul(g.constant(wp.clone())).sum())
    });
    assert_close_grads(&pairs, 1e-4, 1e-6, "encoder");
}

#[test]
fn discriminator_parameter_gradients_match_finite_differences() {
    let mut r = rng(11);
    let cfg = DiscriminatorConfig { patch_size: 16, ..DiscriminatorConfig::default() };
    for mode in [ChannelMode::Color, ChannelMode::Alpha] {
        let store = init_discriminator_params::<f64, _>(&cfg, mode, &mut r);
        let patches = random_tensor(&[2, mode.channels(), 16, 16], 0.0, 1.0, &mut r);
        let probes = probes_for(&store, 2, &mut r);
        let pairs = param_fd(&store, &probes, 1e-6, |g, p| {
            // a fixed dropout mask per evaluation keeps the function deterministic
            let mut dropout = rng(99);
            discriminate(g.constant(patches.clone()), mode, &cfg, p, Some(&mut dropout)).unwrap().sigmoid().sum()
        });
        assert_close_grads(&pairs, 1e-4, 1e-6, mode.prefix());
    }
}
