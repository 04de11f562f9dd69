//! Volume rendering: stratified and hierarchical ray sampling, compositing
//! (forward and differentiable), ray construction from a differentiable pose,
//! and patch rendering.

use std::rc::Rc;

use monoview_autodiff::{lit, Graph, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::RadianceSample;
use crate::geometry::{generate_rays_rigid, Intrinsics, RigidPose};
use crate::math::Vec3;

/// Opacity floor used when normalising the expected depth.
pub const DEPTH_ALPHA_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub near: f64,
    pub far: f64,
    pub num_coarse: usize,
    /// 0 disables the hierarchical pass.
    pub num_fine: usize,
    pub jitter: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { near: 0.1, far: 4.0, num_coarse: 64, num_fine: 128, jitter: true }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0 && self.near < self.far && self.far.is_finite()) {
            return Err(Error::Config(format!("need 0 < near < far, got {} and {}", self.near, self.far)));
        }
        if self.num_coarse == 0 {
            return Err(Error::Config("at least one coarse sample per ray is required".into()));
        }
        Ok(())
    }

    pub fn samples_per_ray(&self) -> usize {
        self.num_coarse + self.num_fine
    }

    /// Edges of the coarse bins, `num_coarse + 1` values from near to far.
    pub fn coarse_bin_edges<T: Scalar>(&self) -> Vec<T> {
        let step = (self.far - self.near) / self.num_coarse as f64;
        (0..=self.num_coarse).map(|i| lit(self.near + step * i as f64)).collect()
    }
}

/// Per-ray results; `weights[r]` holds the compositing weight of each sample.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput<T> {
    pub rgb: Vec<Vec3<T>>,
    pub alpha: Vec<T>,
    pub depth: Vec<T>,
    pub weights: Vec<Vec<T>>,
}

impl<T: Scalar> RenderOutput<T> {
    fn with_capacity(n: usize) -> Self {
        Self { rgb: Vec::with_capacity(n), alpha: Vec::with_capacity(n), depth: Vec::with_capacity(n), weights: Vec::with_capacity(n) }
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    fn extend(&mut self, other: RenderOutput<T>) {
        self.rgb.extend(other.rgb);
        self.alpha.extend(other.alpha);
        self.depth.extend(other.depth);
        self.weights.extend(other.weights);
    }
}

/// A `height × width` grid of pixels `offset + (j, i)·stride`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub height: usize,
    pub width: usize,
    pub stride: f64,
    /// `(x, y)` of the first pixel.
    pub offset: [f64; 2],
}

impl PatchSpec {
    /// Whole image, one ray per pixel.
    pub fn full<T>(intr: &Intrinsics<T>) -> Self {
        Self { height: intr.height, width: intr.width, stride: 1.0, offset: [0.0, 0.0] }
    }

    /// Pixel coordinates in row-major order.
    pub fn pixels<T: Scalar>(&self, intr: &Intrinsics<T>) -> Result<Vec<[T; 2]>> {
        if self.height == 0 || self.width == 0 || !(self.stride > 0.0) {
            return Err(Error::Argument(format!("degenerate patch {self:?}")));
        }
        let last_x = self.offset[0] + self.stride * (self.width - 1) as f64;
        let last_y = self.offset[1] + self.stride * (self.height - 1) as f64;
        let eps = 1e-9;
        if self.offset[0] < -eps
            || self.offset[1] < -eps
            || last_x > (intr.width - 1) as f64 + eps
            || last_y > (intr.height - 1) as f64 + eps
        {
            return Err(Error::Argument(format!(
                "patch {self:?} exceeds the {}×{} image",
                intr.width, intr.height
            )));
        }
        let clamp = |v: f64, hi: usize| v.clamp(0.0, (hi - 1) as f64);
        let mut out = Vec::with_capacity(self.height * self.width);
        for i in 0..self.height {
            for j in 0..self.width {
                out.push([
                    lit(clamp(self.offset[0] + self.stride * j as f64, intr.width)),
                    lit(clamp(self.offset[1] + self.stride * i as f64, intr.height)),
                ]);
            }
        }
        Ok(out)
    }

    /// Stride that spreads `size` samples over the whole `extent`.
    pub fn spanning_stride(extent: usize, size: usize) -> f64 {
        if size <= 1 {
            1.0
        } else {
            (extent - 1) as f64 / (size - 1) as f64
        }
    }

    /// Random placement of a `size × size` patch with the given stride.
    pub fn random<T, R: Rng + ?Sized>(intr: &Intrinsics<T>, size: usize, stride: f64, rng: &mut R) -> Self {
        let span = stride * (size.max(1) - 1) as f64;
        let free_x = ((intr.width - 1) as f64 - span).max(0.0);
        let free_y = ((intr.height - 1) as f64 - span).max(0.0);
        let pick = |free: f64, rng: &mut R| if free > 0.0 { (rng.random::<f64>() * (free + 1.0)).floor().min(free) } else { 0.0 };
        let ox = pick(free_x, rng);
        let oy = pick(free_y, rng);
        Self { height: size, width: size, stride, offset: [ox, oy] }
    }
}

/// One sample per coarse bin for each ray: uniform within the bin with
/// jitter, the bin midpoint without.
pub fn stratified_sample<T: Scalar, R: Rng + ?Sized>(cfg: &SamplingConfig, ray_count: usize, rng: &mut R) -> Vec<Vec<T>> {
    let step = (cfg.far - cfg.near) / cfg.num_coarse as f64;
    (0..ray_count)
        .map(|_| {
            (0..cfg.num_coarse)
                .map(|i| {
                    let u = if cfg.jitter { rng.random::<f64>() } else { 0.5 };
                    lit(cfg.near + step * (i as f64 + u))
                })
                .collect()
        })
        .collect()
}

/// Inverse-transform sampling from the piecewise-constant density over
/// `bin_edges` proportional to `weights`. Uses stratified uniforms (jittered
/// when `rng` is given, midpoints otherwise), so the output is sorted.
/// All-zero weights fall back to a uniform density.
pub fn hierarchical_resample<T: Scalar, R: Rng + ?Sized>(
    bin_edges: &[T],
    weights: &[T],
    num_fine: usize,
    rng: Option<&mut R>,
) -> Vec<T> {
    assert_eq!(bin_edges.len(), weights.len() + 1, "one weight per bin");
    let mut w: Vec<f64> = weights.iter().map(|v| v.to_f64().unwrap().max(0.0)).collect();
    let total: f64 = w.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        w.iter_mut().for_each(|v| *v = 1.0);
    }
    let total: f64 = w.iter().sum();
    let mut cdf = Vec::with_capacity(w.len() + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for v in &w {
        acc += v / total;
        cdf.push(acc);
    }
    let edges: Vec<f64> = bin_edges.iter().map(|v| v.to_f64().unwrap()).collect();
    let mut rng = rng;
    let mut out = Vec::with_capacity(num_fine);
    let mut bin = 0;
    for j in 0..num_fine {
        let jitter = match rng.as_deref_mut() {
            Some(r) => r.random::<f64>(),
            None => 0.5,
        };
        let u = ((j as f64 + jitter) / num_fine as f64).min(acc);
        while bin + 1 < w.len() && (cdf[bin + 1] <= u || w[bin] == 0.0) {
            bin += 1;
        }
        let mass = cdf[bin + 1] - cdf[bin];
        let frac = if mass > 0.0 { ((u - cdf[bin]) / mass).clamp(0.0, 1.0) } else { 0.5 };
        out.push(lit(edges[bin] + frac * (edges[bin + 1] - edges[bin])));
    }
    out
}

/// Compositing of one ray given densities, colours and sample distances
/// (non-decreasing). Returns `(rgb, alpha, depth, weights)`.
pub fn composite_values<T: Scalar>(sigma: &[T], rgb: &[Vec3<T>], t: &[T], far: T) -> (Vec3<T>, T, T, Vec<T>) {
    let n = t.len();
    let mut weights = Vec::with_capacity(n);
    let mut log_trans = T::zero();
    let mut color = [T::zero(); 3];
    let mut alpha = T::zero();
    let mut depth_acc = T::zero();
    for i in 0..n {
        let delta = if i + 1 < n { t[i + 1] - t[i] } else { far - t[i] };
        let tau = sigma[i] * delta;
        let w = log_trans.exp() * (-(-tau).exp_m1());
        log_trans = log_trans - tau;
        for k in 0..3 {
            color[k] += w * rgb[i][k];
        }
        alpha += w;
        depth_acc += w * t[i];
        weights.push(w);
    }
    let depth = depth_acc / alpha.max(lit(DEPTH_ALPHA_FLOOR));
    (color, alpha, depth, weights)
}

/// Composites a single ray; distances must be strictly increasing.
pub fn composite_ray<T: Scalar>(samples: &[RadianceSample<T>], t: &[T], far: T) -> Result<RenderOutput<T>> {
    if samples.len() != t.len() {
        return Err(Error::Argument(format!("{} samples but {} distances", samples.len(), t.len())));
    }
    if t.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Argument("sample distances must be strictly increasing".into()));
    }
    if samples.iter().any(|s| !(s.density >= T::zero())) {
        return Err(Error::Argument("densities must be non-negative".into()));
    }
    let sigma: Vec<T> = samples.iter().map(|s| s.density).collect();
    let rgb: Vec<Vec3<T>> = samples.iter().map(|s| s.rgb).collect();
    let (c, a, d, w) = composite_values(&sigma, &rgb, t, far);
    Ok(RenderOutput { rgb: vec![c], alpha: vec![a], depth: vec![d], weights: vec![w] })
}

/// Differentiable compositing of `R` rays with `S` samples each. `sigma` is
/// `[R·S]`, `rgb` is `[R·S, 3]`, `t` holds the (constant) distances. Returns
/// `[R, 5]` rows `(r, g, b, alpha, depth)`.
pub fn composite<'g, T: Scalar>(sigma: Var<'g, T>, rgb: Var<'g, T>, t: Rc<[T]>, samples: usize, far: T) -> Var<'g, T> {
    let sv = sigma.value();
    let cv = rgb.value();
    let n = sv.len();
    assert_eq!(n, t.len(), "one distance per sample");
    assert_eq!(cv.shape(), [n, 3], "colours must be [N, 3]");
    assert!(samples > 0 && n % samples == 0, "sample count must divide the batch");
    let rays = n / samples;
    let floor = lit::<T>(DEPTH_ALPHA_FLOOR);
    let mut out = Vec::with_capacity(rays * 5);
    for r in 0..rays {
        let span = r * samples..(r + 1) * samples;
        let colours: Vec<Vec3<T>> = cv.data()[3 * span.start..3 * span.end].chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        let (c, a, d, _) = composite_values(&sv.data()[span.clone()], &colours, &t[span], far);
        out.extend_from_slice(&[c[0], c[1], c[2], a, d]);
    }
    let (sid, cid) = (sigma.id(), rgb.id());
    sigma.graph().custom(&[sigma, rgb], Tensor::from_parts([rays, 5], out), move |out_id, g, vals, grads| {
        let sv = vals[sid].clone();
        let cv = vals[cid].clone();
        let ov = vals[out_id].clone();
        let want_s = grads.wants(sid);
        let want_c = grads.wants(cid);
        let mut gs = vec![T::zero(); if want_s { n } else { 0 }];
        let mut gc = vec![T::zero(); if want_c { 3 * n } else { 0 }];
        let mut w = vec![T::zero(); samples];
        let mut trans_next = vec![T::zero(); samples];
        let mut gw = vec![T::zero(); samples];
        for r in 0..rays {
            let base = r * samples;
            let grow = &g.data()[5 * r..5 * r + 5];
            let (a, d) = (ov.data()[5 * r + 3], ov.data()[5 * r + 4]);
            let a_eff = a.max(floor);
            let d_term = if a > floor { d } else { T::zero() };
            let mut log_trans = T::zero();
            for i in 0..samples {
                let k = base + i;
                let delta = if i + 1 < samples { t[k + 1] - t[k] } else { far - t[k] };
                let tau = sv.data()[k] * delta;
                w[i] = log_trans.exp() * (-(-tau).exp_m1());
                log_trans = log_trans - tau;
                trans_next[i] = log_trans.exp();
                let c = &cv.data()[3 * k..3 * k + 3];
                gw[i] = grow[0] * c[0] + grow[1] * c[1] + grow[2] * c[2] + grow[3] + grow[4] * (t[k] - d_term) / a_eff;
                if want_c {
                    for ch in 0..3 {
                        gc[3 * k + ch] = w[i] * grow[ch];
                    }
                }
            }
            if want_s {
                let mut tail = T::zero();
                for i in (0..samples).rev() {
                    let k = base + i;
                    let delta = if i + 1 < samples { t[k + 1] - t[k] } else { far - t[k] };
                    gs[k] = delta * (gw[i] * trans_next[i] - tail);
                    tail += gw[i] * w[i];
                }
            }
        }
        if want_s {
            grads.accumulate(sid, Tensor::from_parts(vals[sid].shape().to_vec(), gs));
        }
        if want_c {
            grads.accumulate(cid, Tensor::from_parts([n, 3], gc));
        }
    })
}

/// `R(ca, sa, ce, se) = R_az · R_el` and its partial derivatives with
/// respect to the four entries.
fn rotation_and_partials<T: Scalar>(ca: T, sa: T, ce: T, se: T) -> ([[T; 3]; 3], [[[T; 3]; 3]; 4]) {
    let (z, o) = (T::zero(), T::one());
    let r = [[ca, -sa * se, sa * ce], [z, ce, se], [-sa, -ca * se, ca * ce]];
    let d_ca = [[o, z, z], [z, z, z], [z, -se, ce]];
    let d_sa = [[z, -se, ce], [z, z, z], [-o, z, z]];
    let d_ce = [[z, z, sa], [z, o, z], [z, z, ca]];
    let d_se = [[z, -sa, z], [z, z, o], [z, -ca, z]];
    (r, [d_ca, d_sa, d_ce, d_se])
}

fn mat_vec<T: Scalar>(m: &[[T; 3]; 3], v: &[T]) -> Vec3<T> {
    std::array::from_fn(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

/// Rays of every batch item from a differentiable pose `[B, 7]` (unit-norm
/// rotation pairs). `pixels[b]` lists the pixels of item `b`. Returns
/// `(origins [R, 3], directions [R, 3], ray_item)`.
pub fn pose_rays<'g, T: Scalar>(
    pose: Var<'g, T>,
    pixels: &[Vec<[T; 2]>],
    intrinsics: &[Intrinsics<T>],
) -> Result<(Var<'g, T>, Var<'g, T>, Rc<[usize]>)> {
    let pv = pose.value();
    let items = pixels.len();
    if pv.shape() != [items, 7] || intrinsics.len() != items {
        return Err(Error::Argument(format!("pose must be [{items}, 7] with one intrinsics per item")));
    }
    let mut cam_dirs = Vec::new();
    let mut ray_item = Vec::new();
    for (b, (px, intr)) in pixels.iter().zip(intrinsics).enumerate() {
        for &[u, v] in px {
            if !intr.contains(u, v) {
                return Err(Error::PixelOutOfBounds {
                    x: u.to_f64().unwrap(),
                    y: v.to_f64().unwrap(),
                    width: intr.width,
                    height: intr.height,
                });
            }
            cam_dirs.push(crate::math::normalize(&intr.backproject(u, v)));
            ray_item.push(b);
        }
    }
    let rays = ray_item.len();
    let mut data = Vec::with_capacity(rays * 6);
    for (c, &b) in cam_dirs.iter().zip(&ray_item) {
        let p = &pv.data()[7 * b..7 * b + 7];
        let (r, _) = rotation_and_partials(p[0], p[1], p[2], p[3]);
        let o = mat_vec(&r, &p[4..7]);
        let d = mat_vec(&r, c);
        data.extend_from_slice(&[-o[0], -o[1], -o[2], d[0], d[1], d[2]]);
    }
    let ray_item: Rc<[usize]> = ray_item.into();
    let items_of_ray = ray_item.clone();
    let pid = pose.id();
    let packed = pose.graph().custom(&[pose], Tensor::from_parts([rays, 6], data), move |_, g, vals, grads| {
        let pv = vals[pid].clone();
        let slot = grads.slot(pid, vals);
        for (ray, (c, &b)) in cam_dirs.iter().zip(items_of_ray.iter()).enumerate() {
            let p = &pv.data()[7 * b..7 * b + 7];
            let go = &g.data()[6 * ray..6 * ray + 3];
            let gd = &g.data()[6 * ray + 3..6 * ray + 6];
            let (r, partials) = rotation_and_partials(p[0], p[1], p[2], p[3]);
            for (q, dr) in partials.iter().enumerate() {
                let dd = mat_vec(dr, c);
                let dov = mat_vec(dr, &p[4..7]);
                slot[7 * b + q] += gd[0] * dd[0] + gd[1] * dd[1] + gd[2] * dd[2] - (go[0] * dov[0] + go[1] * dov[1] + go[2] * dov[2]);
            }
            for j in 0..3 {
                slot[7 * b + 4 + j] -= r[0][j] * go[0] + r[1][j] * go[1] + r[2][j] * go[2];
            }
        }
    });
    Ok((packed.slice_cols(0, 3), packed.slice_cols(3, 6), ray_item))
}

/// Forward-only field access used for sample placement and inference.
pub trait FieldValues<T: Scalar> {
    /// `points` is `[N·3]`, `directions` `[R·3]`; returns densities `[N]`
    /// and colours `[N·3]`.
    fn evaluate(&self, points: &[T], directions: &[T], sample_ray: &[usize]) -> Result<(Vec<T>, Vec<T>)>;
}

/// Differentiable field access on a graph.
pub trait VolumeField<'g, T: Scalar>: FieldValues<T> {
    /// Returns densities `[N]` and colours `[N, 3]`.
    fn query(&self, points: Var<'g, T>, directions: Var<'g, T>, sample_ray: Rc<[usize]>) -> Result<(Var<'g, T>, Var<'g, T>)>;
}

fn ray_points<T: Scalar>(origins: &[T], directions: &[T], t: &[Vec<T>]) -> (Vec<T>, Vec<usize>) {
    let mut pts = Vec::new();
    let mut owner = Vec::new();
    for (r, ts) in t.iter().enumerate() {
        for &tv in ts {
            for k in 0..3 {
                pts.push(origins[3 * r + k] + tv * directions[3 * r + k]);
            }
            owner.push(r);
        }
    }
    (pts, owner)
}

fn composite_all<T: Scalar>(sigma: &[T], rgb: &[T], t: &[Vec<T>], far: T) -> RenderOutput<T> {
    let mut out = RenderOutput::with_capacity(t.len());
    let mut k = 0;
    for ts in t {
        let s = ts.len();
        let colours: Vec<Vec3<T>> = rgb[3 * k..3 * (k + s)].chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        let (c, a, d, w) = composite_values(&sigma[k..k + s], &colours, ts, far);
        out.rgb.push(c);
        out.alpha.push(a);
        out.depth.push(d);
        out.weights.push(w);
        k += s;
    }
    out
}

/// Coarse sampling, then (when enabled) fine resampling from the coarse
/// weights, merged with the coarse samples and sorted.
fn placed_samples<T: Scalar, R: Rng + ?Sized>(
    field: &dyn FieldValues<T>,
    origins: &[T],
    directions: &[T],
    cfg: &SamplingConfig,
    rng: &mut R,
) -> Result<Vec<Vec<T>>> {
    let rays = origins.len() / 3;
    let coarse = stratified_sample::<T, R>(cfg, rays, rng);
    if cfg.num_fine == 0 {
        return Ok(coarse);
    }
    let (pts, owner) = ray_points(origins, directions, &coarse);
    let (sigma, rgb) = field.evaluate(&pts, directions, &owner)?;
    let coarse_out = composite_all(&sigma, &rgb, &coarse, lit(cfg.far));
    let edges = cfg.coarse_bin_edges::<T>();
    Ok(coarse
        .into_iter()
        .zip(&coarse_out.weights)
        .map(|(mut ts, w)| {
            let fine = if cfg.jitter {
                hierarchical_resample(&edges, w, cfg.num_fine, Some(&mut *rng))
            } else {
                hierarchical_resample::<T, R>(&edges, w, cfg.num_fine, None)
            };
            ts.extend(fine);
            ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
            ts
        })
        .collect())
}

/// Forward-only rendering of rays given as flat `[R·3]` origins and directions.
pub fn render_values<T: Scalar, R: Rng + ?Sized>(
    field: &dyn FieldValues<T>,
    origins: &[T],
    directions: &[T],
    cfg: &SamplingConfig,
    rng: &mut R,
) -> Result<RenderOutput<T>> {
    cfg.validate()?;
    let t = placed_samples(field, origins, directions, cfg, rng)?;
    let (pts, owner) = ray_points(origins, directions, &t);
    let (sigma, rgb) = field.evaluate(&pts, directions, &owner)?;
    Ok(composite_all(&sigma, &rgb, &t, lit(cfg.far)))
}

/// Differentiable rendering result.
pub struct RenderedRays<'g, T: Scalar> {
    /// `[R, 3]`
    pub rgb: Var<'g, T>,
    /// `[R, 1]`
    pub alpha: Var<'g, T>,
    /// `[R, 1]`
    pub depth: Var<'g, T>,
}

/// Renders rays whose origins and directions are graph values (so gradients
/// reach the pose). Sample placement is forward-only; the final composite is
/// differentiable with respect to the field and the rays.
pub fn render_rays<'g, T: Scalar, F: VolumeField<'g, T>, R: Rng + ?Sized>(
    field: &F,
    origins: Var<'g, T>,
    directions: Var<'g, T>,
    cfg: &SamplingConfig,
    rng: &mut R,
) -> Result<RenderedRays<'g, T>> {
    cfg.validate()?;
    let (ov, dv) = (origins.value(), directions.value());
    let t = placed_samples(field, ov.data(), dv.data(), cfg, rng)?;
    let samples = cfg.samples_per_ray();
    let owner: Rc<[usize]> = t.iter().enumerate().flat_map(|(r, ts)| std::iter::repeat_n(r, ts.len())).collect();
    let flat_t: Rc<[T]> = t.iter().flatten().copied().collect();
    let n = flat_t.len();
    let t3: Vec<T> = flat_t.iter().flat_map(|&v| [v, v, v]).collect();
    let points = origins
        .gather_rows(owner.clone())
        .add(directions.gather_rows(owner.clone()).mul_const(Rc::new(Tensor::from_parts([n, 3], t3))));
    let (sigma, rgb) = field.query(points, directions, owner)?;
    let packed = composite(sigma, rgb, flat_t, samples, lit(cfg.far));
    Ok(RenderedRays { rgb: packed.slice_cols(0, 3), alpha: packed.slice_cols(3, 4), depth: packed.slice_cols(4, 5) })
}

/// Forward-only rendering of a patch seen from `pose`, in chunks of rays.
pub fn render_patch<T: Scalar, R: Rng + ?Sized>(
    field: &dyn FieldValues<T>,
    pose: &RigidPose<T>,
    intr: &Intrinsics<T>,
    patch: &PatchSpec,
    cfg: &SamplingConfig,
    rng: &mut R,
) -> Result<RenderOutput<T>> {
    let pixels = patch.pixels(intr)?;
    let rays = generate_rays_rigid(pose, intr, &pixels)?;
    let origins: Vec<T> = rays.origins.iter().flatten().copied().collect();
    let directions: Vec<T> = rays.directions.iter().flatten().copied().collect();
    let chunk = 1024;
    let mut out = RenderOutput::with_capacity(pixels.len());
    for start in (0..pixels.len()).step_by(chunk) {
        let end = (start + chunk).min(pixels.len());
        out.extend(render_values(field, &origins[3 * start..3 * end], &directions[3 * start..3 * end], cfg, rng)?);
    }
    Ok(out)
}

/// Field given by a closure of point and direction; handy for analytic scenes.
pub struct FnField<F>(pub F);

impl<T: Scalar, F: Fn(Vec3<T>, Vec3<T>) -> RadianceSample<T>> FieldValues<T> for FnField<F> {
    fn evaluate(&self, points: &[T], directions: &[T], sample_ray: &[usize]) -> Result<(Vec<T>, Vec<T>)> {
        let mut sigma = Vec::with_capacity(sample_ray.len());
        let mut rgb = Vec::with_capacity(3 * sample_ray.len());
        for (i, &r) in sample_ray.iter().enumerate() {
            let s = (self.0)(
                [points[3 * i], points[3 * i + 1], points[3 * i + 2]],
                [directions[3 * r], directions[3 * r + 1], directions[3 * r + 2]],
            );
            sigma.push(s.density);
            rgb.extend_from_slice(&s.rgb);
        }
        Ok((sigma, rgb))
    }
}

impl<'g, T: Scalar, F: Fn(Vec3<T>, Vec3<T>) -> RadianceSample<T>> VolumeField<'g, T> for FnField<F> {
    fn query(&self, points: Var<'g, T>, directions: Var<'g, T>, sample_ray: Rc<[usize]>) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let (sigma, rgb) = self.evaluate(points.value().data(), directions.value().data(), &sample_ray)?;
        let n = sigma.len();
        let g: &'g Graph<T> = points.graph();
        Ok((g.constant(Tensor::from_parts([n], sigma)), g.constant(Tensor::from_parts([n, 3], rgb))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn no_jitter(near: f64, far: f64, n: usize) -> SamplingConfig {
        SamplingConfig { near, far, num_coarse: n, num_fine: 0, jitter: false }
    }

    #[test]
    fn midpoints_without_jitter() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = stratified_sample::<f64, _>(&SamplingConfig { near: 0.0, ..no_jitter(0.1, 1.0, 4) }, 1, &mut rng);
        assert_eq!(t[0], vec![0.125, 0.375, 0.625, 0.875]);
    }

    #[test]
    fn jittered_samples_stay_in_bins() {
        let cfg = SamplingConfig { jitter: true, ..no_jitter(0.1, 4.0, 8) };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let step = (cfg.far - cfg.near) / 8.0;
        for ts in stratified_sample::<f64, _>(&cfg, 1250, &mut rng) {
            for (i, t) in ts.iter().enumerate() {
                assert!(*t >= cfg.near + step * i as f64 && *t <= cfg.near + step * (i + 1) as f64);
            }
            assert!(ts.windows(2).all(|w| w[1] > w[0]));
        }
    }

    #[test]
    fn vacuum_composites_to_zero() {
        let samples = vec![RadianceSample { density: 0.0, rgb: [0.3, 0.6, 0.9] }; 5];
        let t = [0.5, 1.0, 1.5, 2.0, 2.5];
        let out = composite_ray(&samples, &t, 4.0).unwrap();
        assert_eq!(out.rgb[0], [0.0; 3]);
        assert_eq!(out.alpha[0], 0.0);
        assert!(out.weights[0].iter().all(|w| *w == 0.0));
    }

    #[test]
    fn single_sample_half_opacity() {
        let s = [RadianceSample { density: 2.0f64.ln(), rgb: [1.0, 0.0, 0.0] }];
        let out = composite_ray(&s, &[1.0], 2.0).unwrap();
        assert!((out.alpha[0] - 0.5).abs() < 1e-12);
        assert!((out.rgb[0][0] - 0.5).abs() < 1e-12);
        assert!((out.depth[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_increasing_distances_are_rejected() {
        let s = vec![RadianceSample { density: 1.0f64, rgb: [0.0; 3] }; 2];
        assert!(composite_ray(&s, &[1.0, 1.0], 2.0).is_err());
    }

    #[test]
    fn point_mass_weights_confine_fine_samples() {
        let edges: Vec<f64> = (0..=8).map(|i| i as f64 * 0.5).collect();
        let mut w = vec![0.0; 8];
        w[5] = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fine = hierarchical_resample(&edges, &w, 64, Some(&mut rng));
        assert!(fine.iter().all(|t| *t >= 2.5 && *t <= 3.0));
        assert!(fine.windows(2).all(|p| p[1] >= p[0]));
        let uniform = hierarchical_resample::<f64, ChaCha8Rng>(&edges, &[0.0; 8], 8, None);
        let want: Vec<f64> = (0..8).map(|i| 0.25 + 0.5 * i as f64).collect();
        for (a, b) in uniform.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn patch_bounds() {
        let intr = Intrinsics::<f64>::for_square_image(64);
        let stride = PatchSpec::spanning_stride(64, 16);
        let p = PatchSpec { height: 16, width: 16, stride, offset: [0.0, 0.0] };
        let px = p.pixels(&intr).unwrap();
        assert_eq!(px.len(), 256);
        assert_eq!(px[255], [63.0, 63.0]);
        assert!(PatchSpec { offset: [1.0, 0.0], ..p }.pixels(&intr).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            assert!(PatchSpec::random(&intr, 20, 2.0, &mut rng).pixels(&intr).is_ok());
        }
    }
}
