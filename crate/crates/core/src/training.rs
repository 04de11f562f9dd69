//! Optimisation loop: alternating generator and discriminator updates, the
//! learning-rate schedule and the supervision regimes.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::time::Instant;

use monoview_autodiff::{concat_cols, lit, Adam, AdamConfig, Graph, ParamStore, Scalar, SparseMap, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::DatasetRecord;
use crate::error::{Error, Result};
use crate::field::{init_field_params, ConditionedField, FieldConfig};
use crate::geometry::{sample_pose_prior, Intrinsics, PosePrior};
use crate::networks::{
    discriminate, encoder_forward, encoder_input, init_discriminator_params, init_encoder_params, BackboneConfig, ChannelMode,
    DiscriminatorConfig, EncoderConfig,
};
use crate::objectives::{combine_losses, discriminator_loss, generator_loss, mse, pose_supervised, LossReport, LossTerms, LossWeights};
use crate::rendering::{pose_rays, render_rays, PatchSpec, SamplingConfig};

pub const LOG_FILE: &str = "train_log.ndjson";
pub const MODEL_FILE: &str = "model.ckpt";
pub const STATE_FILE: &str = "state.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";

const DISCRIMINATOR_PREFIX: &str = "disc_";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// No pose labels; poses are always predicted.
    Unsupervised,
    /// A labeled fraction pretrains, then all records fine-tune.
    Weak,
    /// Every record is labeled.
    Full,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Unsupervised => "unsupervised",
            Regime::Weak => "weak",
            Regime::Full => "full",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "unsupervised" => Ok(Regime::Unsupervised),
            "weak" => Ok(Regime::Weak),
            "full" => Ok(Regime::Full),
            other => Err(Error::Config(format!("unknown regime `{other}` (expected unsupervised, weak or full)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub initial_lr: f64,
    /// Per-epoch multiplicative decay.
    pub decay_rate: f64,
    pub regime: Regime,
    pub labeled_fraction: f64,
    /// Weak regime: epochs of the labeled-only phase.
    pub pretrain_epochs: u64,
    /// Weak regime: fine-tune on all records after pretraining.
    pub finetune: bool,
    pub seed: u64,
    /// Checkpoint cadence in epochs.
    pub checkpoint_every: u64,
    /// Stop after this many steps; 0 means no limit.
    pub max_steps: u64,
    /// Steps over which encoding bands switch on; 0 means the first quarter
    /// of training.
    pub anneal_steps: u64,
    /// Side of the square ray patch rendered back for reconstruction.
    pub recon_patch: usize,
    pub recon_stride: f64,
    pub saturating_generator: bool,
    pub weights: LossWeights,
    pub sampling: SamplingConfig,
    pub prior: PosePrior<f64>,
    pub encoder: EncoderConfig,
    pub field: FieldConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 8,
            initial_lr: 1e-3,
            decay_rate: 0.96,
            regime: Regime::Unsupervised,
            labeled_fraction: 0.0,
            pretrain_epochs: 200,
            finetune: true,
            seed: 0,
            checkpoint_every: 10,
            max_steps: 0,
            anneal_steps: 0,
            recon_patch: 32,
            recon_stride: 1.0,
            saturating_generator: false,
            weights: LossWeights::default(),
            sampling: SamplingConfig::default(),
            prior: PosePrior::default(),
            encoder: EncoderConfig::default(),
            field: FieldConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Small networks and sample counts that train on a processor in minutes.
    pub fn desk(image_size: usize) -> Self {
        let mut field = FieldConfig { mlp_depth: 4, mlp_width: 64, color_width: 32, ..FieldConfig::default() };
        field.position_encoding.num_frequencies = 6;
        field.direction_frequencies = 2;
        Self {
            batch_size: 4,
            recon_patch: 16,
            recon_stride: 2.0,
            sampling: SamplingConfig { near: 0.8, far: 2.8, num_coarse: 16, num_fine: 16, jitter: true },
            encoder: EncoderConfig { backbone: BackboneConfig::tiny(), ..EncoderConfig::tiny(image_size) },
            field,
            discriminator: DiscriminatorConfig { patch_size: 16, ..DiscriminatorConfig::default() },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("epochs, batch_size and checkpoint_every must be positive".into()));
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::Config(format!("initial_lr must be positive, got {}", self.initial_lr)));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::Config(format!("decay_rate must lie in (0, 1], got {}", self.decay_rate)));
        }
        let f = self.labeled_fraction;
        let consistent = match self.regime {
            Regime::Unsupervised => f == 0.0,
            Regime::Full => f == 1.0,
            Regime::Weak => f > 0.0 && f < 1.0,
        };
        if !consistent {
            return Err(Error::Config(format!(
                "labeled_fraction {f} is inconsistent with the {} regime (unsupervised needs 0, full needs 1, weak needs a value strictly between)",
                self.regime.name()
            )));
        }
        if self.regime != Regime::Unsupervised && self.weights.pose_supervised <= 0.0 {
            return Err(Error::Config(format!("the {} regime needs a positive pose_supervised weight", self.regime.name())));
        }
        if self.regime == Regime::Weak && self.pretrain_epochs == 0 {
            return Err(Error::Config("weak regime needs pretrain_epochs > 0".into()));
        }
        if self.recon_patch == 0 || !(self.recon_stride > 0.0) {
            return Err(Error::Config("recon_patch and recon_stride must be positive".into()));
        }
        self.weights.validate()?;
        self.sampling.validate()?;
        self.prior.validate()?;
        self.encoder.validate()?;
        self.field.validate()?;
        self.discriminator.validate()
    }

    fn adversarial(&self) -> bool {
        self.weights.adv_color > 0.0 || self.weights.adv_alpha > 0.0
    }

    fn renders_novel_views(&self) -> bool {
        self.adversarial() || self.weights.pose_consistency > 0.0
    }
}

/// `initial_lr · decay_rate^epoch`, decayed stepwise per epoch.
pub fn lr_at(epoch: u64, cfg: &TrainConfig) -> f64 {
    cfg.initial_lr * cfg.decay_rate.powi(epoch.min(i32::MAX as u64) as i32)
}

pub fn is_discriminator_param(name: &str) -> bool {
    name.starts_with(DISCRIMINATOR_PREFIX)
}

/// Everything needed to continue training. Step randomness is derived from
/// `(seed, step)`, so the counters are the random state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T: Scalar> {
    pub step: u64,
    /// Epochs completed over all phases.
    pub epoch: u64,
    pub phase: usize,
    /// Epochs completed in the current phase; drives the learning rate.
    pub phase_epoch: u64,
    /// Batches already taken from the current epoch.
    pub batch_in_epoch: usize,
    pub params: ParamStore<T>,
    pub generator_opt: Adam<T>,
    pub discriminator_opt: Adam<T>,
}

impl<T: Scalar> TrainState<T> {
    /// Fresh parameters for every network, initialised from `cfg.seed`.
    pub fn new(cfg: &TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = init_encoder_params(&cfg.encoder, &mut rng);
        params.merge(init_field_params(&cfg.field, &mut rng));
        params.merge(init_discriminator_params(&cfg.discriminator, ChannelMode::Color, &mut rng));
        params.merge(init_discriminator_params(&cfg.discriminator, ChannelMode::Alpha, &mut rng));
        Self {
            step: 0,
            epoch: 0,
            phase: 0,
            phase_epoch: 0,
            batch_in_epoch: 0,
            params,
            generator_opt: Adam::new(AdamConfig::default()),
            discriminator_opt: Adam::new(AdamConfig::default()),
        }
    }

    pub fn generator_params(&self) -> ParamStore<T> {
        let mut p = self.params.subset("encoder.");
        p.merge(self.params.subset("field."));
        p
    }

    pub fn discriminator_params(&self) -> ParamStore<T> {
        self.params.subset(DISCRIMINATOR_PREFIX)
    }

    /// Parameters plus optimiser moments in one checkpoint container.
    pub fn save(&self, path: &Path, cfg: &TrainConfig) -> Result<()> {
        let mut store = ParamStore::new();
        for (name, t) in self.params.iter() {
            store.insert(format!("param/{name}"), t.clone());
        }
        for (tag, opt) in [("generator", &self.generator_opt), ("discriminator", &self.discriminator_opt)] {
            for (name, t) in &opt.first {
                store.insert(format!("adam.{tag}.m/{name}"), t.clone());
            }
            for (name, t) in &opt.second {
                store.insert(format!("adam.{tag}.v/{name}"), t.clone());
            }
        }
        let mut meta = BTreeMap::new();
        meta.insert("kind".into(), "train_state".into());
        meta.insert("config".into(), config_json(cfg)?);
        for (k, v) in [
            ("step", self.step),
            ("epoch", self.epoch),
            ("phase", self.phase as u64),
            ("phase_epoch", self.phase_epoch),
            ("batch_in_epoch", self.batch_in_epoch as u64),
            ("generator_steps", self.generator_opt.steps),
            ("discriminator_steps", self.discriminator_opt.steps),
        ] {
            meta.insert(k.to_string(), v.to_string());
        }
        checkpoint::save(path, &store, &meta)
    }

    /// Reads a state written by [`TrainState::save`] with its config.
    pub fn load(path: &Path) -> Result<(Self, TrainConfig)> {
        let (store, meta) = checkpoint::load::<T>(path)?;
        if meta.get("kind").map(String::as_str) != Some("train_state") {
            return Err(Error::Checkpoint(format!("{} is not a training state file", path.display())));
        }
        let cfg = config_from_meta(&meta)?;
        let counter = |k: &str| -> Result<u64> {
            meta.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("state file lacks a valid `{k}` entry")))
        };
        let mut params = ParamStore::new();
        let mut gen = Adam::new(AdamConfig::default());
        let mut disc = Adam::new(AdamConfig::default());
        for (name, t) in store.iter() {
            let (kind, rest) = name.split_once('/').ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
            let slot = match kind {
                "param" => {
                    params.insert(rest, t.clone());
                    continue;
                }
                "adam.generator.m" => &mut gen.first,
                "adam.generator.v" => &mut gen.second,
                "adam.discriminator.m" => &mut disc.first,
                "adam.discriminator.v" => &mut disc.second,
                _ => return Err(Error::Checkpoint(format!("unexpected tensor `{name}`"))),
            };
            slot.insert(rest.to_string(), t.clone());
        }
        gen.steps = counter("generator_steps")?;
        disc.steps = counter("discriminator_steps")?;
        let state = Self {
            step: counter("step")?,
            epoch: counter("epoch")?,
            phase: counter("phase")? as usize,
            phase_epoch: counter("phase_epoch")?,
            batch_in_epoch: counter("batch_in_epoch")? as usize,
            params,
            generator_opt: gen,
            discriminator_opt: disc,
        };
        Ok((state, cfg))
    }
}

fn config_json(cfg: &TrainConfig) -> Result<String> {
    serde_json::to_string(cfg).map_err(|e| Error::Config(e.to_string()))
}

fn config_from_meta(meta: &BTreeMap<String, String>) -> Result<TrainConfig> {
    let text = meta.get("config").ok_or_else(|| Error::Checkpoint("checkpoint lacks the model config".into()))?;
    serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("bad model config in checkpoint: {e}")))
}

/// Writes the encoder and field parameters with the config that built them.
pub fn save_model<T: Scalar>(path: &Path, state: &TrainState<T>, cfg: &TrainConfig) -> Result<()> {
    let mut meta = BTreeMap::new();
    meta.insert("kind".into(), "model".into());
    meta.insert("config".into(), config_json(cfg)?);
    meta.insert("step".into(), state.step.to_string());
    checkpoint::save(path, &state.generator_params(), &meta)
}

/// Reads a model checkpoint (or the parameters of a state file).
pub fn load_model<T: Scalar>(path: &Path) -> Result<(TrainConfig, ParamStore<T>)> {
    let (store, meta) = checkpoint::load::<T>(path)?;
    let cfg = config_from_meta(&meta)?;
    let params = if meta.get("kind").map(String::as_str) == Some("train_state") {
        let mut p = ParamStore::new();
        for (name, t) in store.iter() {
            if let Some(rest) = name.strip_prefix("param/") {
                if !is_discriminator_param(rest) {
                    p.insert(rest, t.clone());
                }
            }
        }
        p
    } else {
        store
    };
    Ok((cfg, params))
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_add(1));
    rng
}

/// Gather indices turning rows `(b, i, j)` of an `[B·P², 3]` colour matrix
/// into a planar `[B, 3, P, P]` batch.
fn planar_indices(batch: usize, side: usize) -> Rc<[usize]> {
    let area = side * side;
    let mut idx = Vec::with_capacity(batch * 3 * area);
    for b in 0..batch {
        for c in 0..3 {
            for k in 0..area {
                idx.push((b * area + k) * 3 + c);
            }
        }
    }
    idx.into()
}

/// Bilinear upsampling of `[B·P², 4]` rendered rows (colour then alpha),
/// laid out on a `P × P` grid with spacing `stride` pixels, to planar
/// `[B, C, S, S]` encoder input.
fn upsample_map<T: Scalar>(batch: usize, side: usize, stride: f64, size: usize, channels: usize) -> SparseMap<T> {
    let area = side * side;
    let last = (side - 1) as f64;
    let axis = |x: usize| {
        let g = (x as f64 / stride).clamp(0.0, last);
        let i0 = (g.floor() as usize).min(side.saturating_sub(2));
        let f = if side > 1 { g - i0 as f64 } else { 0.0 };
        (i0, f)
    };
    let mut rows = Vec::with_capacity(batch * channels * size * size);
    for b in 0..batch {
        for c in 0..channels {
            for y in 0..size {
                let (iy, fy) = axis(y);
                for x in 0..size {
                    let (ix, fx) = axis(x);
                    let mut row = Vec::with_capacity(4);
                    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                            let w = wy * wx;
                            if w > 0.0 && iy + dy < side && ix + dx < side {
                                row.push(((b * area + (iy + dy) * side + ix + dx) * 4 + c, lit::<T>(w)));
                            }
                        }
                    }
                    rows.push(row);
                }
            }
        }
    }
    SparseMap { rows, input_len: batch * area * 4, output_shape: vec![batch, channels, size, size] }
}

fn finite_or_abort(term: &str, value: f64, step: u64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss { term: term.to_string(), step })
    }
}

fn check_gradients<T: Scalar>(grads: &BTreeMap<String, Tensor<T>>, which: &str, step: u64) -> Result<()> {
    match grads.iter().find(|(_, g)| !g.all_finite()) {
        Some((name, _)) => Err(Error::NonFiniteLoss { term: format!("{which} gradient of {name}"), step }),
        None => Ok(()),
    }
}

/// Detached novel-view patches left by a generator update for the
/// discriminator: colour `[B,3,P,P]`, alpha `[B,1,P,P]` and the pixel grid
/// of each item.
pub struct Fakes<T> {
    pub rgb: Tensor<T>,
    pub alpha: Tensor<T>,
    pub pixels: Vec<Vec<[T; 2]>>,
}

/// Losses of a generator update and what the discriminator update needs.
pub struct GeneratorOutcome<T> {
    pub terms: LossTerms,
    pub fakes: Option<Fakes<T>>,
    rng: ChaCha8Rng,
}

/// One generator update followed by one discriminator update. Pose
/// supervision applies to records that carry a pose; in the unsupervised
/// regime ground-truth poses are never read.
pub fn train_step<T: Scalar>(batch: &[&DatasetRecord<T>], state: &mut TrainState<T>, cfg: &TrainConfig) -> Result<LossReport> {
    let mut outcome = generator_update(batch, state, cfg)?;
    discriminator_update(batch, state, cfg, &mut outcome)?;
    state.step += 1;
    Ok(combine_losses(&outcome.terms, &cfg.weights))
}

/// Adam step on the encoder and field only; discriminator weights enter the
/// graph as constants.
pub fn generator_update<T: Scalar>(batch: &[&DatasetRecord<T>], state: &mut TrainState<T>, cfg: &TrainConfig) -> Result<GeneratorOutcome<T>> {
    if batch.is_empty() {
        return Err(Error::Argument("empty training batch".into()));
    }
    let b = batch.len();
    let size = cfg.encoder.image_size;
    let channels = cfg.encoder.input_channels();
    let step = state.step;
    let mut rng = step_rng(cfg.seed, step);
    let progress = cfg.field.position_encoding.progress(step);
    let lr = lr_at(state.phase_epoch, cfg);
    let w = &cfg.weights;

    let mut input = Vec::with_capacity(b * channels * size * size);
    for r in batch {
        input.extend(encoder_input(&cfg.encoder, &r.image, &r.mask)?);
    }
    let intrinsics: Vec<Intrinsics<T>> = batch.iter().map(|r| r.intrinsics).collect();
    let symmetric: Rc<[bool]> = batch.iter().map(|r| r.symmetric).collect();

    let g = Graph::new();
    let gen_store = state.generator_params();
    let disc_store = state.discriminator_params();
    let p = gen_store.bind(&g, true).with(disc_store.bind(&g, false));
    let enc = encoder_forward(&cfg.encoder, &p, g.constant(Tensor::from_parts([b, channels, size, size], input)))?;

    // Input-view reconstruction at the predicted pose.
    let mut pixels = Vec::with_capacity(b);
    let (mut target_rgb, mut target_alpha) = (Vec::new(), Vec::new());
    for r in batch {
        let patch = PatchSpec::random(&r.intrinsics, cfg.recon_patch, cfg.recon_stride, &mut rng);
        let px = patch.pixels(&r.intrinsics)?;
        for &[u, v] in &px {
            target_rgb.extend((0..3).map(|c| r.image.sample_bilinear(u, v, c)));
            target_alpha.push(r.mask.sample_bilinear(u, v, 0));
        }
        pixels.push(px);
    }
    let (origins, dirs, ray_item) = pose_rays(enc.pose, &pixels, &intrinsics)?;
    let field = ConditionedField {
        cfg: &cfg.field,
        store: &gen_store,
        params: &p,
        shape_codes: enc.shape_codes,
        appearance_codes: enc.appearance_codes,
        ray_item,
        symmetric: symmetric.clone(),
        progress,
    };
    let rec = render_rays(&field, origins, dirs, &cfg.sampling, &mut rng)?;
    let rays = target_alpha.len();
    let recon_color = mse(rec.rgb, g.constant(Tensor::from_parts([rays, 3], target_rgb)));
    let recon_alpha = mse(rec.alpha, g.constant(Tensor::from_parts([rays, 1], target_alpha)));
    let mut terms = LossTerms {
        recon_color: finite_or_abort("recon_color", recon_color.value().item().to_f64().unwrap(), step)?,
        recon_alpha: finite_or_abort("recon_alpha", recon_alpha.value().item().to_f64().unwrap(), step)?,
        ..LossTerms::default()
    };
    let mut total = recon_color.scale(lit(w.recon_color)).add(recon_alpha.scale(lit(w.recon_alpha)));

    // Novel view from a fresh prior pose per item.
    let side = cfg.discriminator.patch_size;
    let mut novel = None;
    if cfg.renders_novel_views() {
        let prior: PosePrior<T> = PosePrior {
            azimuth_range: cfg.prior.azimuth_range.map(lit),
            elevation_range: cfg.prior.elevation_range.map(lit),
            translation_mean: cfg.prior.translation_mean.map(lit),
            translation_spread: cfg.prior.translation_spread.map(lit),
        };
        let mut poses = Vec::with_capacity(7 * b);
        for _ in 0..b {
            poses.extend(sample_pose_prior(&prior, &mut rng)?.params());
        }
        let sampled = g.constant(Tensor::from_parts([b, 7], poses));
        let stride = PatchSpec::spanning_stride(size, side);
        let grid = PatchSpec { height: side, width: side, stride, offset: [0.0, 0.0] };
        let novel_pixels = intrinsics.iter().map(|i| grid.pixels(i)).collect::<Result<Vec<_>>>()?;
        let (o2, d2, item2) = pose_rays(sampled, &novel_pixels, &intrinsics)?;
        let nfield = ConditionedField { ray_item: item2, ..field };
        let view = render_rays(&nfield, o2, d2, &cfg.sampling, &mut rng)?;
        let fake_rgb = view.rgb.gather(planar_indices(b, side), [b, 3, side, side]);
        let fake_alpha = view.alpha.reshape([b, 1, side, side]);
        if cfg.adversarial() {
            let lc = generator_loss(
                discriminate(fake_rgb, ChannelMode::Color, &cfg.discriminator, &p, Some(&mut rng))?,
                cfg.saturating_generator,
            );
            let la = generator_loss(
                discriminate(fake_alpha, ChannelMode::Alpha, &cfg.discriminator, &p, Some(&mut rng))?,
                cfg.saturating_generator,
            );
            terms.adv_color = Some(finite_or_abort("adv_color", lc.value().item().to_f64().unwrap(), step)?);
            terms.adv_alpha = Some(finite_or_abort("adv_alpha", la.value().item().to_f64().unwrap(), step)?);
            total = total.add(lc.scale(lit(w.adv_color))).add(la.scale(lit(w.adv_alpha)));
        }
        if w.pose_consistency > 0.0 {
            let packed = concat_cols(&[view.rgb, view.alpha]);
            let rerendered = packed.sparse_linear(Rc::new(upsample_map(b, side, stride, size, channels)));
            let again = encoder_forward(&cfg.encoder, &p, rerendered)?;
            let pc = mse(again.pose, sampled);
            terms.pose_consistency = Some(finite_or_abort("pose_consistency", pc.value().item().to_f64().unwrap(), step)?);
            total = total.add(pc.scale(lit(w.pose_consistency)));
        }
        novel = Some(Fakes { rgb: (*fake_rgb.value()).clone(), alpha: (*fake_alpha.value()).clone(), pixels: novel_pixels });
    }

    if cfg.regime != Regime::Unsupervised {
        let labeled: Vec<bool> = batch.iter().map(|r| r.has_pose()).collect();
        let mut gt = vec![T::zero(); 7 * b];
        for (i, r) in batch.iter().enumerate() {
            if labeled[i] {
                if let Some(pose) = r.ground_truth_pose() {
                    gt[7 * i..7 * i + 7].copy_from_slice(&pose.params());
                }
            }
        }
        if let Some(ps) = pose_supervised(enc.pose, g.constant(Tensor::from_parts([b, 7], gt)), &labeled) {
            terms.pose_supervised = Some(finite_or_abort("pose_supervised", ps.value().item().to_f64().unwrap(), step)?);
            total = total.add(ps.scale(lit(w.pose_supervised)));
        }
    }

    let grads = g.backward(total).params();
    check_gradients(&grads, "generator", step)?;
    state.generator_opt.step(&mut state.params, &grads, lr);
    Ok(GeneratorOutcome { terms, fakes: novel, rng })
}

/// Adam step on the discriminator only, real patches against the detached
/// fakes of the preceding generator update. A no-op without adversarial
/// terms.
pub fn discriminator_update<T: Scalar>(
    batch: &[&DatasetRecord<T>],
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    outcome: &mut GeneratorOutcome<T>,
) -> Result<()> {
    let b = batch.len();
    let step = state.step;
    let lr = lr_at(state.phase_epoch, cfg);
    let w = &cfg.weights;
    let side = cfg.discriminator.patch_size;
    let (terms, rng) = (&mut outcome.terms, &mut outcome.rng);
    if let (true, Some(Fakes { rgb: fake_rgb, alpha: fake_alpha, pixels: novel_pixels })) = (cfg.adversarial(), outcome.fakes.as_ref()) {
        if fake_rgb.shape()[0] != b {
            return Err(Error::Argument("discriminator batch does not match the generator batch".into()));
        }
        let disc_store = state.discriminator_params();
        // Real patches come from the next record of the batch, sampled on
        // the same grid as the fakes.
        let area = side * side;
        let mut real_rgb = vec![T::zero(); b * 3 * area];
        let mut real_alpha = vec![T::zero(); b * area];
        for i in 0..b {
            let j = (i + 1) % b;
            let r = batch[j];
            for (k, &[u, v]) in novel_pixels[j].iter().enumerate() {
                for c in 0..3 {
                    real_rgb[(i * 3 + c) * area + k] = r.image.sample_bilinear(u, v, c);
                }
                real_alpha[i * area + k] = r.mask.sample_bilinear(u, v, 0);
            }
        }
        let g2 = Graph::new();
        let dp = disc_store.bind(&g2, true);
        let d = &cfg.discriminator;
        let mut dloss = None;
        if w.adv_color > 0.0 {
            let real = discriminate(g2.constant(Tensor::from_parts([b, 3, side, side], real_rgb)), ChannelMode::Color, d, &dp, Some(&mut *rng))?;
            let fake = discriminate(g2.constant(fake_rgb.clone()), ChannelMode::Color, d, &dp, Some(&mut *rng))?;
            let l = discriminator_loss(real, fake);
            terms.disc_color = Some(finite_or_abort("disc_color", l.value().item().to_f64().unwrap(), step)?);
            dloss = Some(l);
        }
        if w.adv_alpha > 0.0 {
            let real = discriminate(g2.constant(Tensor::from_parts([b, 1, side, side], real_alpha)), ChannelMode::Alpha, d, &dp, Some(&mut *rng))?;
            let fake = discriminate(g2.constant(fake_alpha.clone()), ChannelMode::Alpha, d, &dp, Some(&mut *rng))?;
            let l = discriminator_loss(real, fake);
            terms.disc_alpha = Some(finite_or_abort("disc_alpha", l.value().item().to_f64().unwrap(), step)?);
            dloss = Some(match dloss {
                Some(prev) => prev.add(l),
                None => l,
            });
        }
        if let Some(loss) = dloss {
            let grads = g2.backward(loss).params();
            check_gradients(&grads, "discriminator", step)?;
            state.discriminator_opt.step(&mut state.params, &grads, lr);
        }
    }
    Ok(())
}

/// Records and labels used by one training phase.
#[derive(Clone, Debug, PartialEq)]
pub struct Phase {
    pub name: &'static str,
    /// Indices into the dataset.
    pub records: Vec<usize>,
    /// Per phase record: whether its pose may supervise.
    pub labeled: Vec<bool>,
    pub epochs: u64,
}

impl Phase {
    pub fn steps_per_epoch(&self, batch_size: usize) -> u64 {
        self.records.len().div_ceil(batch_size.max(1)) as u64
    }
}

/// Number of labeled records for a fraction of `n` (at least one).
pub fn labeled_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).round() as usize).clamp(1, n.max(1))
}

/// Splits the dataset into phases according to the regime.
pub fn plan_phases<T: Scalar>(records: &[DatasetRecord<T>], cfg: &TrainConfig) -> Result<Vec<Phase>> {
    cfg.validate()?;
    let n = records.len();
    if n == 0 {
        return Err(Error::Config("training needs at least one record".into()));
    }
    let all: Vec<usize> = (0..n).collect();
    let require_poses = |idx: &[usize]| -> Result<()> {
        match idx.iter().find(|&&i| !records[i].has_pose()) {
            Some(&i) => Err(Error::Config(format!(
                "the {} regime needs a pose on labeled record `{}`",
                cfg.regime.name(),
                records[i].id
            ))),
            None => Ok(()),
        }
    };
    Ok(match cfg.regime {
        Regime::Unsupervised => vec![Phase { name: "main", records: all, labeled: vec![false; n], epochs: cfg.epochs }],
        Regime::Full => {
            require_poses(&all)?;
            vec![Phase { name: "main", records: all, labeled: vec![true; n], epochs: cfg.epochs }]
        }
        Regime::Weak => {
            let mut order = all.clone();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_1AB7));
            let mut chosen = order[..labeled_count(n, cfg.labeled_fraction)].to_vec();
            chosen.sort_unstable();
            require_poses(&chosen)?;
            let mut phases = vec![Phase { name: "pretrain", records: chosen.clone(), labeled: vec![true; chosen.len()], epochs: cfg.pretrain_epochs }];
            if cfg.finetune {
                let labeled = all.iter().map(|i| chosen.binary_search(i).is_ok()).collect();
                phases.push(Phase { name: "finetune", records: all, labeled, epochs: cfg.epochs });
            }
            phases
        }
    })
}

/// Total optimisation steps, honouring `max_steps`.
pub fn total_steps(phases: &[Phase], cfg: &TrainConfig) -> u64 {
    let planned: u64 = phases.iter().map(|p| p.epochs * p.steps_per_epoch(cfg.batch_size)).sum();
    if cfg.max_steps > 0 {
        planned.min(cfg.max_steps)
    } else {
        planned
    }
}

/// Config with derived defaults filled in (the encoding anneal duration).
pub fn resolve_config<T: Scalar>(records: &[DatasetRecord<T>], cfg: &TrainConfig) -> Result<TrainConfig> {
    let phases = plan_phases(records, cfg)?;
    let mut out = cfg.clone();
    let anneal = if cfg.anneal_steps > 0 { cfg.anneal_steps } else { (total_steps(&phases, cfg) / 4).max(1) };
    out.anneal_steps = anneal;
    out.field.position_encoding.anneal_duration = anneal;
    Ok(out)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: u64,
    pub phase: String,
    pub lr: f64,
    pub progress: f64,
    #[serde(flatten)]
    pub losses: LossReport,
    /// Mean alpha of the rendered novel-view patches, when rendered.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub novel_alpha: Option<f64>,
    /// Seconds since the run started.
    pub wall_time: f64,
}

pub struct TrainingRun<T: Scalar> {
    pub state: TrainState<T>,
    pub config: TrainConfig,
    pub phases: Vec<Phase>,
    pub log: Vec<LogRecord>,
}

/// Trains on `records`. With `out_dir`, appends the NDJSON log, writes a
/// checkpoint and state file every `checkpoint_every` epochs and the final
/// model. `resume` continues from a saved state.
pub fn run_training<T: Scalar>(
    records: &[DatasetRecord<T>],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    resume: Option<TrainState<T>>,
) -> Result<TrainingRun<T>> {
    let cfg = resolve_config(records, cfg)?;
    let phases = plan_phases(records, &cfg)?;
    let size = cfg.encoder.image_size;
    if let Some(r) = records.iter().find(|r| r.image.width != size || r.image.height != size) {
        return Err(Error::Config(format!(
            "record `{}` is {}×{} but the encoder expects {size}×{size}",
            r.id, r.image.width, r.image.height
        )));
    }
    // Unlabeled records lose their pose so no code path can read it.
    let views: Vec<Vec<DatasetRecord<T>>> = phases
        .iter()
        .map(|ph| ph.records.iter().zip(&ph.labeled).map(|(&i, &l)| if l { records[i].clone() } else { records[i].without_pose() }).collect())
        .collect();

    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir.join(CHECKPOINT_DIR)).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            let f = OpenOptions::new()
                .create(true)
                .append(resume.is_some())
                .write(true)
                .truncate(resume.is_none())
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((BufWriter::new(f), path))
        }
        None => None,
    };

    let mut state = resume.unwrap_or_else(|| TrainState::new(&cfg));
    let limit = total_steps(&phases, &cfg);
    let start = Instant::now();
    let mut log = Vec::new();
    'phases: for (pi, (phase, view)) in phases.iter().zip(&views).enumerate() {
        if pi < state.phase {
            continue;
        }
        if pi > state.phase {
            state.phase = pi;
            state.phase_epoch = 0;
            state.batch_in_epoch = 0;
        }
        while state.phase_epoch < phase.epochs {
            let mut order: Vec<usize> = (0..view.len()).collect();
            let epoch_seed = cfg.seed ^ ((pi as u64) << 48) ^ state.phase_epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15);
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
            for chunk in order.chunks(cfg.batch_size).skip(state.batch_in_epoch) {
                if state.step >= limit {
                    break 'phases;
                }
                let batch: Vec<&DatasetRecord<T>> = chunk.iter().map(|&i| &view[i]).collect();
                let lr = lr_at(state.phase_epoch, &cfg);
                let progress = cfg.field.position_encoding.progress(state.step);
                let step = state.step;
                let mut outcome = generator_update(&batch, &mut state, &cfg)?;
                discriminator_update(&batch, &mut state, &cfg, &mut outcome)?;
                state.step += 1;
                let losses = combine_losses(&outcome.terms, &cfg.weights);
                let novel_alpha = outcome.fakes.as_ref().map(|f| f.alpha.data().iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / f.alpha.len().max(1) as f64);
                state.batch_in_epoch += 1;
                let rec = LogRecord {
                    step,
                    epoch: state.epoch,
                    phase: phase.name.to_string(),
                    lr,
                    progress,
                    losses,
                    novel_alpha,
                    wall_time: start.elapsed().as_secs_f64(),
                };
                if let Some((f, path)) = log_file.as_mut() {
                    let line = serde_json::to_string(&rec).map_err(|e| Error::Argument(e.to_string()))?;
                    writeln!(f, "{line}").and_then(|_| f.flush()).map_err(|e| Error::io(path.clone(), e))?;
                }
                log.push(rec);
            }
            state.phase_epoch += 1;
            state.epoch += 1;
            state.batch_in_epoch = 0;
            if let Some(dir) = out_dir {
                if state.epoch % cfg.checkpoint_every == 0 {
                    save_model(&dir.join(CHECKPOINT_DIR).join(format!("epoch_{:04}.ckpt", state.epoch)), &state, &cfg)?;
                    state.save(&dir.join(STATE_FILE), &cfg)?;
                }
            }
        }
    }
    if let Some(dir) = out_dir {
        save_model(&dir.join(MODEL_FILE), &state, &cfg)?;
        state.save(&dir.join(STATE_FILE), &cfg)?;
    }
    Ok(TrainingRun { state, config: cfg, phases, log })
}

/// Parses an NDJSON training log.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse { path: PathBuf::from(path), line: i + 1, message: e.to_string() })
        })
        .collect()
}
