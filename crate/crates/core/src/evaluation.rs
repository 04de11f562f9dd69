//! Image-quality metrics, pose-aligned novel-view evaluation and reports.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use monoview_autodiff::{ParamStore, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{instance_of, DatasetRecord, SceneField, SyntheticSceneSpec};
use crate::error::{Error, Result};
use crate::field::{FieldEvaluator, LatentCodes};
use crate::geometry::{fit_offset_rotation, CameraPose, Intrinsics, RigidPose};
use crate::image::Image;
use crate::math::Mat3;
use crate::networks::encode_image;
use crate::rendering::{render_patch, FieldValues, PatchSpec, SamplingConfig};
use crate::training::TrainConfig;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
/// Alpha threshold defining the foreground for masked PSNR.
pub const FOREGROUND_ALPHA: f64 = 0.5;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_shapes<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::Argument(format!(
            "image shapes differ: {}×{}×{} vs {}×{}×{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )))
    }
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    }
}

/// `−10·log10(MSE)` with peak 1, capped at [`PSNR_CAP`].
pub fn psnr<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    check_shapes(a, b)?;
    let n = a.data.len().max(1) as f64;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x.to_f64().unwrap() - y.to_f64().unwrap()).powi(2)).sum::<f64>() / n;
    Ok(psnr_from_mse(mse))
}

/// PSNR over the union of the two foregrounds (alpha ≥ 0.5 in either);
/// pixels outside it share the canvas and carry no error.
pub fn masked_psnr<T: Scalar>(a: &Image<T>, b: &Image<T>, alpha_a: &Image<T>, alpha_b: &Image<T>) -> Result<f64> {
    check_shapes(a, b)?;
    check_shapes(alpha_a, alpha_b)?;
    if alpha_a.width != a.width || alpha_a.height != a.height || alpha_a.channels != 1 {
        return Err(Error::Argument("alpha masks must be single-channel and match the images".into()));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for y in 0..a.height {
        for x in 0..a.width {
            let fg = alpha_a.get(x, y, 0).to_f64().unwrap() >= FOREGROUND_ALPHA || alpha_b.get(x, y, 0).to_f64().unwrap() >= FOREGROUND_ALPHA;
            if fg {
                for c in 0..a.channels {
                    sum += (a.get(x, y, c).to_f64().unwrap() - b.get(x, y, c).to_f64().unwrap()).powi(2);
                }
                count += a.channels;
            }
        }
    }
    Ok(if count == 0 { PSNR_CAP } else { psnr_from_mse(sum / count as f64) })
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Mean local SSIM with an 11×11 Gaussian window (σ 1.5) over valid
/// window positions, averaged over channels.
pub fn ssim<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    check_shapes(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::Argument(format!("ssim needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}")));
    }
    let w = gaussian_window();
    let (ow, oh) = (a.width - SSIM_WINDOW + 1, a.height - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for c in 0..a.channels {
        let mut acc = 0.0;
        for y0 in 0..oh {
            for x0 in 0..ow {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (dy, wy) in w.iter().enumerate() {
                    for (dx, wx) in w.iter().enumerate() {
                        let k = wy * wx;
                        let va = a.get(x0 + dx, y0 + dy, c).to_f64().unwrap();
                        let vb = b.get(x0 + dx, y0 + dy, c).to_f64().unwrap();
                        ma += k * va;
                        mb += k * vb;
                        saa += k * va * va;
                        sbb += k * vb * vb;
                        sab += k * va * vb;
                    }
                }
                let (va, vb, cov) = ((saa - ma * ma).max(0.0), (sbb - mb * mb).max(0.0), sab - ma * mb);
                acc += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            }
        }
        total += acc / (ow * oh) as f64;
    }
    Ok(total / a.channels as f64)
}

/// A model that reconstructs an object from one view and renders it from
/// other poses in its own canonical frame.
pub trait NovelViewModel<T: Scalar> {
    type Latent;

    /// Latent object description and predicted pose of the input view.
    fn encode(&self, input: &DatasetRecord<T>) -> Result<(Self::Latent, CameraPose<T>)>;

    /// Colour and alpha of the object seen from `pose`.
    fn render(&self, latent: &Self::Latent, pose: &RigidPose<T>, intr: &Intrinsics<T>) -> Result<(Image<T>, Image<T>)>;
}

/// Full-frame render: colour, alpha and expected depth.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView<T> {
    pub rgb: Image<T>,
    pub alpha: Image<T>,
    pub depth: Image<T>,
}

/// Renders every pixel of `intr` from `pose` (sample seed fixed at 0).
pub fn render_view<T: Scalar>(field: &dyn FieldValues<T>, pose: &RigidPose<T>, intr: &Intrinsics<T>, sampling: &SamplingConfig) -> Result<RenderedView<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = render_patch(field, pose, intr, &PatchSpec::full(intr), sampling, &mut rng)?;
    Ok(RenderedView {
        rgb: Image::from_data(intr.width, intr.height, 3, out.rgb.iter().flatten().copied().collect())?,
        alpha: Image::from_data(intr.width, intr.height, 1, out.alpha)?,
        depth: Image::from_data(intr.width, intr.height, 1, out.depth)?,
    })
}

fn render_full<T: Scalar>(field: &dyn FieldValues<T>, pose: &RigidPose<T>, intr: &Intrinsics<T>, sampling: &SamplingConfig) -> Result<(Image<T>, Image<T>)> {
    let v = render_view(field, pose, intr, sampling)?;
    Ok((v.rgb, v.alpha))
}

/// Trained encoder and field.
pub struct TrainedModel<T: Scalar> {
    pub config: TrainConfig,
    pub params: ParamStore<T>,
    /// Sampling used for inference (jitter off for determinism).
    pub sampling: SamplingConfig,
}

impl<T: Scalar> TrainedModel<T> {
    pub fn new(config: TrainConfig, params: ParamStore<T>) -> Self {
        let sampling = SamplingConfig { jitter: false, ..config.sampling.clone() };
        Self { config, params, sampling }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (cfg, params) = crate::training::load_model(path)?;
        Ok(Self::new(cfg, params))
    }

    /// Like [`NovelViewModel::render`], with expected depth.
    pub fn render_view(&self, latent: &(LatentCodes<T>, bool), pose: &RigidPose<T>, intr: &Intrinsics<T>) -> Result<RenderedView<T>> {
        let field = FieldEvaluator {
            cfg: &self.config.field,
            params: &self.params,
            codes: latent.0.clone(),
            symmetric: latent.1,
            progress: 1.0,
        };
        render_view(&field, pose, intr, &self.sampling)
    }
}

impl<T: Scalar> NovelViewModel<T> for TrainedModel<T> {
    type Latent = (LatentCodes<T>, bool);

    fn encode(&self, input: &DatasetRecord<T>) -> Result<(Self::Latent, CameraPose<T>)> {
        let out = encode_image(&input.image, &input.mask, &self.config.encoder, &self.params)?;
        Ok(((out.codes, input.symmetric), out.pose))
    }

    fn render(&self, latent: &Self::Latent, pose: &RigidPose<T>, intr: &Intrinsics<T>) -> Result<(Image<T>, Image<T>)> {
        let v = self.render_view(latent, pose, intr)?;
        Ok((v.rgb, v.alpha))
    }
}

/// The generator's own analytic scenes with ground-truth poses; an upper
/// bound for any learned model.
pub struct AnalyticModel {
    pub specs: HashMap<String, SyntheticSceneSpec>,
    pub sampling: SamplingConfig,
}

impl AnalyticModel {
    pub fn new(specs: &[SyntheticSceneSpec], sampling: SamplingConfig) -> Self {
        Self { specs: specs.iter().map(|s| (s.instance_id.clone(), s.clone())).collect(), sampling }
    }
}

impl<T: Scalar> NovelViewModel<T> for AnalyticModel {
    type Latent = String;

    fn encode(&self, input: &DatasetRecord<T>) -> Result<(String, CameraPose<T>)> {
        let instance = instance_of(&input.id).to_string();
        if !self.specs.contains_key(&instance) {
            return Err(Error::Argument(format!("no scene spec for instance `{instance}`")));
        }
        let pose = *input.ground_truth_pose().ok_or_else(|| Error::Config(format!("record `{}` has no pose", input.id)))?;
        Ok((instance, pose))
    }

    fn render(&self, latent: &String, pose: &RigidPose<T>, intr: &Intrinsics<T>) -> Result<(Image<T>, Image<T>)> {
        render_full(&SceneField(&self.specs[latent]), pose, intr, &self.sampling)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Leading share of pairs whose input poses fit the offset rotation.
    pub calibration_fraction: f64,
    /// Apply the fitted offset before rendering targets.
    pub align: bool,
    /// PSNR over the foreground union rather than the whole image.
    pub masked_psnr: bool,
    pub regime: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { calibration_fraction: 0.2, align: true, masked_psnr: true, regime: "unknown".into() }
    }
}

/// Input view and held-out target, as dataset indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalPair {
    pub input: usize,
    pub target: usize,
}

/// Per instance (by record id), the first view is the input and every other
/// view a target; single-view instances are scored on their own view.
pub fn held_out_pairs<T>(records: &[DatasetRecord<T>]) -> Vec<EvalPair> {
    let mut groups: Vec<(&str, Vec<usize>)> = Vec::new();
    let mut slot: HashMap<&str, usize> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        let inst = instance_of(&r.id);
        let k = *slot.entry(inst).or_insert_with(|| {
            groups.push((inst, Vec::new()));
            groups.len() - 1
        });
        groups[k].1.push(i);
    }
    let mut pairs = Vec::new();
    for (_, members) in groups {
        let input = members[0];
        if members.len() == 1 {
            pairs.push(EvalPair { input, target: input });
        } else {
            pairs.extend(members[1..].iter().map(|&target| EvalPair { input, target }));
        }
    }
    pairs
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordScore {
    pub record_id: String,
    pub input_id: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub regime: String,
    pub records: Vec<RecordScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Mean squared Frobenius residual of the offset fit.
    pub alignment_residual: f64,
    /// Row-major offset rotation (model frame to ground-truth frame).
    pub offset: [[f64; 3]; 3],
}

impl EvalReport {
    pub fn from_scores(regime: &str, records: Vec<RecordScore>, alignment_residual: f64, offset: [[f64; 3]; 3]) -> Self {
        let n = records.len().max(1) as f64;
        let mean_psnr = records.iter().map(|r| r.psnr).sum::<f64>() / n;
        let mean_ssim = records.iter().map(|r| r.ssim).sum::<f64>() / n;
        Self { regime: regime.to_string(), records, mean_psnr, mean_ssim, alignment_residual, offset }
    }

    /// Tab-separated per-record rows followed by a summary block.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("record_id\tinput_id\tpsnr\tssim\n");
        for r in &self.records {
            let _ = writeln!(out, "{}\t{}\t{:.6}\t{:.6}", r.record_id, r.input_id, r.psnr, r.ssim);
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "# summary");
        let _ = writeln!(out, "regime\t{}", self.regime);
        let _ = writeln!(out, "records\t{}", self.records.len());
        let _ = writeln!(out, "mean_psnr\t{:.6}", self.mean_psnr);
        let _ = writeln!(out, "mean_ssim\t{:.6}", self.mean_ssim);
        let _ = writeln!(out, "alignment_residual\t{:.6e}", self.alignment_residual);
        out
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Encodes each input view, fits one offset rotation on the calibration
/// share of pairs, renders every target at its offset-corrected ground-truth
/// pose and scores it against the target image.
pub fn evaluate_novel_views<T: Scalar, M: NovelViewModel<T>>(
    model: &M,
    records: &[DatasetRecord<T>],
    pairs: &[EvalPair],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Config("nothing to evaluate".into()));
    }
    if !(cfg.calibration_fraction > 0.0 && cfg.calibration_fraction <= 1.0) {
        return Err(Error::Config(format!("calibration_fraction must lie in (0, 1], got {}", cfg.calibration_fraction)));
    }
    for p in pairs {
        for i in [p.input, p.target] {
            let r = records.get(i).ok_or_else(|| Error::Argument(format!("pair index {i} out of range")))?;
            if !r.has_pose() {
                return Err(Error::Config(format!("evaluation needs ground-truth poses; record `{}` has none", r.id)));
            }
        }
    }
    let mut latents: HashMap<usize, (M::Latent, CameraPose<T>)> = HashMap::new();
    for p in pairs {
        if let std::collections::hash_map::Entry::Vacant(e) = latents.entry(p.input) {
            e.insert(model.encode(&records[p.input])?);
        }
    }
    let calibration = ((cfg.calibration_fraction * pairs.len() as f64).ceil() as usize).clamp(1, pairs.len());
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    let mut seen = Vec::new();
    for p in &pairs[..calibration] {
        if !seen.contains(&p.input) {
            seen.push(p.input);
            pred.push(latents[&p.input].1);
            gt.push(*records[p.input].ground_truth_pose().expect("checked above"));
        }
    }
    let fit = fit_offset_rotation(&pred, &gt)?;
    let offset: Mat3<T> = if cfg.align { fit.rotation } else { Mat3::identity() };
    let mut scores = Vec::with_capacity(pairs.len());
    for p in pairs {
        let target = &records[p.target];
        let gt_pose = target.ground_truth_pose().expect("checked above").rigid();
        // R_model = Oᵀ·R_gt renders the ground-truth view in the model frame.
        let pose = gt_pose.rotated_world(&offset.transpose());
        let (rgb, alpha) = model.render(&latents[&p.input].0, &pose, &target.intrinsics)?;
        let psnr_value = if cfg.masked_psnr { masked_psnr(&rgb, &target.image, &alpha, &target.mask)? } else { psnr(&rgb, &target.image)? };
        scores.push(RecordScore {
            record_id: target.id.clone(),
            input_id: records[p.input].id.clone(),
            psnr: psnr_value,
            ssim: ssim(&rgb, &target.image)?,
        });
    }
    let o = fit.rotation.cast::<f64>();
    Ok(EvalReport::from_scores(&cfg.regime, scores, fit.residual.to_f64().unwrap(), o.0))
}
