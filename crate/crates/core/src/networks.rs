//! Two-tower image encoder (latent codes and camera pose) and the colour and
//! alpha patch discriminators.

use std::rc::Rc;

use monoview_autodiff::{lit, Bound, Graph, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{LatentCodes, CODE_DIM};
use crate::geometry::CameraPose;
use crate::image::Image;
use crate::nn::{conv, init_conv, init_linear, linear};

/// Pairs shorter than this are replaced by `(1, 0)`.
pub const PAIR_NORM_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub channels: usize,
    pub blocks: usize,
    pub stride: usize,
}

/// Residual convolutional feature extractor: a 3×3 stem followed by stages
/// of basic residual blocks; the final feature map is flattened.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub stages: Vec<StageConfig>,
}

impl BackboneConfig {
    pub fn tiny() -> Self {
        Self {
            stem_channels: 8,
            stem_stride: 1,
            stages: vec![
                StageConfig { channels: 8, blocks: 1, stride: 2 },
                StageConfig { channels: 16, blocks: 1, stride: 2 },
                StageConfig { channels: 32, blocks: 1, stride: 2 },
            ],
        }
    }

    /// Basic-block layout of a 34-layer residual network.
    pub fn full() -> Self {
        Self {
            stem_channels: 64,
            stem_stride: 2,
            stages: vec![
                StageConfig { channels: 64, blocks: 3, stride: 1 },
                StageConfig { channels: 128, blocks: 4, stride: 2 },
                StageConfig { channels: 256, blocks: 6, stride: 2 },
                StageConfig { channels: 512, blocks: 3, stride: 2 },
            ],
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!("unknown backbone preset `{other}` (expected tiny or full)"))),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.stem_channels > 0
            && self.stem_stride > 0
            && self.stages.iter().all(|s| s.channels > 0 && s.blocks > 0 && s.stride > 0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("degenerate backbone {self:?}")))
        }
    }

    /// `(channels, side)` of the final feature map for a square input.
    pub fn output_shape(&self, side: usize) -> (usize, usize) {
        let down = |s: usize, stride: usize| (s - 1) / stride + 1;
        let mut s = down(side, self.stem_stride);
        let mut c = self.stem_channels;
        for st in &self.stages {
            s = down(s, st.stride);
            c = st.channels;
        }
        (c, s)
    }

    fn parameter_shapes(&self, prefix: &str, input_channels: usize) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![(format!("{prefix}.stem.weight"), vec![self.stem_channels, input_channels, 3, 3])];
        out.push((format!("{prefix}.stem.bias"), vec![self.stem_channels]));
        let mut c_in = self.stem_channels;
        for (si, st) in self.stages.iter().enumerate() {
            for b in 0..st.blocks {
                let name = format!("{prefix}.stage{si}.block{b}");
                let stride = if b == 0 { st.stride } else { 1 };
                out.push((format!("{name}.conv1.weight"), vec![st.channels, c_in, 3, 3]));
                out.push((format!("{name}.conv1.bias"), vec![st.channels]));
                out.push((format!("{name}.conv2.weight"), vec![st.channels, st.channels, 3, 3]));
                out.push((format!("{name}.conv2.bias"), vec![st.channels]));
                if stride != 1 || c_in != st.channels {
                    out.push((format!("{name}.skip.weight"), vec![st.channels, c_in, 1, 1]));
                    out.push((format!("{name}.skip.bias"), vec![st.channels]));
                }
                c_in = st.channels;
            }
        }
        out
    }
}

fn backbone_forward<'g, T: Scalar>(cfg: &BackboneConfig, p: &Bound<'g, T>, prefix: &str, x: Var<'g, T>) -> Var<'g, T> {
    let mut h = conv(x, p, &format!("{prefix}.stem"), cfg.stem_stride, 1).relu();
    let mut c_in = cfg.stem_channels;
    for (si, st) in cfg.stages.iter().enumerate() {
        for b in 0..st.blocks {
            let name = format!("{prefix}.stage{si}.block{b}");
            let stride = if b == 0 { st.stride } else { 1 };
            let y = conv(h, p, &format!("{name}.conv1"), stride, 1).relu();
            let y = conv(y, p, &format!("{name}.conv2"), 1, 1);
            let skip = if stride != 1 || c_in != st.channels { conv(h, p, &format!("{name}.skip"), stride, 0) } else { h };
            h = y.add(skip).relu();
            c_in = st.channels;
        }
    }
    h
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    /// Append the mask as a fourth input channel.
    pub mask_channel: bool,
    pub backbone: BackboneConfig,
    /// Lower bound of the predicted forward offset.
    pub min_depth: f64,
    /// Forward offset predicted by a freshly initialised head.
    pub initial_depth: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { image_size: 112, mask_channel: true, backbone: BackboneConfig::full(), min_depth: 0.2, initial_depth: 1.8 }
    }
}

impl EncoderConfig {
    pub fn tiny(image_size: usize) -> Self {
        Self { image_size, backbone: BackboneConfig::tiny(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 {
            return Err(Error::Config("encoder image size must be positive".into()));
        }
        if !(self.min_depth > 0.0 && self.initial_depth > self.min_depth) {
            return Err(Error::Config("encoder needs 0 < min_depth < initial_depth".into()));
        }
        self.backbone.validate()
    }

    pub fn input_channels(&self) -> usize {
        if self.mask_channel {
            4
        } else {
            3
        }
    }

    pub fn feature_dim(&self) -> usize {
        let (c, s) = self.backbone.output_shape(self.image_size);
        c * s * s
    }

    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = self.backbone.parameter_shapes("encoder.codes", self.input_channels());
        out.push(("encoder.codes.head.weight".into(), vec![self.feature_dim(), 2 * CODE_DIM]));
        out.push(("encoder.codes.head.bias".into(), vec![2 * CODE_DIM]));
        out.extend(self.backbone.parameter_shapes("encoder.pose", self.input_channels()));
        out.push(("encoder.pose.head.weight".into(), vec![self.feature_dim(), 7]));
        out.push(("encoder.pose.head.bias".into(), vec![7]));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

fn init_from_shapes<T: Scalar, R: Rng + ?Sized>(shapes: &[(String, Vec<usize>)], rng: &mut R) -> ParamStore<T> {
    let mut store = ParamStore::new();
    for (name, shape) in shapes {
        if let Some(prefix) = name.strip_suffix(".weight") {
            let (w, b) = if shape.len() == 4 {
                init_conv(shape[1], shape[0], shape[2], rng)
            } else {
                init_linear(shape[0], shape[1], rng)
            };
            store.insert(name.clone(), w);
            store.insert(format!("{prefix}.bias"), b);
        }
    }
    store
}

pub fn init_encoder_params<T: Scalar, R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> ParamStore<T> {
    let mut store = init_from_shapes(&cfg.parameter_shapes(), rng);
    // small pose head so initial poses sit near the prior's distance
    let head = store.get_mut("encoder.pose.head.weight").unwrap();
    head.data_mut().iter_mut().for_each(|v| *v *= lit(0.1));
    let target = cfg.initial_depth - cfg.min_depth;
    let bias = store.get_mut("encoder.pose.head.bias").unwrap();
    let d = bias.data_mut();
    d[0] = T::one();
    d[2] = T::one();
    d[6] = lit(target.exp_m1().ln());
    store
}

/// Unit-normalises `(cols a, a+1)` of every row; rows whose pair is shorter
/// than [`PAIR_NORM_FLOOR`] become `(1, 0)` with zero gradient.
fn normalize_pairs<'g, T: Scalar>(x: Var<'g, T>, pairs: &'static [usize]) -> Var<'g, T> {
    let xv = x.value();
    let (rows, cols) = (xv.rows(), xv.cols());
    let mut data = xv.data().to_vec();
    let floor = lit::<T>(PAIR_NORM_FLOOR);
    for r in 0..rows {
        for &a in pairs {
            let (c, s) = (data[r * cols + a], data[r * cols + a + 1]);
            let n = (c * c + s * s).sqrt();
            let (c, s) = if n < floor { (T::one(), T::zero()) } else { (c / n, s / n) };
            data[r * cols + a] = c;
            data[r * cols + a + 1] = s;
        }
    }
    let id = x.id();
    x.graph().custom(&[x], Tensor::from_parts([rows, cols], data), move |out_id, g, vals, grads| {
        let input = vals[id].clone();
        let out = vals[out_id].clone();
        let slot = grads.slot(id, vals);
        for r in 0..rows {
            for c in 0..cols {
                if !pairs.contains(&c) && !pairs.iter().any(|&a| a + 1 == c) {
                    slot[r * cols + c] += g.data()[r * cols + c];
                }
            }
            for &a in pairs {
                let (x0, x1) = (input.data()[r * cols + a], input.data()[r * cols + a + 1]);
                let n = (x0 * x0 + x1 * x1).sqrt();
                if n < floor {
                    continue;
                }
                let (u0, u1) = (out.data()[r * cols + a], out.data()[r * cols + a + 1]);
                let (g0, g1) = (g.data()[r * cols + a], g.data()[r * cols + a + 1]);
                let proj = g0 * u0 + g1 * u1;
                slot[r * cols + a] += (g0 - proj * u0) / n;
                slot[r * cols + a + 1] += (g1 - proj * u1) / n;
            }
        }
    })
}

/// Differentiable encoder outputs for a batch.
pub struct EncodedBatch<'g, T: Scalar> {
    /// `[B, 64]`
    pub shape_codes: Var<'g, T>,
    /// `[B, 64]`
    pub appearance_codes: Var<'g, T>,
    /// `[B, 7]`: unit rotation pairs, then translation with `t_z > min_depth`
    pub pose: Var<'g, T>,
}

/// Encodes `[B, C, S, S]` inputs (RGB plus optional mask channel).
pub fn encoder_forward<'g, T: Scalar>(cfg: &EncoderConfig, p: &Bound<'g, T>, input: Var<'g, T>) -> Result<EncodedBatch<'g, T>> {
    let shape = input.shape();
    let s = cfg.image_size;
    if shape.len() != 4 || shape[1] != cfg.input_channels() || shape[2] != s || shape[3] != s {
        return Err(Error::Argument(format!(
            "encoder expects [B, {}, {s}, {s}] input, got {shape:?}",
            cfg.input_channels()
        )));
    }
    let b = shape[0];
    let feat = cfg.feature_dim();
    let codes = backbone_forward(&cfg.backbone, p, "encoder.codes", input).reshape([b, feat]);
    let codes = linear(codes, p, "encoder.codes.head");
    let pose_feat = backbone_forward(&cfg.backbone, p, "encoder.pose", input).reshape([b, feat]);
    let raw = linear(pose_feat, p, "encoder.pose.head");
    let rot = normalize_pairs(raw.slice_cols(0, 4), &[0, 2]);
    let txy = raw.slice_cols(4, 6);
    let tz = raw.slice_cols(6, 7).softplus().add_scalar(lit(cfg.min_depth));
    let pose = monoview_autodiff::concat_cols(&[rot, txy, tz]);
    Ok(EncodedBatch { shape_codes: codes.slice_cols(0, CODE_DIM), appearance_codes: codes.slice_cols(CODE_DIM, 2 * CODE_DIM), pose })
}

/// Planar encoder input for one record: masked RGB plus optional mask.
pub fn encoder_input<T: Scalar>(cfg: &EncoderConfig, image: &Image<T>, mask: &Image<T>) -> Result<Vec<T>> {
    let s = cfg.image_size;
    if image.width != s || image.height != s || image.channels != 3 {
        return Err(Error::Argument(format!(
            "encoder expects a {s}×{s} RGB image, got {}×{}×{}",
            image.width, image.height, image.channels
        )));
    }
    if mask.width != s || mask.height != s || mask.channels != 1 {
        return Err(Error::Argument(format!("encoder expects a {s}×{s} mask")));
    }
    let mut out = image.to_planar();
    if cfg.mask_channel {
        out.extend_from_slice(&mask.data);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput<T> {
    pub codes: LatentCodes<T>,
    pub pose: CameraPose<T>,
}

/// Deterministic evaluation-mode encoding of one masked image.
pub fn encode_image<T: Scalar>(image: &Image<T>, mask: &Image<T>, cfg: &EncoderConfig, params: &ParamStore<T>) -> Result<EncoderOutput<T>> {
    let s = cfg.image_size;
    let input = encoder_input(cfg, image, mask)?;
    let g = Graph::new();
    let p = params.bind(&g, false);
    let x = g.constant(Tensor::from_parts([1, cfg.input_channels(), s, s], input));
    let out = encoder_forward(cfg, &p, x)?;
    let pose = out.pose.value();
    let raw: [T; 7] = pose.data().try_into().unwrap();
    Ok(EncoderOutput {
        codes: LatentCodes::new(out.shape_codes.value().data().to_vec(), out.appearance_codes.value().data().to_vec())?,
        pose: CameraPose::from_params(raw)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    Color,
    Alpha,
}

impl ChannelMode {
    pub fn channels(self) -> usize {
        match self {
            ChannelMode::Color => 3,
            ChannelMode::Alpha => 1,
        }
    }

    pub fn prefix(self) -> &'static str {
        match self {
            ChannelMode::Color => "disc_color",
            ChannelMode::Alpha => "disc_alpha",
        }
    }
}

/// Three stride-2 4×4 convolutions with leaky ReLU, dropout, and a linear
/// layer to one logit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub patch_size: usize,
    pub channels: [usize; 3],
    pub dropout: f64,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { patch_size: 80, channels: [16, 32, 64], dropout: 0.5, leaky_slope: 0.2 }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 8 {
            return Err(Error::Config("discriminator patches must be at least 8 pixels wide".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn feature_side(&self) -> usize {
        (0..3).fold(self.patch_size, |s, _| s / 2)
    }

    pub fn parameter_shapes(&self, mode: ChannelMode) -> Vec<(String, Vec<usize>)> {
        let pre = mode.prefix();
        let mut c_in = mode.channels();
        let mut out = Vec::new();
        for (i, &c) in self.channels.iter().enumerate() {
            out.push((format!("{pre}.conv{i}.weight"), vec![c, c_in, 4, 4]));
            out.push((format!("{pre}.conv{i}.bias"), vec![c]));
            c_in = c;
        }
        let side = self.feature_side();
        out.push((format!("{pre}.head.weight"), vec![c_in * side * side, 1]));
        out.push((format!("{pre}.head.bias"), vec![1]));
        out
    }

    pub fn parameter_count(&self, mode: ChannelMode) -> usize {
        self.parameter_shapes(mode).iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

pub fn init_discriminator_params<T: Scalar, R: Rng + ?Sized>(cfg: &DiscriminatorConfig, mode: ChannelMode, rng: &mut R) -> ParamStore<T> {
    init_from_shapes(&cfg.parameter_shapes(mode), rng)
}

/// Logits `[B, 1]` for patches `[B, C, P, P]`. Dropout is active only when
/// `dropout_rng` is given (training mode).
pub fn discriminate<'g, T: Scalar, R: Rng + ?Sized>(
    patches: Var<'g, T>,
    mode: ChannelMode,
    cfg: &DiscriminatorConfig,
    p: &Bound<'g, T>,
    dropout_rng: Option<&mut R>,
) -> Result<Var<'g, T>> {
    let shape = patches.shape();
    let ps = cfg.patch_size;
    if shape.len() != 4 || shape[1] != mode.channels() || shape[2] != ps || shape[3] != ps {
        return Err(Error::Argument(format!(
            "{} discriminator expects [B, {}, {ps}, {ps}] patches, got {shape:?}",
            mode.prefix(),
            mode.channels()
        )));
    }
    let pre = mode.prefix();
    let slope = lit::<T>(cfg.leaky_slope);
    let mut h = patches;
    for i in 0..3 {
        h = conv(h, p, &format!("{pre}.conv{i}"), 2, 1).leaky_relu(slope);
    }
    let b = shape[0];
    let flat = h.value().len() / b;
    let mut h = h.reshape([b, flat]);
    if let Some(rng) = dropout_rng {
        if cfg.dropout > 0.0 {
            let keep = lit::<T>(1.0 / (1.0 - cfg.dropout));
            let mask: Vec<T> = (0..b * flat).map(|_| if rng.random::<f64>() < cfg.dropout { T::zero() } else { keep }).collect();
            h = h.mul_const(Rc::new(Tensor::from_parts([b, flat], mask)));
        }
    }
    Ok(linear(h, p, &format!("{pre}.head")))
}
