//! Conditional radiance field: encoded point and shape code drive a density
//! trunk; trunk features, encoded view direction and appearance code drive the
//! colour head.

use std::rc::Rc;

use monoview_autodiff::{lit, Bound, Graph, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{encode_rows, EncodingConfig};
use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::nn::{init_linear, linear};
use crate::rendering::{FieldValues, VolumeField};

pub const CODE_DIM: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct LatentCodes<T> {
    pub shape: Vec<T>,
    pub appearance: Vec<T>,
}

impl<T: Scalar> LatentCodes<T> {
    pub fn new(shape: Vec<T>, appearance: Vec<T>) -> Result<Self> {
        let codes = Self { shape, appearance };
        codes.validate()?;
        Ok(codes)
    }

    pub fn zeros() -> Self {
        Self { shape: vec![T::zero(); CODE_DIM], appearance: vec![T::zero(); CODE_DIM] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.len() != CODE_DIM || self.appearance.len() != CODE_DIM {
            return Err(Error::Argument(format!(
                "latent codes must have {CODE_DIM} entries each, got ({}, {})",
                self.shape.len(),
                self.appearance.len()
            )));
        }
        if !self.shape.iter().chain(&self.appearance).all(|v| v.is_finite()) {
            return Err(Error::Numeric("latent code is not finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub mlp_depth: usize,
    pub mlp_width: usize,
    /// Hidden width of the colour head.
    pub color_width: usize,
    pub scene_box_half_extent: f64,
    /// Global switch; a record must also be flagged symmetric.
    pub symmetry_enabled: bool,
    pub position_encoding: EncodingConfig,
    /// Bands for the view direction, annealed on the same schedule as positions.
    pub direction_frequencies: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            mlp_depth: 6,
            mlp_width: 128,
            color_width: 64,
            scene_box_half_extent: 0.4,
            symmetry_enabled: true,
            position_encoding: EncodingConfig::default(),
            direction_frequencies: 4,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mlp_depth == 0 || self.mlp_width == 0 || self.color_width == 0 {
            return Err(Error::Config("field depth and widths must be at least 1".into()));
        }
        if !(self.scene_box_half_extent > 0.0) {
            return Err(Error::Config("scene box half extent must be positive".into()));
        }
        self.position_encoding.validate()
    }

    pub fn direction_encoding(&self) -> EncodingConfig {
        EncodingConfig {
            num_frequencies: self.direction_frequencies,
            include_raw_input: true,
            anneal_duration: self.position_encoding.anneal_duration,
        }
    }

    /// Parameter names and shapes, in a fixed order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let pos = self.position_encoding.output_dim(3);
        let dir = self.direction_encoding().output_dim(3);
        let w = self.mlp_width;
        let mut out = Vec::new();
        for i in 0..self.mlp_depth {
            let input = if i == 0 { pos + CODE_DIM } else { w };
            out.push((format!("field.trunk.{i}.weight"), vec![input, w]));
            out.push((format!("field.trunk.{i}.bias"), vec![w]));
        }
        out.push(("field.density.weight".into(), vec![w, 1]));
        out.push(("field.density.bias".into(), vec![1]));
        out.push(("field.feature.weight".into(), vec![w, w]));
        out.push(("field.feature.bias".into(), vec![w]));
        out.push(("field.color_hidden.weight".into(), vec![w + dir + CODE_DIM, self.color_width]));
        out.push(("field.color_hidden.bias".into(), vec![self.color_width]));
        out.push(("field.rgb.weight".into(), vec![self.color_width, 3]));
        out.push(("field.rgb.bias".into(), vec![3]));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadianceSample<T> {
    pub density: T,
    pub rgb: Vec3<T>,
}

pub fn symmetrize_point<T: Scalar>(x: &Vec3<T>) -> Vec3<T> {
    [x[0], x[1].abs(), x[2]]
}

/// Closed box: `max |x_i| ≤ half_extent`.
pub fn box_mask<T: Scalar>(x: &Vec3<T>, half_extent: T) -> bool {
    x.iter().all(|v| v.abs() <= half_extent)
}

/// Random initial parameters for `cfg`.
pub fn init_field_params<T: Scalar, R: Rng + ?Sized>(cfg: &FieldConfig, rng: &mut R) -> ParamStore<T> {
    let mut store = ParamStore::new();
    for (name, shape) in cfg.parameter_shapes() {
        if let Some(prefix) = name.strip_suffix(".weight") {
            let (w, b) = init_linear(shape[0], shape[1], rng);
            store.insert(name.clone(), w);
            store.insert(format!("{prefix}.bias"), b);
        }
    }
    store
}

/// Inputs of a batched field evaluation. Points belong to rays, rays belong
/// to batch items; per-ray and per-item terms are computed once and gathered.
pub struct FieldInputs<'g, T: Scalar> {
    /// `[N, 3]`
    pub points: Var<'g, T>,
    /// ray of each point, length N
    pub sample_ray: Rc<[usize]>,
    /// unit view directions, `[R, 3]`
    pub directions: Var<'g, T>,
    /// batch item of each ray, length R
    pub ray_item: Rc<[usize]>,
    /// `[B, 64]`
    pub shape_codes: Var<'g, T>,
    /// `[B, 64]`
    pub appearance_codes: Var<'g, T>,
    /// per batch item
    pub symmetric: Rc<[bool]>,
}

/// Differentiable `(x, y, z) → (x, |y|, z)` on the rows selected by `flip`.
fn symmetrize_rows<'g, T: Scalar>(points: Var<'g, T>, flip: Rc<[bool]>) -> Var<'g, T> {
    let p = points.value();
    let mut data = p.data().to_vec();
    for (row, &f) in data.chunks_mut(3).zip(flip.iter()) {
        if f {
            row[1] = row[1].abs();
        }
    }
    let a = points.id();
    let n = p.rows();
    points.graph().custom(&[points], Tensor::from_parts([n, 3], data), move |_, g, vals, grads| {
        let input = vals[a].clone();
        let slot = grads.slot(a, vals);
        for i in 0..n {
            for k in 0..3 {
                let mut gv = g.data()[3 * i + k];
                if k == 1 && flip[i] && input.data()[3 * i + 1] < T::zero() {
                    gv = -gv;
                }
                slot[3 * i + k] += gv;
            }
        }
    })
}

/// Evaluates the field; returns densities `[N]` and colours `[N, 3]`.
pub fn field_forward<'g, T: Scalar>(
    cfg: &FieldConfig,
    p: &Bound<'g, T>,
    inputs: &FieldInputs<'g, T>,
    progress: f64,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let pts = inputs.points.value();
    let n = pts.rows();
    let rays = inputs.directions.value().rows();
    let items = inputs.shape_codes.value().rows();
    if pts.shape() != [n, 3] || inputs.directions.shape() != [rays, 3] {
        return Err(Error::Argument("points and directions must be [N, 3] and [R, 3]".into()));
    }
    if inputs.shape_codes.shape() != [items, CODE_DIM] || inputs.appearance_codes.shape() != [items, CODE_DIM] {
        return Err(Error::Argument(format!("codes must be [B, {CODE_DIM}]")));
    }
    if inputs.sample_ray.len() != n || inputs.ray_item.len() != rays || inputs.symmetric.len() != items {
        return Err(Error::Argument("index maps do not match the point, ray and item counts".into()));
    }
    if inputs.sample_ray.iter().any(|&r| r >= rays) || inputs.ray_item.iter().any(|&b| b >= items) {
        return Err(Error::Argument("index map out of range".into()));
    }
    let sample_item: Rc<[usize]> = inputs.sample_ray.iter().map(|&r| inputs.ray_item[r]).collect();

    let half = lit::<T>(cfg.scene_box_half_extent);
    let mask: Vec<T> = pts
        .data()
        .chunks(3)
        .map(|x| if box_mask(&[x[0], x[1], x[2]], half) { T::one() } else { T::zero() })
        .collect();

    let x = if cfg.symmetry_enabled {
        let flip: Rc<[bool]> = sample_item.iter().map(|&b| inputs.symmetric[b]).collect();
        symmetrize_rows(inputs.points, flip)
    } else {
        inputs.points
    };
    let pos_dim = cfg.position_encoding.output_dim(3);
    let dir_dim = cfg.direction_encoding().output_dim(3);
    let w = cfg.mlp_width;

    let gx = encode_rows(x, &cfg.position_encoding, progress);
    let w0 = p.get("field.trunk.0.weight");
    let code_term = inputs.shape_codes.matmul(w0.slice_rows(pos_dim, pos_dim + CODE_DIM));
    let mut h = gx
        .matmul(w0.slice_rows(0, pos_dim))
        .add(code_term.gather_rows(sample_item.clone()))
        .add_row(p.get("field.trunk.0.bias"))
        .relu();
    for i in 1..cfg.mlp_depth {
        h = linear(h, p, &format!("field.trunk.{i}")).relu();
    }
    let density = linear(h, p, "field.density")
        .softplus()
        .mul_const(Rc::new(Tensor::from_parts([n, 1], mask)))
        .reshape([n]);

    let feature = linear(h, p, "field.feature");
    let wc = p.get("field.color_hidden.weight");
    let gd = encode_rows(inputs.directions, &cfg.direction_encoding(), progress);
    let item_term = inputs.appearance_codes.matmul(wc.slice_rows(w + dir_dim, w + dir_dim + CODE_DIM));
    let ray_term = gd
        .matmul(wc.slice_rows(w, w + dir_dim))
        .add(item_term.gather_rows(inputs.ray_item.clone()));
    let hidden = feature
        .matmul(wc.slice_rows(0, w))
        .add(ray_term.gather_rows(inputs.sample_ray.clone()))
        .add_row(p.get("field.color_hidden.bias"))
        .relu();
    let rgb = linear(hidden, p, "field.rgb").sigmoid();
    Ok((density, rgb))
}

/// Forward-only evaluation for a single object: one direction per point.
pub fn query_field<T: Scalar>(
    points: &[Vec3<T>],
    dirs: &[Vec3<T>],
    codes: &LatentCodes<T>,
    cfg: &FieldConfig,
    params: &ParamStore<T>,
    symmetric: bool,
    progress: f64,
) -> Result<Vec<RadianceSample<T>>> {
    codes.validate()?;
    if points.len() != dirs.len() {
        return Err(Error::Argument(format!("{} points but {} directions", points.len(), dirs.len())));
    }
    let n = points.len();
    let g = Graph::new();
    let p = params.bind(&g, false);
    let inputs = FieldInputs {
        points: g.constant(Tensor::from_parts([n, 3], points.iter().flatten().copied().collect())),
        sample_ray: (0..n).collect(),
        directions: g.constant(Tensor::from_parts([n, 3], dirs.iter().flatten().copied().collect())),
        ray_item: vec![0; n].into(),
        shape_codes: g.constant(Tensor::from_parts([1, CODE_DIM], codes.shape.clone())),
        appearance_codes: g.constant(Tensor::from_parts([1, CODE_DIM], codes.appearance.clone())),
        symmetric: vec![symmetric].into(),
    };
    let (density, rgb) = field_forward(cfg, &p, &inputs, progress)?;
    let (d, c) = (density.value(), rgb.value());
    Ok((0..n)
        .map(|i| RadianceSample { density: d.data()[i], rgb: [c.data()[3 * i], c.data()[3 * i + 1], c.data()[3 * i + 2]] })
        .collect())
}

/// The field conditioned on a batch of latent codes, bound to a graph, as
/// seen by the renderer.
pub struct ConditionedField<'a, 'g, T: Scalar> {
    pub cfg: &'a FieldConfig,
    /// Parameter values (for forward-only queries).
    pub store: &'a ParamStore<T>,
    /// The same parameters on the graph.
    pub params: &'a Bound<'g, T>,
    pub shape_codes: Var<'g, T>,
    pub appearance_codes: Var<'g, T>,
    /// batch item of each ray
    pub ray_item: Rc<[usize]>,
    pub symmetric: Rc<[bool]>,
    pub progress: f64,
}

impl<T: Scalar> FieldValues<T> for ConditionedField<'_, '_, T> {
    fn evaluate(&self, points: &[T], directions: &[T], sample_ray: &[usize]) -> Result<(Vec<T>, Vec<T>)> {
        let g = Graph::new();
        let p = self.store.bind(&g, false);
        let n = points.len() / 3;
        let r = directions.len() / 3;
        let inputs = FieldInputs {
            points: g.constant(Tensor::from_parts([n, 3], points.to_vec())),
            sample_ray: sample_ray.into(),
            directions: g.constant(Tensor::from_parts([r, 3], directions.to_vec())),
            ray_item: self.ray_item.clone(),
            shape_codes: g.constant((*self.shape_codes.value()).clone()),
            appearance_codes: g.constant((*self.appearance_codes.value()).clone()),
            symmetric: self.symmetric.clone(),
        };
        let (d, c) = field_forward(self.cfg, &p, &inputs, self.progress)?;
        Ok((d.value().data().to_vec(), c.value().data().to_vec()))
    }
}

impl<'g, T: Scalar> VolumeField<'g, T> for ConditionedField<'_, 'g, T> {
    fn query(&self, points: Var<'g, T>, directions: Var<'g, T>, sample_ray: Rc<[usize]>) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let inputs = FieldInputs {
            points,
            sample_ray,
            directions,
            ray_item: self.ray_item.clone(),
            shape_codes: self.shape_codes,
            appearance_codes: self.appearance_codes,
            symmetric: self.symmetric.clone(),
        };
        field_forward(self.cfg, self.params, &inputs, self.progress)
    }
}

/// Forward-only field of a single object, for inference rendering.
pub struct FieldEvaluator<'a, T: Scalar> {
    pub cfg: &'a FieldConfig,
    pub params: &'a ParamStore<T>,
    pub codes: LatentCodes<T>,
    pub symmetric: bool,
    pub progress: f64,
}

impl<T: Scalar> FieldValues<T> for FieldEvaluator<'_, T> {
    fn evaluate(&self, points: &[T], directions: &[T], sample_ray: &[usize]) -> Result<(Vec<T>, Vec<T>)> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let n = points.len() / 3;
        let r = directions.len() / 3;
        let inputs = FieldInputs {
            points: g.constant(Tensor::from_parts([n, 3], points.to_vec())),
            sample_ray: sample_ray.into(),
            directions: g.constant(Tensor::from_parts([r, 3], directions.to_vec())),
            ray_item: vec![0; r].into(),
            shape_codes: g.constant(Tensor::from_parts([1, CODE_DIM], self.codes.shape.clone())),
            appearance_codes: g.constant(Tensor::from_parts([1, CODE_DIM], self.codes.appearance.clone())),
            symmetric: vec![self.symmetric].into(),
        };
        let (d, c) = field_forward(self.cfg, &p, &inputs, self.progress)?;
        Ok((d.value().data().to_vec(), c.value().data().to_vec()))
    }
}
