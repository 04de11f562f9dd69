//! Dataset records, the TSV manifest, mask-tight cropping, and the synthetic
//! primitive-scene generator.
//!
//! Manifest lines hold tab-separated fields: id, image path, mask path,
//! category, symmetric flag (`0`/`1`), optionally the 7 pose numbers, then
//! the 6 intrinsics numbers `fx fy cx cy width height`. Paths are relative
//! to the manifest's directory. Blank lines and lines starting with `#` are
//! skipped.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use monoview_autodiff::{lit, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::RadianceSample;
use crate::geometry::{sample_pose_prior, CameraPose, Intrinsics, PosePrior};
use crate::image::Image;
use crate::math::Vec3;
use crate::rendering::{render_patch, FieldValues, PatchSpec, SamplingConfig};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const SCENES_FILE: &str = "scenes.json";

/// Counts reads of ground-truth poses; shared by all records of a dataset.
#[derive(Clone, Debug, Default)]
pub struct PoseAudit(Arc<AtomicU64>);

impl PoseAudit {
    pub fn reads(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }

    fn record(&self) {
        self.0.fetch_add(1, Ordering::SeqCst);
    }
}

#[derive(Clone, Debug)]
pub struct DatasetRecord<T> {
    pub id: String,
    pub image: Image<T>,
    pub mask: Image<T>,
    pub intrinsics: Intrinsics<T>,
    pose: Option<CameraPose<T>>,
    pub category: String,
    pub symmetric: bool,
    audit: PoseAudit,
}

impl<T: Scalar> DatasetRecord<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: String,
        image: Image<T>,
        mask: Image<T>,
        intrinsics: Intrinsics<T>,
        pose: Option<CameraPose<T>>,
        category: String,
        symmetric: bool,
        audit: PoseAudit,
    ) -> Result<Self> {
        if image.channels != 3 || mask.channels != 1 || image.width != mask.width || image.height != mask.height {
            return Err(Error::Argument(format!("record `{id}`: image and mask shapes disagree")));
        }
        if intrinsics.width != image.width || intrinsics.height != image.height {
            return Err(Error::Argument(format!("record `{id}`: intrinsics describe a different image size")));
        }
        intrinsics.validate()?;
        Ok(Self { id, image, mask, intrinsics, pose, category, symmetric, audit })
    }

    pub fn has_pose(&self) -> bool {
        self.pose.is_some()
    }

    /// Ground-truth pose; every call is counted by the dataset's audit.
    pub fn ground_truth_pose(&self) -> Option<&CameraPose<T>> {
        self.audit.record();
        self.pose.as_ref()
    }

    pub fn audit(&self) -> &PoseAudit {
        &self.audit
    }

    /// Copy with the pose removed (used to hide labels).
    pub fn without_pose(&self) -> Self {
        Self { pose: None, ..self.clone() }
    }
}

/// One parsed manifest line.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry<T> {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub category: String,
    pub symmetric: bool,
    pub pose: Option<[T; 7]>,
    pub intrinsics: Intrinsics<T>,
}

impl<T: Scalar> ManifestEntry<T> {
    pub fn to_line(&self) -> String {
        let mut line = format!(
            "{}\t{}\t{}\t{}\t{}",
            self.id,
            self.image_path.display(),
            self.mask_path.display(),
            self.category,
            u8::from(self.symmetric)
        );
        if let Some(p) = &self.pose {
            for v in p {
                write!(line, "\t{v}").unwrap();
            }
        }
        let i = &self.intrinsics;
        write!(line, "\t{}\t{}\t{}\t{}\t{}\t{}", i.focal_x, i.focal_y, i.principal_x, i.principal_y, i.width, i.height).unwrap();
        line
    }

    pub fn parse(line: &str, path: &Path, number: usize) -> Result<Self> {
        let err = |message: String| Error::Parse { path: path.to_path_buf(), line: number, message };
        let fields: Vec<&str> = line.split('\t').collect();
        let has_pose = match fields.len() {
            11 => false,
            18 => true,
            n => return Err(err(format!("expected 11 fields (no pose) or 18 fields (with pose), found {n}"))),
        };
        let num = |s: &str, what: &str| s.trim().parse::<T>().map_err(|_| err(format!("cannot parse {what} `{s}`")));
        let symmetric = match fields[4].trim() {
            "1" | "true" => true,
            "0" | "false" => false,
            other => return Err(err(format!("symmetric flag must be 0 or 1, found `{other}`"))),
        };
        let pose = if has_pose {
            let mut p = [T::zero(); 7];
            for (k, v) in p.iter_mut().enumerate() {
                *v = num(fields[5 + k], "pose value")?;
            }
            CameraPose::from_stored_params(p).map_err(|e| err(e.to_string()))?;
            Some(p)
        } else {
            None
        };
        let base = if has_pose { 12 } else { 5 };
        let size = |s: &str| s.trim().parse::<usize>().map_err(|_| err(format!("cannot parse image size `{s}`")));
        let intrinsics = Intrinsics {
            focal_x: num(fields[base], "focal_x")?,
            focal_y: num(fields[base + 1], "focal_y")?,
            principal_x: num(fields[base + 2], "principal_x")?,
            principal_y: num(fields[base + 3], "principal_y")?,
            width: size(fields[base + 4])?,
            height: size(fields[base + 5])?,
        };
        intrinsics.validate().map_err(|e| err(e.to_string()))?;
        if fields[0].trim().is_empty() {
            return Err(err("empty record id".into()));
        }
        Ok(Self {
            id: fields[0].trim().to_string(),
            image_path: PathBuf::from(fields[1].trim()),
            mask_path: PathBuf::from(fields[2].trim()),
            category: fields[3].trim().to_string(),
            symmetric,
            pose,
            intrinsics,
        })
    }

    /// Loads the image and mask (paths relative to `root`).
    pub fn load(&self, root: &Path, audit: &PoseAudit) -> Result<DatasetRecord<T>> {
        let image = Image::load_png(&root.join(&self.image_path), 3)?;
        let mask = Image::load_png(&root.join(&self.mask_path), 1)?;
        let pose = self.pose.map(CameraPose::from_stored_params).transpose()?;
        DatasetRecord::new(self.id.clone(), image, mask, self.intrinsics, pose, self.category.clone(), self.symmetric, audit.clone())
    }
}

pub fn write_manifest<T: Scalar>(path: &Path, entries: &[ManifestEntry<T>]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&e.to_line());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses every line of a manifest without touching the images.
pub fn read_manifest_entries<T: Scalar>(path: &Path) -> Result<Vec<ManifestEntry<T>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(i, l)| ManifestEntry::parse(l, path, i + 1))
        .collect()
}

/// Lazy record iterator over a manifest.
pub struct ManifestRecords<T> {
    path: PathBuf,
    root: PathBuf,
    lines: Vec<(usize, String)>,
    next: usize,
    audit: PoseAudit,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> ManifestRecords<T> {
    pub fn audit(&self) -> &PoseAudit {
        &self.audit
    }

    /// Restarts from the first record.
    pub fn rewind(&mut self) {
        self.next = 0;
    }
}

impl<T: Scalar> Iterator for ManifestRecords<T> {
    type Item = Result<DatasetRecord<T>>;

    fn next(&mut self) -> Option<Self::Item> {
        let (number, line) = self.lines.get(self.next)?;
        self.next += 1;
        Some(ManifestEntry::parse(line, &self.path, *number).and_then(|e| e.load(&self.root, &self.audit)))
    }
}

pub fn load_manifest<T: Scalar>(path: &Path) -> Result<ManifestRecords<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect();
    Ok(ManifestRecords {
        path: path.to_path_buf(),
        root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        lines,
        next: 0,
        audit: PoseAudit::default(),
        _marker: std::marker::PhantomData,
    })
}

/// Loads every record, failing on the first error.
pub fn load_dataset<T: Scalar>(path: &Path) -> Result<(Vec<DatasetRecord<T>>, PoseAudit)> {
    let records = load_manifest(path)?;
    let audit = records.audit().clone();
    Ok((records.collect::<Result<Vec<_>>>()?, audit))
}

/// Square crop around the tight box of `{mask ≥ 0.5}`, zero padded, resized
/// to `out_size`; pixels whose mask falls below 0.5 are zeroed. Intrinsics
/// follow the crop exactly.
pub fn crop_to_mask<T: Scalar>(
    image: &Image<T>,
    mask: &Image<T>,
    intr: &Intrinsics<T>,
    out_size: usize,
) -> Result<(Image<T>, Image<T>, Intrinsics<T>)> {
    if image.channels != 3 || mask.channels != 1 || image.width != mask.width || image.height != mask.height {
        return Err(Error::Argument("image and mask shapes disagree".into()));
    }
    let (x0, x1, y0, y1) = mask_bounds(mask).ok_or_else(|| Error::EmptyMask("no pixel reaches 0.5".into()))?;
    let side = ((x1 - x0 + 1).max(y1 - y0 + 1)) as f64;
    let start = [(x0 + x1) as f64 / 2.0 - side / 2.0, (y0 + y1) as f64 / 2.0 - side / 2.0];
    let scale = out_size as f64 / side;
    let mut img = image.resample(out_size, out_size, start, scale);
    let m = mask.resample(out_size, out_size, start, scale);
    let half = lit::<T>(0.5);
    for i in 0..out_size * out_size {
        if m.data[i] < half {
            img.data[3 * i..3 * i + 3].iter_mut().for_each(|v| *v = T::zero());
        }
    }
    let s = lit::<T>(scale);
    let new_intr = Intrinsics {
        focal_x: intr.focal_x * s,
        focal_y: intr.focal_y * s,
        principal_x: (intr.principal_x - lit(start[0])) * s - half,
        principal_y: (intr.principal_y - lit(start[1])) * s - half,
        width: out_size,
        height: out_size,
    };
    Ok((img, m, new_intr))
}

/// Inclusive `(x_min, x_max, y_min, y_max)` of pixels with mask ≥ 0.5.
pub fn mask_bounds<T: Scalar>(mask: &Image<T>) -> Option<(usize, usize, usize, usize)> {
    let half = lit::<T>(0.5);
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y, 0) >= half {
                b = Some(match b {
                    None => (x, x, y, y),
                    Some((a, c, d, e)) => (a.min(x), c.max(x), d.min(y), e.max(y)),
                });
            }
        }
    }
    b
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { center: [f64; 3], radius: f64 },
    Cuboid { center: [f64; 3], half_extents: [f64; 3] },
}

impl Shape {
    pub fn contains(&self, p: &[f64; 3]) -> bool {
        match self {
            Shape::Sphere { center, radius } => {
                let d: f64 = (0..3).map(|k| (p[k] - center[k]).powi(2)).sum();
                d <= radius * radius
            }
            Shape::Cuboid { center, half_extents } => (0..3).all(|k| (p[k] - center[k]).abs() <= half_extents[k]),
        }
    }

    fn max_extent(&self) -> f64 {
        match self {
            Shape::Sphere { center, radius } => center.iter().map(|c| c.abs() + radius).fold(0.0, f64::max),
            Shape::Cuboid { center, half_extents } => (0..3).map(|k| center[k].abs() + half_extents[k]).fold(0.0, f64::max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Solid {
    pub shape: Shape,
    pub albedo: [f64; 3],
}

/// One synthetic object: a sphere, a box, or the union of two solids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub instance_id: String,
    pub parts: Vec<Solid>,
    pub category: String,
    pub symmetric: bool,
    /// Density inside the solids.
    pub density: f64,
}

impl SyntheticSceneSpec {
    pub fn validate(&self, half_extent: f64) -> Result<()> {
        if self.parts.is_empty() || self.parts.len() > 2 {
            return Err(Error::Argument(format!("scene `{}` needs one or two solids", self.instance_id)));
        }
        for part in &self.parts {
            if part.shape.max_extent() > half_extent + 1e-12 {
                return Err(Error::Argument(format!("scene `{}` leaves the ±{half_extent} box", self.instance_id)));
            }
            if part.albedo.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(Error::Argument(format!("scene `{}` has albedo outside [0, 1]", self.instance_id)));
            }
        }
        if !(self.density > 0.0) {
            return Err(Error::Argument("scene density must be positive".into()));
        }
        if self.instance_id.is_empty() || self.instance_id.contains(['\t', '/', '\n']) {
            return Err(Error::Argument(format!("invalid instance id `{}`", self.instance_id)));
        }
        Ok(())
    }

    /// Density and albedo at a world point (first containing solid wins).
    pub fn sample(&self, p: &[f64; 3]) -> (f64, [f64; 3]) {
        for part in &self.parts {
            if part.shape.contains(p) {
                return (self.density, part.albedo);
            }
        }
        (0.0, [0.0; 3])
    }

    pub fn field<T: Scalar>(&self) -> SceneField<'_> {
        SceneField(self)
    }
}

/// Analytic field of a synthetic scene.
pub struct SceneField<'a>(pub &'a SyntheticSceneSpec);

impl<T: Scalar> FieldValues<T> for SceneField<'_> {
    fn evaluate(&self, points: &[T], _directions: &[T], sample_ray: &[usize]) -> Result<(Vec<T>, Vec<T>)> {
        let mut sigma = Vec::with_capacity(sample_ray.len());
        let mut rgb = Vec::with_capacity(3 * sample_ray.len());
        for p in points.chunks(3) {
            let (d, c) = self.0.sample(&[p[0].to_f64().unwrap(), p[1].to_f64().unwrap(), p[2].to_f64().unwrap()]);
            sigma.push(lit(d));
            rgb.extend(c.iter().map(|&v| lit::<T>(v)));
        }
        Ok((sigma, rgb))
    }
}

impl SceneField<'_> {
    pub fn radiance<T: Scalar>(&self, p: Vec3<T>) -> RadianceSample<T> {
        let (d, c) = self.0.sample(&p.map(|v| v.to_f64().unwrap()));
        RadianceSample { density: lit(d), rgb: c.map(lit) }
    }
}

fn byte_grid(v: f64) -> f64 {
    (v * 255.0).round() / 255.0
}

/// Random mirror-symmetric scenes (about the plane of the second axis)
/// cycling through sphere, box and two-solid union.
pub fn random_scene_specs<R: Rng + ?Sized>(count: usize, rng: &mut R) -> Vec<SyntheticSceneSpec> {
    let albedo = |rng: &mut R| [0; 3].map(|_| byte_grid(rng.random_range(0.2..1.0)));
    (0..count)
        .map(|i| {
            let parts = match i % 3 {
                0 => vec![Solid {
                    shape: Shape::Sphere { center: [0.0; 3], radius: rng.random_range(0.2..0.35) },
                    albedo: albedo(rng),
                }],
                1 => vec![Solid {
                    shape: Shape::Cuboid {
                        center: [0.0; 3],
                        half_extents: [rng.random_range(0.1..0.35), rng.random_range(0.1..0.35), rng.random_range(0.1..0.35)],
                    },
                    albedo: albedo(rng),
                }],
                _ => {
                    let hx = rng.random_range(0.15..0.3);
                    let base = Solid {
                        shape: Shape::Cuboid { center: [0.0, 0.0, 0.0], half_extents: [hx, rng.random_range(0.05..0.15), rng.random_range(0.15..0.3)] },
                        albedo: albedo(rng),
                    };
                    let r = rng.random_range(0.08..0.15);
                    let cx = rng.random_range(-(0.4 - r)..(0.4 - r));
                    let cz = rng.random_range(-(0.4 - r)..(0.4 - r));
                    let top = Solid { shape: Shape::Sphere { center: [cx, 0.0, cz], radius: r }, albedo: albedo(rng) };
                    vec![base, top]
                }
            };
            SyntheticSceneSpec { instance_id: format!("obj{i:04}"), parts, category: "synthetic".into(), symmetric: true, density: 1000.0 }
        })
        .collect()
}

/// Settings of the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub image_size: usize,
    pub views_per_instance: usize,
    pub prior: PosePrior<f64>,
    pub sampling: SamplingConfig,
    pub seed: u64,
    /// Focal length in multiples of the image size. 1.5 frames the largest
    /// generated objects edge to edge, close to a tight mask crop.
    #[serde(default = "default_focal_scale")]
    pub focal_scale: f64,
}

fn default_focal_scale() -> f64 {
    1.5
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            views_per_instance: 4,
            prior: PosePrior::default(),
            sampling: SamplingConfig { near: 0.1, far: 4.0, num_coarse: 128, num_fine: 128, jitter: false },
            seed: 0,
            focal_scale: default_focal_scale(),
        }
    }
}

/// Renders one view of a scene: premultiplied colour and alpha.
pub fn render_scene<T: Scalar>(
    spec: &SyntheticSceneSpec,
    pose: &CameraPose<T>,
    intr: &Intrinsics<T>,
    sampling: &SamplingConfig,
    seed: u64,
) -> Result<(Image<T>, Image<T>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = render_patch(&SceneField(spec), &pose.rigid(), intr, &PatchSpec::full(intr), sampling, &mut rng)?;
    let image = Image::from_data(intr.width, intr.height, 3, out.rgb.iter().flatten().copied().collect())?;
    let mask = Image::from_data(intr.width, intr.height, 1, out.alpha)?;
    Ok((image, mask))
}

fn record_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Renders `views_per_instance` posed views of every scene and writes
/// `images/`, `masks/`, the manifest and `scenes.json` under `out_dir`.
pub fn generate_synthetic_dataset(specs: &[SyntheticSceneSpec], cfg: &SyntheticConfig, out_dir: &Path) -> Result<Vec<ManifestEntry<f32>>> {
    cfg.sampling.validate()?;
    cfg.prior.validate()?;
    if cfg.sampling.num_coarse + cfg.sampling.num_fine < 256 {
        return Err(Error::Config("synthetic rendering needs at least 256 samples per ray".into()));
    }
    for s in specs {
        s.validate(0.4)?;
    }
    for sub in ["images", "masks"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    if !(cfg.focal_scale > 0.0 && cfg.focal_scale.is_finite()) {
        return Err(Error::Config(format!("focal_scale must be positive, got {}", cfg.focal_scale)));
    }
    let f = (cfg.focal_scale * cfg.image_size as f64) as f32;
    let c = (cfg.image_size as f32 - 1.0) / 2.0;
    let intr = Intrinsics::new(f, f, c, c, cfg.image_size, cfg.image_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut entries = Vec::new();
    for spec in specs {
        for k in 0..cfg.views_per_instance {
            let pose: CameraPose<f32> = sample_pose_prior(&cfg.prior, &mut rng)?.cast();
            let id = format!("{}-v{k}", spec.instance_id);
            let (image, mask) = render_scene(spec, &pose, &intr, &cfg.sampling, record_seed(cfg.seed, entries.len()))?;
            let image_path = PathBuf::from("images").join(format!("{id}.png"));
            let mask_path = PathBuf::from("masks").join(format!("{id}.png"));
            image.save_png(&out_dir.join(&image_path))?;
            mask.save_png(&out_dir.join(&mask_path))?;
            entries.push(ManifestEntry {
                id,
                image_path,
                mask_path,
                category: spec.category.clone(),
                symmetric: spec.symmetric,
                pose: Some(pose.params()),
                intrinsics: intr,
            });
        }
    }
    write_manifest(&out_dir.join(MANIFEST_FILE), &entries)?;
    let scenes = serde_json::to_string_pretty(specs).map_err(|e| Error::Argument(e.to_string()))?;
    let p = out_dir.join(SCENES_FILE);
    std::fs::write(&p, scenes).map_err(|e| Error::io(&p, e))?;
    Ok(entries)
}

pub fn load_scene_specs(path: &Path) -> Result<Vec<SyntheticSceneSpec>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), line: e.line(), message: e.to_string() })
}

/// Instance id of a generated record id (`<instance>-v<k>`).
pub fn instance_of(record_id: &str) -> &str {
    record_id.rsplit_once("-v").map_or(record_id, |(a, _)| a)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_mask(w: usize, h: usize, rows: (usize, usize), cols: (usize, usize)) -> Image<f64> {
        let mut m = Image::new(w, h, 1);
        for y in rows.0..=rows.1 {
            for x in cols.0..=cols.1 {
                m.set(x, y, 0, 1.0);
            }
        }
        m
    }

    #[test]
    fn tight_box_of_single_pixel() {
        let m = square_mask(64, 64, (40, 40), (30, 30));
        assert_eq!(mask_bounds(&m), Some((30, 30, 40, 40)));
        assert!(mask_bounds(&Image::<f64>::new(4, 4, 1)).is_none());
    }

    #[test]
    fn empty_mask_is_rejected() {
        let intr = Intrinsics::<f64>::for_square_image(8);
        let r = crop_to_mask(&Image::new(8, 8, 3), &Image::new(8, 8, 1), &intr, 4);
        assert!(matches!(r, Err(Error::EmptyMask(_))));
    }

    #[test]
    fn full_mask_crop_is_a_resize() {
        let intr = Intrinsics::new(100.0, 100.0, 56.0, 40.0, 128, 128).unwrap();
        let img = Image::from_data(128, 128, 3, (0..128 * 128 * 3).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        let mask = Image::filled(128, 128, 1, 1.0);
        let (c, m, ci) = crop_to_mask(&img, &mask, &intr, 64).unwrap();
        assert_eq!(c, img.resize(64, 64));
        assert!(m.data.iter().all(|v| (*v - 1.0).abs() < 1e-12));
        assert!((ci.focal_x - 50.0).abs() < 1e-12);
        // pixel-centre convention: (c + ½)·s − ½
        assert!((ci.principal_x - ((56.0 + 0.5) * 0.5 - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn crop_reprojection_agrees() {
        let intr = Intrinsics::new(90.0, 90.0, 50.0, 50.0, 100, 100).unwrap();
        let mask = square_mask(100, 100, (10, 50), (20, 60));
        let img = Image::filled(100, 100, 3, 0.5);
        let (_, _, ci) = crop_to_mask(&img, &mask, &intr, 112).unwrap();
        // independent: box 20..=60 × 10..=50 is 41 pixels wide, so in
        // pixel-edge coordinates (centre + ½) the crop maps [20, 61) onto
        // [0, 112) and [10, 51) likewise
        let s = 112.0 / 41.0;
        let p = [0.05, -0.1, 1.5];
        let old = intr.project(&p);
        let new = ci.project(&p);
        let want = [(old[0] + 0.5 - 20.0) * s - 0.5, (old[1] + 0.5 - 10.0) * s - 0.5];
        assert!((new[0] - want[0]).abs() < 0.5 && (new[1] - want[1]).abs() < 0.5, "{new:?} vs {want:?}");
    }

    #[test]
    fn crop_is_idempotent() {
        let intr = Intrinsics::new(90.0, 90.0, 50.0, 50.0, 100, 100).unwrap();
        let mask = square_mask(100, 100, (10, 50), (20, 80));
        let mut img = Image::new(100, 100, 3);
        for y in 0..100 {
            for x in 0..100 {
                for c in 0..3 {
                    img.set(x, y, c, ((x * 3 + y * 5 + c) % 11) as f64 / 11.0 * mask.get(x, y, 0));
                }
            }
        }
        let (a, ma, ia) = crop_to_mask(&img, &mask, &intr, 112).unwrap();
        let (b, mb, ib) = crop_to_mask(&a, &ma, &ia, 112).unwrap();
        let diff = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data.len() as f64;
        assert!(diff < 1e-6, "{diff}");
        assert_eq!(ma, mb);
        assert!((ia.principal_x - ib.principal_x).abs() < 1e-9);
    }

    #[test]
    fn manifest_arity_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        std::fs::write(&p, "a\timg.png\tm.png\tcat\t1\t1\t0\t1\t0\t0\t0\t1.8\t10\t10\t4\t4\t8\t8\nb\timg.png\tm.png\tcat\t1\t1\t0\t1\t0\t0\t0\t10\t10\t4\t4\t8\t8\n").unwrap();
        match read_manifest_entries::<f32>(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_manifest_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        std::fs::write(&p, "").unwrap();
        assert_eq!(load_manifest::<f32>(&p).unwrap().count(), 0);
    }

    #[test]
    fn missing_image_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        std::fs::write(&p, "a\tnope.png\tm.png\tcat\t0\t10\t10\t3.5\t3.5\t8\t8\n").unwrap();
        let err = load_manifest::<f32>(&p).unwrap().next().unwrap().unwrap_err();
        assert!(err.to_string().contains("nope.png"), "{err}");
    }

    #[test]
    fn specs_outside_box_are_rejected() {
        let spec = SyntheticSceneSpec {
            instance_id: "x".into(),
            parts: vec![Solid { shape: Shape::Sphere { center: [0.2, 0.0, 0.0], radius: 0.3 }, albedo: [0.5; 3] }],
            category: "c".into(),
            symmetric: true,
            density: 1000.0,
        };
        assert!(spec.validate(0.4).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for s in random_scene_specs(30, &mut rng) {
            s.validate(0.4).unwrap();
        }
    }
}
