//! Camera poses, pinhole intrinsics, ray generation, the novel-view pose
//! prior, and global rotation alignment.
//!
//! Conventions. Camera frame: x right, y down, z forward. The world frame is
//! centred on the object and coincides with the camera frame at the identity
//! pose, so the world up axis is −y. The rotation `R = R_az · R_el` maps camera
//! coordinates to world coordinates: `R_az` turns about the world y axis and
//! `R_el` about the camera x axis, with positive elevation placing the camera
//! above the object. The translation `t` is the object origin expressed in the
//! camera frame (`x_cam = Rᵀ·x_world + t`), so the camera centre is `−R·t` and
//! `t_z > 0` keeps the object in front of the camera.

use monoview_autodiff::{lit, Scalar};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{normalize, Mat3, Vec3};

const DEGENERATE_PAIR: f64 = 1e-8;

/// Restricted camera pose: azimuth/elevation rotation plus translation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct CameraPose<T> {
    pub cos_az: T,
    pub sin_az: T,
    pub cos_el: T,
    pub sin_el: T,
    pub translation: Vec3<T>,
}

/// Fully general rigid camera pose (used after frame alignment, where the
/// rotation is no longer restricted to azimuth/elevation).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidPose<T> {
    /// camera → world
    pub rotation: Mat3<T>,
    /// object origin in camera coordinates
    pub translation: Vec3<T>,
}

fn normalized_pair<T: Scalar>(c: T, s: T, which: &str) -> Result<(T, T)> {
    if !(c.is_finite() && s.is_finite()) {
        return Err(Error::InvalidPose(format!("{which} pair ({c}, {s}) is not finite")));
    }
    let n = (c * c + s * s).sqrt();
    if n <= lit(DEGENERATE_PAIR) {
        return Err(Error::InvalidPose(format!("{which} pair ({c}, {s}) has norm {n} ≤ 1e-8")));
    }
    Ok((c / n, s / n))
}

/// Rotation about the world up (y) axis.
pub fn azimuth_rotation<T: Scalar>(cos: T, sin: T) -> Mat3<T> {
    let (o, z) = (T::one(), T::zero());
    Mat3([[cos, z, sin], [z, o, z], [-sin, z, cos]])
}

/// Rotation about the camera right (x) axis; positive angles look down.
pub fn elevation_rotation<T: Scalar>(cos: T, sin: T) -> Mat3<T> {
    let (o, z) = (T::one(), T::zero());
    Mat3([[o, z, z], [z, cos, sin], [z, -sin, cos]])
}

/// `R = R_az · R_el` from `(cos az, sin az, cos el, sin el)`, each pair
/// normalised to the unit circle first.
pub fn rotation_from_params<T: Scalar>(raw: [T; 4]) -> Result<Mat3<T>> {
    let (ca, sa) = normalized_pair(raw[0], raw[1], "azimuth")?;
    let (ce, se) = normalized_pair(raw[2], raw[3], "elevation")?;
    Ok(azimuth_rotation(ca, sa).mul(&elevation_rotation(ce, se)))
}

impl<T: Scalar> CameraPose<T> {
    /// Builds a pose from the 7-number parametrisation
    /// `(cos_az, sin_az, cos_el, sin_el, t_x, t_y, t_z)`.
    pub fn from_params(raw: [T; 7]) -> Result<Self> {
        let (cos_az, sin_az) = normalized_pair(raw[0], raw[1], "azimuth")?;
        let (cos_el, sin_el) = normalized_pair(raw[2], raw[3], "elevation")?;
        let translation = [raw[4], raw[5], raw[6]];
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidPose(format!("translation {translation:?} is not finite")));
        }
        if translation[2] <= T::zero() {
            return Err(Error::InvalidPose(format!("t_z = {} must be positive", translation[2])));
        }
        Ok(Self { cos_az, sin_az, cos_el, sin_el, translation })
    }

    /// Like [`CameraPose::from_params`], but pairs that are already unit
    /// length (within a few ulps) are kept bit for bit, so stored poses
    /// round-trip.
    pub fn from_stored_params(raw: [T; 7]) -> Result<Self> {
        let mut pose = Self::from_params(raw)?;
        let tol = T::epsilon() * lit(8.0);
        let unit = |c: T, s: T| ((c * c + s * s).sqrt() - T::one()).abs() <= tol;
        if unit(raw[0], raw[1]) {
            pose.cos_az = raw[0];
            pose.sin_az = raw[1];
        }
        if unit(raw[2], raw[3]) {
            pose.cos_el = raw[2];
            pose.sin_el = raw[3];
        }
        Ok(pose)
    }

    pub fn from_angles(azimuth: T, elevation: T, translation: Vec3<T>) -> Result<Self> {
        Self::from_params([
            azimuth.cos(),
            azimuth.sin(),
            elevation.cos(),
            elevation.sin(),
            translation[0],
            translation[1],
            translation[2],
        ])
    }

    pub fn params(&self) -> [T; 7] {
        let t = self.translation;
        [self.cos_az, self.sin_az, self.cos_el, self.sin_el, t[0], t[1], t[2]]
    }

    pub fn azimuth(&self) -> T {
        self.sin_az.atan2(self.cos_az)
    }

    pub fn elevation(&self) -> T {
        self.sin_el.atan2(self.cos_el)
    }

    /// Camera-to-world rotation.
    pub fn rotation(&self) -> Mat3<T> {
        azimuth_rotation(self.cos_az, self.sin_az).mul(&elevation_rotation(self.cos_el, self.sin_el))
    }

    /// World-to-camera rotation.
    pub fn world_to_camera(&self) -> Mat3<T> {
        self.rotation().transpose()
    }

    pub fn rigid(&self) -> RigidPose<T> {
        RigidPose { rotation: self.rotation(), translation: self.translation }
    }

    pub fn camera_center(&self) -> Vec3<T> {
        self.rigid().camera_center()
    }

    /// Whitespace-separated text form of the 7 parameters.
    pub fn to_text(&self) -> String {
        self.params().iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let values: Vec<T> = text
            .split_whitespace()
            .map(|s| s.parse::<T>().map_err(|_| Error::InvalidPose(format!("cannot parse `{s}`"))))
            .collect::<Result<_>>()?;
        let raw: [T; 7] = values
            .try_into()
            .map_err(|v: Vec<T>| Error::InvalidPose(format!("expected 7 pose numbers, got {}", v.len())))?;
        Self::from_stored_params(raw)
    }

    /// 28 bytes: the 7 parameters as little-endian f32.
    pub fn to_le_f32_bytes(&self) -> [u8; 28] {
        let mut out = [0u8; 28];
        for (chunk, v) in out.chunks_mut(4).zip(self.params()) {
            chunk.copy_from_slice(&v.to_f32().unwrap().to_le_bytes());
        }
        out
    }

    pub fn from_le_f32_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != 28 {
            return Err(Error::InvalidPose(format!("binary pose needs 28 bytes, got {}", bytes.len())));
        }
        let mut raw = [T::zero(); 7];
        for (v, chunk) in raw.iter_mut().zip(bytes.chunks(4)) {
            *v = T::from_f32(f32::from_le_bytes(chunk.try_into().unwrap())).unwrap();
        }
        Self::from_stored_params(raw)
    }

    pub fn cast<U: Scalar>(&self) -> CameraPose<U> {
        let c = |v: T| U::from_f64(v.to_f64().unwrap()).unwrap();
        CameraPose {
            cos_az: c(self.cos_az),
            sin_az: c(self.sin_az),
            cos_el: c(self.cos_el),
            sin_el: c(self.sin_el),
            translation: self.translation.map(c),
        }
    }
}

impl<T: Scalar> RigidPose<T> {
    pub fn camera_center(&self) -> Vec3<T> {
        let c = self.rotation.apply(&self.translation);
        [-c[0], -c[1], -c[2]]
    }

    pub fn to_camera(&self, world: &Vec3<T>) -> Vec3<T> {
        let c = self.rotation.transpose().apply(world);
        [c[0] + self.translation[0], c[1] + self.translation[1], c[2] + self.translation[2]]
    }

    /// Applies a world-frame rotation: the returned pose sees `offset·x`
    /// where `self` saw `x`.
    pub fn rotated_world(&self, offset: &Mat3<T>) -> Self {
        Self { rotation: offset.mul(&self.rotation), translation: self.translation }
    }
}

/// Pinhole intrinsics in pixels. Pixel `(u, v)` is the ray through image
/// coordinate `(u, v)`; integer coordinates are pixel centres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct Intrinsics<T> {
    pub focal_x: T,
    pub focal_y: T,
    pub principal_x: T,
    pub principal_y: T,
    pub width: usize,
    pub height: usize,
}

impl<T: Scalar> Intrinsics<T> {
    pub fn new(focal_x: T, focal_y: T, principal_x: T, principal_y: T, width: usize, height: usize) -> Result<Self> {
        let intr = Self { focal_x, focal_y, principal_x, principal_y, width, height };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal_x > T::zero() && self.focal_y > T::zero()) {
            return Err(Error::Argument(format!("focal lengths must be positive, got {self:?}")));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Argument("image size must be non-zero".into()));
        }
        let w = lit::<T>(self.width as f64);
        let h = lit::<T>(self.height as f64);
        if !(self.principal_x >= T::zero() && self.principal_x <= w && self.principal_y >= T::zero() && self.principal_y <= h) {
            return Err(Error::Argument(format!("principal point outside image: {self:?}")));
        }
        Ok(())
    }

    /// Default square-image intrinsics: focal 1.1·size, centred principal
    /// point. At the prior's closest distance (1.7) the whole ±0.4 scene box
    /// stays inside the frame.
    pub fn for_square_image(size: usize) -> Self {
        let f = lit::<T>(1.1 * size as f64);
        let c = lit::<T>((size as f64 - 1.0) / 2.0);
        Self { focal_x: f, focal_y: f, principal_x: c, principal_y: c, width: size, height: size }
    }

    /// Camera-frame direction (not normalised, z = 1) through pixel `(u, v)`.
    pub fn backproject(&self, u: T, v: T) -> Vec3<T> {
        [(u - self.principal_x) / self.focal_x, (v - self.principal_y) / self.focal_y, T::one()]
    }

    pub fn project(&self, camera_point: &Vec3<T>) -> [T; 2] {
        [
            self.focal_x * camera_point[0] / camera_point[2] + self.principal_x,
            self.focal_y * camera_point[1] / camera_point[2] + self.principal_y,
        ]
    }

    pub fn contains(&self, u: T, v: T) -> bool {
        u >= T::zero()
            && v >= T::zero()
            && u <= lit(self.width as f64 - 1.0)
            && v <= lit(self.height as f64 - 1.0)
    }

    pub fn cast<U: Scalar>(&self) -> Intrinsics<U> {
        let c = |v: T| U::from_f64(v.to_f64().unwrap()).unwrap();
        Intrinsics {
            focal_x: c(self.focal_x),
            focal_y: c(self.focal_y),
            principal_x: c(self.principal_x),
            principal_y: c(self.principal_y),
            width: self.width,
            height: self.height,
        }
    }
}

/// Rays for a set of pixels, optionally with target colours and alphas.
#[derive(Clone, Debug, PartialEq)]
pub struct RayBatch<T> {
    pub origins: Vec<Vec3<T>>,
    pub directions: Vec<Vec3<T>>,
    /// Image coordinates; fractional when a patch is strided by a non-integer step.
    pub pixel_coords: Vec<[T; 2]>,
    pub target_rgb: Vec<Vec3<T>>,
    pub target_alpha: Vec<T>,
}

impl<T: Scalar> RayBatch<T> {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn with_targets(mut self, rgb: Vec<Vec3<T>>, alpha: Vec<T>) -> Result<Self> {
        if rgb.len() != self.len() || alpha.len() != self.len() {
            return Err(Error::Argument(format!(
                "targets ({}, {}) do not match {} rays",
                rgb.len(),
                alpha.len(),
                self.len()
            )));
        }
        self.target_rgb = rgb;
        self.target_alpha = alpha;
        Ok(self)
    }
}

pub fn generate_rays<T: Scalar>(pose: &CameraPose<T>, intr: &Intrinsics<T>, pixels: &[[T; 2]]) -> Result<RayBatch<T>> {
    generate_rays_rigid(&pose.rigid(), intr, pixels)
}

/// One ray per pixel: origin at the camera centre, unit direction through the pixel.
pub fn generate_rays_rigid<T: Scalar>(pose: &RigidPose<T>, intr: &Intrinsics<T>, pixels: &[[T; 2]]) -> Result<RayBatch<T>> {
    let center = pose.camera_center();
    let mut directions = Vec::with_capacity(pixels.len());
    for &[u, v] in pixels {
        if !intr.contains(u, v) {
            return Err(Error::PixelOutOfBounds {
                x: u.to_f64().unwrap(),
                y: v.to_f64().unwrap(),
                width: intr.width,
                height: intr.height,
            });
        }
        directions.push(normalize(&pose.rotation.apply(&intr.backproject(u, v))));
    }
    Ok(RayBatch {
        origins: vec![center; pixels.len()],
        directions,
        pixel_coords: pixels.to_vec(),
        target_rgb: Vec::new(),
        target_alpha: Vec::new(),
    })
}

/// Distribution of novel-view poses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct PosePrior<T> {
    /// radians, `[lo, hi]`
    pub azimuth_range: [T; 2],
    pub elevation_range: [T; 2],
    pub translation_mean: Vec3<T>,
    /// Half-width of a uniform jitter per translation axis.
    pub translation_spread: Vec3<T>,
}

impl<T: Scalar> Default for PosePrior<T> {
    fn default() -> Self {
        let deg = std::f64::consts::PI / 180.0;
        Self {
            azimuth_range: [T::zero(), lit(2.0 * std::f64::consts::PI)],
            elevation_range: [lit(-10.0 * deg), lit(40.0 * deg)],
            translation_mean: [T::zero(), T::zero(), lit(1.8)],
            translation_spread: [T::zero(), T::zero(), lit(0.1)],
        }
    }
}

impl<T: Scalar> PosePrior<T> {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: &[T; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if !ordered(&self.azimuth_range) || !ordered(&self.elevation_range) {
            return Err(Error::Argument(format!("pose prior ranges must be finite and ordered: {self:?}")));
        }
        if self.translation_spread.iter().any(|s| *s < T::zero()) {
            return Err(Error::Argument("translation spread must be non-negative".into()));
        }
        if self.translation_mean[2] - self.translation_spread[2] <= T::zero() {
            return Err(Error::Argument(format!(
                "pose prior allows t_z ≤ 0 (mean {}, spread {})",
                self.translation_mean[2], self.translation_spread[2]
            )));
        }
        Ok(())
    }

    /// Fixed pose at the given angles and translation (zero-width ranges).
    pub fn fixed(azimuth: T, elevation: T, translation: Vec3<T>) -> Self {
        Self {
            azimuth_range: [azimuth, azimuth],
            elevation_range: [elevation, elevation],
            translation_mean: translation,
            translation_spread: [T::zero(); 3],
        }
    }
}

fn uniform_in<T: Scalar, R: Rng + ?Sized>(rng: &mut R, lo: T, hi: T) -> T {
    let u: f64 = rng.random();
    lo + (hi - lo) * lit::<T>(u)
}

/// Draws one pose: uniform azimuth/elevation in range, uniform translation jitter.
pub fn sample_pose_prior<T: Scalar, R: Rng + ?Sized>(prior: &PosePrior<T>, rng: &mut R) -> Result<CameraPose<T>> {
    prior.validate()?;
    let az = uniform_in(rng, prior.azimuth_range[0], prior.azimuth_range[1]);
    let el = uniform_in(rng, prior.elevation_range[0], prior.elevation_range[1]);
    let mut t = [T::zero(); 3];
    for (i, v) in t.iter_mut().enumerate() {
        let s = prior.translation_spread[i];
        *v = uniform_in(rng, prior.translation_mean[i] - s, prior.translation_mean[i] + s);
    }
    t[2] = t[2].max(lit(1e-3));
    CameraPose::from_angles(az, el, t)
}

/// Single world rotation aligning predicted camera rotations to ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OffsetFit<T> {
    pub rotation: Mat3<T>,
    /// Mean squared Frobenius distance `‖offset·R_pred − R_gt‖²` after alignment.
    pub residual: T,
}

pub fn fit_offset_rotation<T: Scalar>(pred: &[CameraPose<T>], gt: &[CameraPose<T>]) -> Result<OffsetFit<T>> {
    let p: Vec<_> = pred.iter().map(CameraPose::rotation).collect();
    let g: Vec<_> = gt.iter().map(CameraPose::rotation).collect();
    fit_offset_rotation_matrices(&p, &g)
}

/// Orthogonal Procrustes over stacked rotations: maximises `tr(Oᵀ Σ G_i P_iᵀ)`
/// subject to `O ∈ SO(3)`.
pub fn fit_offset_rotation_matrices<T: Scalar>(pred: &[Mat3<T>], gt: &[Mat3<T>]) -> Result<OffsetFit<T>> {
    if pred.is_empty() {
        return Err(Error::Argument("offset fitting needs at least one pose pair".into()));
    }
    if pred.len() != gt.len() {
        return Err(Error::Argument(format!("{} predicted vs {} ground-truth poses", pred.len(), gt.len())));
    }
    let to_na = |m: &Mat3<T>| {
        nalgebra::Matrix3::from_fn(|i, j| m.0[i][j].to_f64().unwrap())
    };
    let mut cross = nalgebra::Matrix3::<f64>::zeros();
    for (p, g) in pred.iter().zip(gt) {
        cross += to_na(g) * to_na(p).transpose();
    }
    let svd = cross.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut fix = nalgebra::Matrix3::<f64>::identity();
    fix[(2, 2)] = (u * v_t).determinant().signum();
    let o = u * fix * v_t;
    let rotation = Mat3(std::array::from_fn(|i| std::array::from_fn(|j| lit::<T>(o[(i, j)]))));
    let residual = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| rotation.mul(p).frobenius_distance_sq(g))
        .fold(T::zero(), |a, b| a + b)
        / lit(pred.len() as f64);
    Ok(OffsetFit { rotation, residual })
}
