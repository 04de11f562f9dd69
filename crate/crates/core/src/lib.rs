//! Single-view conditional radiance fields: pose-aware encoding, volume
//! rendering, adversarial training and novel-view evaluation.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision.

pub mod checkpoint;
pub mod data;
pub mod encoding;
pub mod error;
pub mod evaluation;
pub mod field;
pub mod geometry;
pub mod image;
pub mod math;
pub mod networks;
pub mod nn;
pub mod objectives;
pub mod rendering;
pub mod training;

pub use error::{Error, Result};
pub use monoview_autodiff::{Graph, ParamStore, Scalar, Tensor, Var};

pub use data::{load_dataset, load_manifest, DatasetRecord, ManifestEntry, PoseAudit, SyntheticConfig, SyntheticSceneSpec};
pub use encoding::EncodingConfig;
pub use evaluation::{evaluate_novel_views, psnr, ssim, EvalConfig, EvalReport, NovelViewModel};
pub use field::{FieldConfig, LatentCodes, RadianceSample};
pub use geometry::{CameraPose, Intrinsics, PosePrior, RayBatch, RigidPose};
pub use image::Image;
pub use math::{Mat3, Vec3};
pub use networks::{DiscriminatorConfig, EncoderConfig};
pub use objectives::{LossReport, LossWeights};
pub use rendering::{RenderOutput, SamplingConfig};
pub use training::{discriminator_update, generator_update, lr_at, run_training, train_step, Regime, TrainConfig, TrainState};

pub type CameraPose32 = CameraPose<f32>;
pub type CameraPose64 = CameraPose<f64>;
pub type Intrinsics32 = Intrinsics<f32>;
pub type Intrinsics64 = Intrinsics<f64>;
pub type Image32 = Image<f32>;
pub type Image64 = Image<f64>;
pub type DatasetRecord32 = DatasetRecord<f32>;
pub type DatasetRecord64 = DatasetRecord<f64>;
pub type TrainState32 = TrainState<f32>;
pub type TrainState64 = TrainState<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
