//! The four commands. Each builds its settings tree from defaults, applies
//! the config pairs, validates, then either prints the tree (dry run) or
//! runs and writes `effective.conf` next to its outputs.

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use monoview::data::{generate_synthetic_dataset, load_scene_specs, random_scene_specs};
use monoview::evaluation::{evaluate_novel_views, held_out_pairs, AnalyticModel, NovelViewModel, TrainedModel};
use monoview::training::{plan_phases, resolve_config, run_training, TrainState, LOG_FILE};
use monoview::{load_dataset, CameraPose, DatasetRecord, EvalConfig, SyntheticConfig, TrainConfig};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{lookup, Pairs, Tree};
use crate::CliError;

pub const EFFECTIVE_FILE: &str = "effective.conf";
pub const REPORT_FILE: &str = "report.tsv";

#[derive(Clone, Copy)]
pub struct Options {
    pub dry_run: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GenSettings {
    pub out_dir: String,
    /// Random scenes to draw when `scenes` is empty.
    pub instances: usize,
    pub scene_seed: u64,
    /// Optional scenes.json to render instead of random scenes.
    pub scenes: String,
    #[serde(flatten)]
    pub synthetic: SyntheticConfig,
}

impl Default for GenSettings {
    fn default() -> Self {
        Self { out_dir: String::new(), instances: 10, scene_seed: 0, scenes: String::new(), synthetic: SyntheticConfig::default() }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainSettings {
    pub manifest: String,
    pub out_dir: String,
    /// Optional state.ckpt to continue from.
    pub resume: String,
    /// Default network sizes: `desk` (small, minutes per epoch on a
    /// processor) or `full` (34-layer encoder backbone, 6×128 field).
    pub preset: String,
    #[serde(flatten)]
    pub config: TrainConfig,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RenderSettings {
    pub model: String,
    pub manifest: String,
    /// Comma-separated record ids; empty renders the first record.
    pub records: String,
    pub out_dir: String,
    /// Novel azimuths, evenly spaced from the predicted input azimuth.
    pub sweep: usize,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self { model: String::new(), manifest: String::new(), records: String::new(), out_dir: String::new(), sweep: 8 }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalSettings {
    /// Trained model.ckpt; leave empty to score `scenes` analytically.
    pub model: String,
    /// scenes.json of a synthetic dataset, used when `model` is empty.
    pub scenes: String,
    pub manifest: String,
    pub out_dir: String,
    #[serde(flatten)]
    pub eval: EvalConfig,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { model: String::new(), scenes: String::new(), manifest: String::new(), out_dir: String::new(), eval: EvalConfig::default() }
    }
}

fn build<S: Serialize + for<'de> Deserialize<'de>>(root: &str, defaults: &S, pairs: &Pairs) -> Result<(Tree, S), CliError> {
    let mut tree = Tree::new(root, defaults);
    tree.apply(pairs)?;
    let settings = tree.settings()?;
    Ok((tree, settings))
}

fn required(key: &str, value: &str) -> Result<(), CliError> {
    if value.is_empty() {
        return Err(CliError::config(format!("key `{key}` is required")));
    }
    Ok(())
}

fn existing(key: &str, value: &str) -> Result<PathBuf, CliError> {
    let path = PathBuf::from(value);
    if !path.exists() {
        return Err(CliError::config(format!("key `{key}`: path `{value}` does not exist")));
    }
    Ok(path)
}

fn prepare_out_dir(dir: &str, tree: &Tree) -> Result<PathBuf, CliError> {
    let dir = PathBuf::from(dir);
    std::fs::create_dir_all(&dir).map_err(|e| CliError::runtime(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(EFFECTIVE_FILE);
    std::fs::write(&path, tree.dump()).map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))?;
    Ok(dir)
}

fn summary(value: serde_json::Value) {
    println!("{value}");
}

pub fn gen_data(pairs: &Pairs, opts: Options) -> Result<(), CliError> {
    let (tree, s) = build("gen", &GenSettings::default(), pairs)?;
    required("gen.out_dir", &s.out_dir)?;
    s.synthetic.sampling.validate()?;
    s.synthetic.prior.validate()?;
    let specs = if s.scenes.is_empty() {
        if s.instances == 0 {
            return Err(CliError::config("key `gen.instances` must be positive"));
        }
        random_scene_specs(s.instances, &mut ChaCha8Rng::seed_from_u64(s.scene_seed))
    } else {
        load_scene_specs(&existing("gen.scenes", &s.scenes)?)?
    };
    if opts.dry_run {
        print!("{}", tree.dump());
        return Ok(());
    }
    let dir = prepare_out_dir(&s.out_dir, &tree)?;
    let entries = generate_synthetic_dataset(&specs, &s.synthetic, &dir)?;
    summary(serde_json::json!({ "instances": specs.len(), "records": entries.len(), "out_dir": dir }));
    Ok(())
}

fn train_defaults(pairs: &Pairs) -> Result<TrainSettings, CliError> {
    let preset = lookup(pairs, "train.preset").unwrap_or("desk").to_string();
    let config = match preset.as_str() {
        "desk" => {
            let size = match lookup(pairs, "train.encoder.image_size") {
                Some(v) => v.parse().map_err(|_| CliError::config(format!("key `train.encoder.image_size`: expected an integer, got `{v}`")))?,
                None => 64,
            };
            TrainConfig::desk(size)
        }
        "full" => TrainConfig::default(),
        other => return Err(CliError::config(format!("key `train.preset`: expected desk or full, got `{other}`"))),
    };
    Ok(TrainSettings { manifest: String::new(), out_dir: String::new(), resume: String::new(), preset, config })
}

fn load_records(key: &str, value: &str) -> Result<Vec<DatasetRecord<f32>>, CliError> {
    required(key, value)?;
    let (records, _) = load_dataset::<f32>(&existing(key, value)?)?;
    if records.is_empty() {
        return Err(CliError::config(format!("key `{key}`: manifest `{value}` has no records")));
    }
    Ok(records)
}

pub fn train(pairs: &Pairs, opts: Options) -> Result<(), CliError> {
    let (tree, s) = build("train", &train_defaults(pairs)?, pairs)?;
    required("train.out_dir", &s.out_dir)?;
    s.config.validate()?;
    let resume = if s.resume.is_empty() { None } else { Some(existing("train.resume", &s.resume)?) };
    let records = load_records("train.manifest", &s.manifest)?;
    // Surfaces label and regime mismatches before any output is written.
    plan_phases(&records, &resolve_config(&records, &s.config)?)?;
    if opts.dry_run {
        print!("{}", tree.dump());
        return Ok(());
    }
    let state = match resume {
        Some(path) => Some(TrainState::<f32>::load(&path)?.0),
        None => None,
    };
    let dir = prepare_out_dir(&s.out_dir, &tree)?;
    let run = run_training(&records, &s.config, Some(&dir), state)?;
    let last = run.log.last();
    summary(serde_json::json!({
        "steps": run.state.step,
        "epochs": run.state.epoch,
        "final_total": last.map(|r| r.losses.total),
        "log": dir.join(LOG_FILE),
    }));
    Ok(())
}

fn pick_records<'a>(records: &'a [DatasetRecord<f32>], wanted: &str) -> Result<Vec<&'a DatasetRecord<f32>>, CliError> {
    if wanted.trim().is_empty() {
        return Ok(vec![&records[0]]);
    }
    wanted
        .split(',')
        .map(|id| {
            let id = id.trim();
            records.iter().find(|r| r.id == id).ok_or_else(|| CliError::config(format!("key `render.records`: no record `{id}` in the manifest")))
        })
        .collect()
}

/// Poses of the sweep: the predicted input pose turned about the vertical
/// axis in `count` equal azimuth steps, keeping elevation and distance.
pub fn sweep_poses(input: &CameraPose<f32>, count: usize) -> Result<Vec<CameraPose<f32>>, CliError> {
    let (az, el) = (input.azimuth() as f64, input.elevation() as f64);
    (0..count)
        .map(|k| {
            let a = az + TAU * k as f64 / count as f64;
            Ok(CameraPose::from_angles(a as f32, el as f32, input.translation)?)
        })
        .collect()
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::runtime(format!("cannot write {}: {e}", path.display()))
}

pub fn render(pairs: &Pairs, opts: Options) -> Result<(), CliError> {
    let (tree, s) = build("render", &RenderSettings::default(), pairs)?;
    required("render.out_dir", &s.out_dir)?;
    required("render.model", &s.model)?;
    if s.sweep == 0 {
        return Err(CliError::config("key `render.sweep` must be positive"));
    }
    let model_path = existing("render.model", &s.model)?;
    let records = load_records("render.manifest", &s.manifest)?;
    let chosen = pick_records(&records, &s.records)?;
    if opts.dry_run {
        print!("{}", tree.dump());
        return Ok(());
    }
    let model = TrainedModel::<f32>::load(&model_path)?;
    let dir = prepare_out_dir(&s.out_dir, &tree)?;
    for record in &chosen {
        let out = dir.join(&record.id);
        std::fs::create_dir_all(&out).map_err(io(&out))?;
        let (latent, pose) = model.encode(record)?;
        record.image.save_png(&out.join("input.png"))?;
        let recon = model.render_view(&latent, &pose.rigid(), &record.intrinsics)?;
        recon.rgb.save_png(&out.join("recon.png"))?;
        recon.alpha.save_png(&out.join("recon_alpha.png"))?;
        recon.depth.save_pfm(&out.join("recon_depth.pfm"))?;
        let mut table = String::from("view\tazimuth\televation\tcos_az\tsin_az\tcos_el\tsin_el\ttx\tty\ttz\n");
        for (k, p) in sweep_poses(&pose, s.sweep)?.iter().enumerate() {
            let v = model.render_view(&latent, &p.rigid(), &record.intrinsics)?;
            v.rgb.save_png(&out.join(format!("view_{k:02}.png")))?;
            v.alpha.save_png(&out.join(format!("alpha_{k:02}.png")))?;
            v.depth.save_pfm(&out.join(format!("depth_{k:02}.pfm")))?;
            let _ = write!(table, "{k:02}\t{}\t{}", p.azimuth(), p.elevation());
            for x in p.params() {
                let _ = write!(table, "\t{x}");
            }
            table.push('\n');
        }
        let poses = out.join("poses.tsv");
        std::fs::write(&poses, table).map_err(io(&poses))?;
    }
    summary(serde_json::json!({ "records": chosen.iter().map(|r| &r.id).collect::<Vec<_>>(), "views": s.sweep, "out_dir": dir }));
    Ok(())
}

pub fn eval(pairs: &Pairs, opts: Options) -> Result<(), CliError> {
    let (tree, s) = build("eval", &EvalSettings::default(), pairs)?;
    required("eval.out_dir", &s.out_dir)?;
    let model = match (s.model.is_empty(), s.scenes.is_empty()) {
        (false, true) => Some(existing("eval.model", &s.model)?),
        (true, false) => {
            existing("eval.scenes", &s.scenes)?;
            None
        }
        _ => return Err(CliError::config("set exactly one of `eval.model` and `eval.scenes`")),
    };
    if !(s.eval.calibration_fraction > 0.0 && s.eval.calibration_fraction <= 1.0) {
        return Err(CliError::config(format!("key `eval.calibration_fraction` must lie in (0, 1], got {}", s.eval.calibration_fraction)));
    }
    let records = load_records("eval.manifest", &s.manifest)?;
    if let Some(r) = records.iter().find(|r| !r.has_pose()) {
        return Err(CliError::config(format!("evaluation needs ground-truth poses; record `{}` has none", r.id)));
    }
    if opts.dry_run {
        print!("{}", tree.dump());
        return Ok(());
    }
    let pairs = held_out_pairs(&records);
    let mut cfg = s.eval.clone();
    let report = match model {
        Some(path) => {
            let m = TrainedModel::<f32>::load(&path)?;
            if cfg.regime == EvalConfig::default().regime {
                cfg.regime = m.config.regime.name().to_string();
            }
            evaluate_novel_views(&m, &records, &pairs, &cfg)?
        }
        None => {
            if cfg.regime == EvalConfig::default().regime {
                cfg.regime = "analytic".into();
            }
            let specs = load_scene_specs(Path::new(&s.scenes))?;
            let m = AnalyticModel::new(&specs, SyntheticConfig::default().sampling);
            evaluate_novel_views(&m, &records, &pairs, &cfg)?
        }
    };
    let dir = prepare_out_dir(&s.out_dir, &tree)?;
    report.write_tsv(&dir.join(REPORT_FILE))?;
    summary(serde_json::json!({
        "regime": report.regime,
        "records": report.records.len(),
        "mean_psnr": report.mean_psnr,
        "mean_ssim": report.mean_ssim,
        "report": dir.join(REPORT_FILE),
    }));
    Ok(())
}
