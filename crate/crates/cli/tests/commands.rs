//! End-to-end runs of the `monoview` binary.

use std::path::Path;
use std::process::{Command, Output};

use monoview::Image;

fn monoview(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_monoview")).args(args).output().expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn files_with(dir: &Path, prefix: &str, ext: &str) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with(prefix) && n.ends_with(ext))
        .collect();
    names.sort();
    names
}

fn gen(dir: &Path, instances: usize, views: usize, size: usize) -> Output {
    let out_dir = format!("gen.out_dir={}", dir.display());
    let inst = format!("gen.instances={instances}");
    let v = format!("gen.views_per_instance={views}");
    let s = format!("gen.image_size={size}");
    monoview(&["gen-data", "-s", &out_dir, "-s", &inst, "-s", &v, "-s", &s, "-s", "gen.scene_seed=4"])
}

fn tiny_train_config(path: &Path, manifest: &Path, out: &Path) {
    let text = format!(
        "# small enough to train in seconds\n\
         train.manifest = {}\n\
         train.out_dir = {}\n\
         train.encoder.image_size = 16\n\
         train.epochs = 1\n\
         train.batch_size = 2\n\
         train.recon_patch = 8\n\
         train.recon_stride = 2.0\n\
         train.sampling.num_coarse = 6\n\
         train.sampling.num_fine = 6\n\
         train.discriminator.patch_size = 8\n\
         train.field.mlp_width = 16\n\
         train.field.color_width = 8\n",
        manifest.display(),
        out.display()
    );
    std::fs::write(path, text).unwrap();
}

#[test]
fn gen_data_writes_pairs_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gen(tmp.path(), 5, 4, 16);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(files_with(&tmp.path().join("images"), "", ".png").len(), 20);
    assert_eq!(files_with(&tmp.path().join("masks"), "", ".png").len(), 20);
    let manifest = std::fs::read_to_string(tmp.path().join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')).count(), 20);
    let conf = std::fs::read_to_string(tmp.path().join("effective.conf")).unwrap();
    assert!(conf.contains("gen.instances = 5\n") && conf.contains("gen.image_size = 16\n"));
}

#[test]
fn effective_config_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(gen(&a, 2, 2, 12).status.success());
    let conf = std::fs::read_to_string(a.join("effective.conf")).unwrap().replace(&a.display().to_string(), &b.display().to_string());
    let conf_path = tmp.path().join("again.conf");
    std::fs::write(&conf_path, &conf).unwrap();
    let out = monoview(&["gen-data", "--config", conf_path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    for f in ["manifest.tsv", "scenes.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    for name in files_with(&a.join("images"), "", ".png") {
        assert_eq!(std::fs::read(a.join("images").join(&name)).unwrap(), std::fs::read(b.join("images").join(&name)).unwrap());
    }
}

#[test]
fn unknown_key_exits_2_naming_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("bad.conf");
    std::fs::write(&conf, "train.epochz = 3\n").unwrap();
    let out = monoview(&["train", "--config", conf.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert_eq!(err.trim().lines().count(), 1);
    let json: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
    assert_eq!(json["error"], "config");
    assert!(json["message"].as_str().unwrap().contains("train.epochz"), "{err}");
}

#[test]
fn malformed_values_and_missing_paths_exit_2() {
    for args in [
        vec!["train", "-s", "train.epochs=many"],
        vec!["train", "-s", "train.manifest=/does/not/exist.tsv", "-s", "train.out_dir=/tmp/x"],
        vec!["train", "-s", "train.regime=sometimes"],
        vec!["eval", "-s", "eval.out_dir=/tmp/x"],
        vec!["gen-data", "-s", "gen.out_dir=/tmp/x", "-s", "gen.sampling.num_coarse=-4"],
        vec!["render", "--bogus-flag"],
    ] {
        let out = monoview(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", stderr(&out));
        assert!(serde_json::from_str::<serde_json::Value>(stderr(&out).trim()).is_ok(), "{args:?}");
    }
}

#[test]
fn dry_run_prints_the_tree_without_side_effects() {
    let tmp = tempfile::tempdir().unwrap();
    let target = tmp.path().join("never");
    let out_dir = format!("gen.out_dir={}", target.display());
    let out = monoview(&["gen-data", "--dry-run", "-s", &out_dir, "-s", "gen.seed=9"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(!target.exists());
    let text = stdout(&out);
    assert!(text.contains("gen.seed = 9\n"));
    assert!(text.contains("gen.sampling.num_fine = 128\n"));
    assert!(text.lines().all(|l| l.contains(" = ")));
}

#[test]
fn runtime_failures_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(gen(&data, 1, 2, 12).status.success());
    // A model file that exists but is not a checkpoint.
    let junk = tmp.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let out = monoview(&[
        "render",
        "-s",
        &format!("render.model={}", junk.display()),
        "-s",
        &format!("render.manifest={}", data.join("manifest.tsv").display()),
        "-s",
        &format!("render.out_dir={}", tmp.path().join("r").display()),
    ]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    let json: serde_json::Value = serde_json::from_str(stderr(&out).trim()).unwrap();
    assert_eq!(json["error"], "runtime");
}

#[test]
fn train_render_and_eval_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(gen(&data, 2, 2, 16).status.success());
    let manifest = data.join("manifest.tsv");
    let run = tmp.path().join("run");
    let conf = tmp.path().join("train.conf");
    tiny_train_config(&conf, &manifest, &run);

    let out = monoview(&["train", "--config", conf.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(run.join("model.ckpt").exists() && run.join("state.ckpt").exists());
    assert_eq!(std::fs::read_to_string(run.join("train_log.ndjson")).unwrap().lines().count(), 2);
    let summary: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(summary["steps"], 2);

    let model = run.join("model.ckpt");
    let renders = tmp.path().join("renders");
    let out = monoview(&[
        "render",
        "-s",
        &format!("render.model={}", model.display()),
        "-s",
        &format!("render.manifest={}", manifest.display()),
        "-s",
        &format!("render.out_dir={}", renders.display()),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let rec = std::fs::read_dir(&renders).unwrap().map(|e| e.unwrap().path()).find(|p| p.is_dir()).unwrap();
    assert_eq!(files_with(&rec, "view_", ".png"), (0..8).map(|k| format!("view_{k:02}.png")).collect::<Vec<_>>());
    assert_eq!(files_with(&rec, "depth_", ".pfm"), (0..8).map(|k| format!("depth_{k:02}.pfm")).collect::<Vec<_>>());
    for f in ["input.png", "recon.png", "recon_alpha.png", "recon_depth.pfm", "poses.tsv"] {
        assert!(rec.join(f).exists(), "{f}");
    }
    let depth = Image::<f32>::load_pfm(&rec.join("depth_03.pfm")).unwrap();
    assert_eq!((depth.width, depth.height, depth.channels), (16, 16, 1));
    assert_eq!(std::fs::read_to_string(rec.join("poses.tsv")).unwrap().lines().count(), 9);

    let eval_dir = tmp.path().join("eval");
    let out = monoview(&[
        "eval",
        "-s",
        &format!("eval.model={}", model.display()),
        "-s",
        &format!("eval.manifest={}", manifest.display()),
        "-s",
        &format!("eval.out_dir={}", eval_dir.display()),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report = std::fs::read_to_string(eval_dir.join("report.tsv")).unwrap();
    assert!(report.starts_with("record_id\tinput_id\tpsnr\tssim\n"));
    assert!(report.contains("regime\tunsupervised\n"));
    assert!(eval_dir.join("effective.conf").exists());
}

#[test]
fn analytic_eval_scores_the_generator() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(gen(&data, 2, 3, 16).status.success());
    let eval_dir = tmp.path().join("eval");
    let out = monoview(&[
        "eval",
        "-s",
        &format!("eval.scenes={}", data.join("scenes.json").display()),
        "-s",
        &format!("eval.manifest={}", data.join("manifest.tsv").display()),
        "-s",
        &format!("eval.out_dir={}", eval_dir.display()),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let summary: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(summary["regime"], "analytic");
    assert_eq!(summary["records"], 4);
    assert!(summary["mean_psnr"].as_f64().unwrap() >= 40.0, "{summary}");
}
