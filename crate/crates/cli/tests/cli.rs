use std::fs;
use std::path::Path;

use filament_core::imgcore::load_image;
use filament_sr::{load_config, validate_config};

fn run(args: &[&str]) -> i32 {
    filament_sr::run(std::iter::once("filament-sr").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(run(&[]), 2);
    assert_eq!(run(&["bogus"]), 2);
    assert_eq!(run(&["eval", "--nope"]), 2);
    assert_eq!(run(&["degrade", "--out", "x.f32"]), 2);
}

#[test]
fn help_and_version_exit_with_zero() {
    assert_eq!(run(&["--help"]), 0);
    assert_eq!(run(&["--version"]), 0);
}

#[test]
fn stage_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.pgm");
    let out = dir.path().join("out.f32");
    assert_eq!(run(&["degrade", "--in", s(&missing), "--out", s(&out)]), 1);
    assert!(!out.exists());
}

#[test]
fn invalid_configuration_is_reported_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("rep");
    let code = run(&["reproduce", "--set", "dataset.tile_size=0", "--out", s(&out)]);
    assert_eq!(code, 1);
    assert!(!out.exists());
    assert_eq!(run(&["reproduce", "--dry-run"]), 0);
    assert_eq!(run(&["reproduce", "--dry-run", "--set", "train.depth=7"]), 1);
}

#[test]
fn shipped_configuration_is_valid() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reproduce.json");
    let cfg = load_config(Some(&path), &[]).unwrap();
    assert!(validate_config(&cfg).is_empty());
    assert_eq!(cfg, filament_sr::RunConfig::default());
}

#[test]
fn stages_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let phantoms = d.join("phantoms");
    assert_eq!(
        run(&[
            "phantom",
            "--set",
            "phantom.count=3",
            "--set",
            "phantom.held_out=1",
            "--seed",
            "3",
            "--out",
            s(&phantoms),
        ]),
        0
    );
    let latent = phantoms.join("phantom_0000.f32");
    assert!(phantoms.join("filaments_0002.json").exists());
    assert_eq!(load_image(&latent, None).unwrap().width(), 64);

    let (degraded, pre, label) = (d.join("deg.f32"), d.join("pre.f32"), d.join("label.pgm"));
    assert_eq!(run(&["degrade", "--in", s(&latent), "--out", s(&degraded), "--seed", "1"]), 0);
    assert_eq!(run(&["preprocess", "--in", s(&degraded), "--out", s(&pre), "--threshold-k", "auto"]), 0);
    let pre_img = load_image(&pre, None).unwrap();
    assert_eq!((pre_img.width(), pre_img.height()), (128, 128));
    assert_eq!(pre_img.pixel_pitch_nm(), 31.25);
    assert_eq!(
        run(&["label", "--in", s(&pre), "--out", s(&label), "--psf-sigma", "4", "--lr-iters", "10"]),
        0
    );
    let label_img = load_image(&label, None).unwrap();
    assert!(label_img.values().iter().all(|v| *v == 0.0 || *v == 1.0 || *v == 255.0));

    let ds = d.join("dataset");
    assert_eq!(
        run(&["dataset", "--originals", s(&pre), "--labels", s(&label), "--tile", "64", "--out", s(&ds)]),
        0
    );
    let manifest = ds.join(filament_core::preprocess::MANIFEST_FILE);
    assert_eq!(filament_core::preprocess::load_manifest(&manifest).unwrap().pairs.len(), 4);

    let model_dir = d.join("model");
    assert_eq!(
        run(&[
            "train",
            "--manifest",
            s(&manifest),
            "--depth",
            "2",
            "--base",
            "2",
            "--epochs",
            "1",
            "--lr",
            "1e-3",
            "--out",
            s(&model_dir),
        ]),
        0
    );
    let log = fs::read_to_string(model_dir.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 5, "header plus one line per tile:\n{log}");

    let (result, prob) = (d.join("result.f32"), d.join("prob.f32"));
    let model = model_dir.join("model.json");
    assert_eq!(
        run(&["predict", "--model", s(&model), "--in", s(&pre), "--out", s(&result), "--prob-out", s(&prob)]),
        0
    );
    let result_img = load_image(&result, None).unwrap();
    let prob_img = load_image(&prob, None).unwrap();
    for ((r, p), x) in result_img.values().iter().zip(prob_img.values()).zip(pre_img.values()) {
        assert_eq!(*r, if *p > 0.5 { *x as f32 as f64 } else { 0.0 });
    }

    let report = d.join("eval.json");
    assert_eq!(run(&["eval", "--a", s(&pre), "--b", s(&pre), "--report", s(&report)]), 0);
    let parsed: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed["ssim"], 1.0);

    let csv = d.join("profile.csv");
    assert_eq!(run(&["profile", "--in", s(&pre), "--row", "64", "--out", s(&csv)]), 0);
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 129);
    assert_eq!(run(&["profile", "--in", s(&pre), "--row", "500", "--out", s(&csv)]), 1);

    let stack = d.join("stack");
    assert_eq!(
        run(&["stack", "--slices", s(&pre), s(&result), "--zstep", "200", "--out", s(&stack)]),
        0
    );
    let mip = load_image(&stack.join("mip.f32"), None).unwrap();
    for ((m, a), b) in mip.values().iter().zip(pre_img.values()).zip(result_img.values()) {
        assert_eq!(*m, a.max(*b));
    }
}
