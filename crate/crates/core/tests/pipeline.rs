use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use stylevc::checkpoint::Checkpoint;
use stylevc::config::RunConfig;
use stylevc::datagen::{Manifest, Split};
use stylevc::diffusion::SampleOptions;
use stylevc::harness::{self, Converter, StyleSource, TrainVcOptions, VC_CHECKPOINT};
use stylevc::Error;

fn tiny_config(root: &Path, vc_steps: usize) -> RunConfig {
    let text = format!(
        "seed = 5\ndata_root = {:?}\nrun_dir = {:?}\n\
         [corpus]\nnum_utterances = 48\nheld_out = 6\n\
         [units]\nk = 16\nsample_frames = 3000\n\
         [train_vc]\nsteps = {vc_steps}\nbatch_size = 4\ncheckpoint_every = 10\n\
         [train_diffusion]\nsteps = 150\nbatch_size = 16\neval_every = 50\n\
         [sampling]\nsteps = 10\n",
        root.join("data"),
        root.join("run")
    );
    RunConfig::from_toml(&text).unwrap()
}

/// One trained tiny run shared by the read-only tests below.
fn shared_run() -> &'static (tempfile::TempDir, RunConfig) {
    static RUN: OnceLock<(tempfile::TempDir, RunConfig)> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path(), 30);
        harness::prepare_data(&cfg).unwrap();
        harness::train_vc(&cfg, TrainVcOptions::default()).unwrap();
        harness::train_diffusion(&cfg).unwrap();
        (dir, cfg)
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn vc_loss_decreases_over_fifty_steps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 50);
    harness::prepare_data(&cfg).unwrap();
    let report = harness::train_vc(&cfg, TrainVcOptions::default()).unwrap();
    let totals: Vec<f64> = report.losses.iter().map(|l| l.total).collect();
    assert_eq!(totals.len(), 50);
    assert!(mean(&totals[40..]) < mean(&totals[..10]), "{totals:?}");
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let full_cfg = tiny_config(a.path(), 24);
    harness::prepare_data(&full_cfg).unwrap();
    let full = harness::train_vc(&full_cfg, TrainVcOptions::default()).unwrap();

    let cfg = tiny_config(b.path(), 24);
    harness::prepare_data(&cfg).unwrap();
    let first = harness::train_vc(&cfg, TrainVcOptions { resume: false, stop_after: Some(10) }).unwrap();
    assert_eq!(first.losses.len(), 10);
    let rest = harness::train_vc(&cfg, TrainVcOptions { resume: true, stop_after: None }).unwrap();
    assert_eq!(rest.first_step, 11);
    let joined: Vec<f64> = first.losses.iter().chain(&rest.losses).map(|l| l.total).collect();
    let straight: Vec<f64> = full.losses.iter().map(|l| l.total).collect();
    assert_eq!(joined.len(), straight.len());
    for (s, (x, y)) in joined.iter().zip(&straight).enumerate() {
        assert!((x - y).abs() <= 1e-5, "step {}: {x} vs {y}", s + 1);
    }
    let ca = Checkpoint::load(&a.path().join("run").join(VC_CHECKPOINT)).unwrap();
    let cb = Checkpoint::load(&b.path().join("run").join(VC_CHECKPOINT)).unwrap();
    for (name, ta) in &ca.tensors {
        let tb = &cb.tensors[name];
        let diff = (ta - tb).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff <= 1e-5, "{name} differs by {diff}");
    }
}

#[test]
fn second_trainer_on_same_run_dir_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 2);
    harness::prepare_data(&cfg).unwrap();
    let _held = harness::RunLock::acquire(&cfg.run_dir).unwrap();
    assert!(harness::train_vc(&cfg, TrainVcOptions::default()).is_err());
}

#[test]
fn missing_manifest_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 2);
    let err = harness::train_vc(&cfg, TrainVcOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Data(_) | Error::Io { .. }), "{err:?}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn diffusion_heldout_loss_decreases() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 10);
    harness::prepare_data(&cfg).unwrap();
    harness::train_vc(&cfg, TrainVcOptions::default()).unwrap();
    let report = harness::train_diffusion(&cfg).unwrap();
    let held = &report.heldout_losses;
    assert!(held.len() >= 2);
    assert!(held.last().unwrap().1 < held[0].1, "{held:?}");
}

#[test]
fn style_extraction_is_bit_stable() {
    let (_, cfg) = shared_run();
    let vc = harness::load_vc(&cfg.run_dir).unwrap();
    let manifest = Manifest::load(&cfg.manifest_path()).unwrap();
    let records: Vec<_> = manifest.split(Split::Heldout).collect();
    let a = harness::extract_styles(&vc.model, &manifest, &records).unwrap();
    let b = harness::extract_styles(&vc.model, &manifest, &records).unwrap();
    assert_eq!(a, b);
}

#[test]
fn reference_and_injected_vector_share_the_synthesis_path() {
    let (_, cfg) = shared_run();
    let converter = Converter::load(&cfg.run_dir, true, None).unwrap();
    let manifest = Manifest::load(&cfg.manifest_path()).unwrap();
    let records: Vec<_> = manifest.split(Split::Heldout).collect();
    let source = manifest.load_features(records[0]).unwrap();
    let reference: PathBuf = manifest.resolve(&records[1].mel_path);
    let opts = SampleOptions::default();
    let by_ref = converter.convert(&source, &StyleSource::Reference(reference.clone()), &opts, 3).unwrap();
    let mel = stylevc::synthesis::MelFeature::load(&reference).unwrap();
    let vector = converter.vc.model.encode_style(&mel).unwrap();
    let by_vec = converter.convert(&source, &StyleSource::Vector(vector), &opts, 3).unwrap();
    assert_eq!(by_ref.mel, by_vec.mel);

    let by_prompt = converter.convert(&source, &StyleSource::Prompt("a high fast voice".into()), &opts, 3).unwrap();
    assert_eq!(by_prompt.mel.num_bins(), by_ref.mel.num_bins());
    assert!(by_prompt.mel.data.iter().all(|v| v.is_finite()));
}

#[test]
fn prompt_conversion_without_diffusion_is_rejected() {
    let (_, cfg) = shared_run();
    let converter = Converter::load(&cfg.run_dir, false, None).unwrap();
    let manifest = Manifest::load(&cfg.manifest_path()).unwrap();
    let r = manifest.split(Split::Heldout).next().unwrap();
    let source = manifest.load_features(r).unwrap();
    let err = converter
        .convert(&source, &StyleSource::Prompt("high".into()), &SampleOptions::default(), 0)
        .unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_stylevc")).args(args).output().unwrap()
}

#[test]
fn cli_without_arguments_fails() {
    assert!(!cli(&[]).status.success());
}

#[test]
fn cli_rejects_unknown_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[train_vc]\nstepz = 3\n").unwrap();
    let out = cli(&["--config", path.to_str().unwrap(), "prepare-data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));
}

#[test]
fn cli_prepare_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.toml");
    fs::write(&config, "[corpus]\nnum_utterances = 12\nheld_out = 2\n").unwrap();
    let mut manifests = Vec::new();
    for name in ["a", "b"] {
        let root = dir.path().join(name);
        let out = cli(&[
            "--config",
            config.to_str().unwrap(),
            "--data-root",
            root.to_str().unwrap(),
            "prepare-data",
            "--seed",
            "7",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        manifests.push(fs::read(root.join("manifest.jsonl")).unwrap());
    }
    assert_eq!(manifests[0], manifests[1]);
}

#[test]
fn cli_convert_and_evaluate_write_a_report() {
    let (dir, cfg) = shared_run();
    let out_dir = dir.path().join("cli_converted");
    let report = dir.path().join("cli_report.jsonl");
    let data = cfg.data_root.to_str().unwrap();
    let run = cfg.run_dir.to_str().unwrap();
    let conv = cli(&[
        "--data-root", data, "--run-dir", run, "convert", "--prompt", "low slow", "--split", "heldout",
        "--out-dir", out_dir.to_str().unwrap(), "--steps", "5",
    ]);
    assert!(conv.status.success(), "{}", String::from_utf8_lossy(&conv.stderr));
    let eval = cli(&[
        "--data-root", data, "--run-dir", run, "evaluate", "--converted", out_dir.to_str().unwrap(), "--report",
        report.to_str().unwrap(),
    ]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let records = stylevc::evaluation::read_report(&report).unwrap();
    assert_eq!(records.len(), 6);
    assert!(records.iter().all(|r| r.mcd_db.is_some_and(|m| m.is_finite() && m >= 0.0)));
}

#[test]
fn shipped_desk_config_matches_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    assert_eq!(RunConfig::load(&path).unwrap(), RunConfig::default());
}
