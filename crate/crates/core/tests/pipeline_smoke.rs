//! End-to-end wiring checks of every experiment at tiny budgets: each stage
//! runs, artifacts land where later stages expect them, and data generation
//! is byte-reproducible.

use pigan::pipeline::{run, ExperimentConfig, ExperimentId, Overrides, Stage};

fn tiny_overrides() -> Overrides {
    Overrides {
        n_historical: Some(48),
        gan_steps: Some(25),
        deeponet_steps: Some(200),
        burn_in: Some(60),
        draws: Some(40),
        covariance_samples: Some(512),
        meta_steps: Some(3),
        n_test_windows: Some(2),
        zigzag_samples: Some(20_000),
        compare_gan_steps: Some(0),
    }
}

fn smoke(experiment: ExperimentId) {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::new(experiment, Stage::All, dir.path());
    cfg.seed = 11;
    cfg.overrides = tiny_overrides();
    let manifest = run(&cfg).unwrap_or_else(|e| panic!("{experiment:?}: {e}"));
    assert!(dir.path().join("manifest.json").exists());
    assert!(dir.path().join("metrics.csv").exists());
    assert!(!manifest.metrics.is_empty(), "{experiment:?} has metrics");
}

#[test]
fn sine_meta_all_stages() {
    smoke(ExperimentId::SineMeta);
}

#[test]
fn gp_appendix_b_all_stages() {
    smoke(ExperimentId::GpAppendixB);
}

#[test]
fn dr_forward_all_stages() {
    smoke(ExperimentId::DrForward);
}

#[test]
fn dr_inverse_all_stages() {
    smoke(ExperimentId::DrInverse);
}

#[test]
fn fractional_all_stages() {
    smoke(ExperimentId::Fractional);
}

#[test]
fn darcy_all_stages() {
    smoke(ExperimentId::Darcy);
}

#[test]
fn riser_all_stages() {
    smoke(ExperimentId::RiserWindow);
}

#[test]
fn zigzag_diagnose() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::new(ExperimentId::ZigzagAppendixC, Stage::Diagnose, dir.path());
    cfg.overrides.zigzag_samples = Some(30_000);
    let manifest = run(&cfg).unwrap();
    assert!(manifest.metrics.iter().any(|(n, _)| n == "sliced_w1_n50"));
    assert!(dir.path().join("zigzag.csv").exists());
}

#[test]
fn zigzag_rejects_training_stages() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::new(
        ExperimentId::ZigzagAppendixC,
        Stage::TrainPrior,
        dir.path(),
    );
    let err = run(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn posterior_without_prior_is_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::new(ExperimentId::SineMeta, Stage::Posterior, dir.path());
    cfg.overrides = tiny_overrides();
    let err = run(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), 2, "missing prerequisite: {err}");
}

#[test]
fn gen_data_is_byte_reproducible() {
    let read = |dir: &std::path::Path| std::fs::read(dir.join("snapshots.bin")).unwrap();
    let run_once = || {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::new(ExperimentId::DrForward, Stage::GenData, dir.path());
        cfg.seed = 99;
        cfg.overrides = tiny_overrides();
        run(&cfg).unwrap();
        read(dir.path())
    };
    assert_eq!(run_once(), run_once());
}
