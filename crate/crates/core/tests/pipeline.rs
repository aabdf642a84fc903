mod common;

use std::fs;

use portrait_core::checkpoint::{checkpoint_bytes, checkpoint_from_bytes};
use portrait_core::codec::VideoClip;
use portrait_core::config::RunConfig;
use portrait_core::curation::{clip_blur_score, curate_manifest, CurationConfig};
use portrait_core::flow::{train_loop, FlowConfig, TrainState};
use portrait_core::generator::Denoiser;
use portrait_core::numerics::Tensor;

use common::*;

#[test]
fn curation_fixture_meets_expectations_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_curation_fixture(dir.path());
    let out = dir.path().join("curated.jsonl");
    let summary = curate_manifest(&manifest, &out, &CurationConfig::default()).unwrap();
    assert_eq!((summary.read, summary.accepted), (6, 2));
    assert_eq!(outcomes(&out), expected_outcomes());
    let first = fs::read(&out).unwrap();
    curate_manifest(&manifest, &out, &CurationConfig::default()).unwrap();
    assert_eq!(fs::read(&out).unwrap(), first);

    // Curating the curated output changes nothing either.
    let again = dir.path().join("again.jsonl");
    curate_manifest(&out, &again, &CurationConfig::default()).unwrap();
    assert_eq!(fs::read(&again).unwrap(), first);
}

#[test]
fn constant_clips_have_zero_blur_score() {
    for level in [0.0, 0.3, 1.0] {
        let clip = VideoClip::new(Tensor::full(&[3, 10, 6, 3], level), 25.0).unwrap();
        assert_eq!(clip_blur_score(&clip, 3).unwrap(), 0.0);
    }
}

fn run_config(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        model: tiny_config(),
        flow: FlowConfig {
            lr: 1e-3,
            ..FlowConfig::default()
        },
        ..RunConfig::default()
    }
}

#[test]
fn resumed_training_matches_continuous_training() {
    let cfg = run_config(17);
    let model = Denoiser::new(cfg.model, cfg.seed).unwrap();
    let samples = scene_samples(&model, 3, 1, 4);
    let mut continuous = TrainState::new(model, cfg.seed);
    train_loop(&mut continuous, &samples, &cfg.flow, 4, 2, |_, _| {}).unwrap();
    let saved = checkpoint_bytes(&continuous, &cfg).unwrap();

    let mut expected = Vec::new();
    train_loop(&mut continuous, &samples, &cfg.flow, 10, 2, |s, l| {
        expected.push((s, l))
    })
    .unwrap();

    let (mut resumed, back) = checkpoint_from_bytes(&saved).unwrap();
    assert_eq!(back, cfg);
    let mut got = Vec::new();
    train_loop(&mut resumed, &samples, &cfg.flow, 10, 2, |s, l| {
        got.push((s, l))
    })
    .unwrap();
    assert_eq!(got, expected);
    assert_eq!(resumed, continuous);
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let bytes = |seed: u64| {
        let cfg = run_config(seed);
        let model = Denoiser::new(cfg.model, cfg.seed).unwrap();
        let samples = scene_samples(&model, 2, 2, 4);
        let mut st = TrainState::new(model, cfg.seed);
        train_loop(&mut st, &samples, &cfg.flow, 3, 2, |_, _| {}).unwrap();
        checkpoint_bytes(&st, &cfg).unwrap()
    };
    assert!(bytes(5) == bytes(5));
    assert!(bytes(5) != bytes(6));
}
