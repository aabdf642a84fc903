//! Fixtures shared by the integration tests.

#![allow(dead_code)]

use std::fs;
use std::path::Path;

use portrait_core::codec::VideoClip;
use portrait_core::curation::ClipManifestRecord;
use portrait_core::dataset::scene_sample;
use portrait_core::expression::{ExpressionConfig, FeatureDims};
use portrait_core::flow::TrainSample;
use portrait_core::generator::{Denoiser, DenoiserConfig};
use portrait_core::metrics::LandmarkTrack;
use portrait_core::numerics::Tensor;
use portrait_core::scene::{generate_synthetic_scene, SceneSpec};

pub const FRAMES: usize = 8;

/// A small model for determinism and persistence checks.
pub fn tiny_config() -> DenoiserConfig {
    DenoiserConfig {
        layers: 1,
        width: 16,
        heads: 2,
        patch: 4,
        latent_channels: 4,
        max_frames: 4,
        max_grid: 4,
        use_mca: true,
        expression: ExpressionConfig {
            width: 8,
            tokens: 2,
            kv_tokens: 2,
            heads: 2,
            ..ExpressionConfig::default()
        },
        context_dim: 0,
    }
}

/// Training samples from `count` synthetic scenes of `frames` frames.
pub fn scene_samples(
    model: &Denoiser<f32>,
    count: u64,
    characters: usize,
    frames: usize,
) -> Vec<TrainSample> {
    (0..count)
        .map(|s| {
            let scene = generate_synthetic_scene(&SceneSpec {
                seed: s,
                characters,
                frames,
                ..SceneSpec::default()
            })
            .unwrap();
            scene_sample(model, &scene).unwrap()
        })
        .collect()
}

pub fn small_dims() -> FeatureDims {
    FeatureDims {
        lip: 3,
        eye: 2,
        head: 2,
        emo: 3,
    }
}

/// 16 points on a ring around `(cx, 0.5)`, moved per frame by `motion`.
fn landmarks(cx: f64, motion: impl Fn(usize, [f64; 2]) -> [f64; 2]) -> LandmarkTrack {
    LandmarkTrack {
        points: (0..FRAMES)
            .map(|t| {
                (0..16)
                    .map(|p| {
                        let a = p as f64 * std::f64::consts::TAU / 16.0;
                        motion(t, [cx + 0.1 * a.cos(), 0.5 + 0.1 * a.sin()])
                    })
                    .collect()
            })
            .collect(),
    }
}

fn still(_: usize, p: [f64; 2]) -> [f64; 2] {
    p
}

fn talking(t: usize, p: [f64; 2]) -> [f64; 2] {
    [p[0], p[1] + 0.03 * (1.3 * t as f64).sin()]
}

fn nodding(t: usize, p: [f64; 2]) -> [f64; 2] {
    let a = (6.0 * (0.9 * t as f64).sin()).to_radians();
    let (dx, dy) = (p[0] - 0.5, p[1] - 0.5);
    [
        0.5 + dx * a.cos() - dy * a.sin(),
        0.5 + dx * a.sin() + dy * a.cos(),
    ]
}

fn record(id: &str, persons: usize, clip: &str, tracks: Vec<LandmarkTrack>) -> ClipManifestRecord {
    let all = [[0.05, 0.1, 0.45, 0.9], [0.55, 0.1, 0.95, 0.9]];
    ClipManifestRecord {
        clip_id: id.into(),
        frame_count: FRAMES,
        fps: 25.0,
        boxes: vec![all[..persons].to_vec(); FRAMES],
        landmarks: tracks,
        clip_path: Some(clip.into()),
        caption: Some(format!("clip {id}")),
        extra: Default::default(),
        person_count: None,
        blur_score: None,
        motion_score: None,
        angular_score: None,
        accepted: false,
        reject_reason: None,
    }
}

/// Writes a sharp and a flat clip plus a six-record manifest into `dir` and
/// returns the manifest path. Expected outcome per clip id:
///
/// | id      | outcome      |
/// |---------|--------------|
/// | solo    | person_count |
/// | flat    | blur         |
/// | still   | expressive   |
/// | half    | expressive   |
/// | talking | accepted     |
/// | nodding | accepted     |
pub fn write_curation_fixture(dir: &Path) -> std::path::PathBuf {
    let sharp = Tensor::from_fn(&[FRAMES, 16, 16, 1], |i| {
        let (y, x) = ((i / 16) % 16, i % 16);
        if (y / 2 + x / 2) % 2 == 0 {
            0.9
        } else {
            0.1
        }
    });
    VideoClip::new(sharp, 25.0)
        .unwrap()
        .write(&dir.join("sharp.fpvc"))
        .unwrap();
    VideoClip::new(Tensor::full(&[FRAMES, 16, 16, 1], 0.5), 25.0)
        .unwrap()
        .write(&dir.join("flat.fpvc"))
        .unwrap();

    let pair = |a: fn(usize, [f64; 2]) -> [f64; 2], b: fn(usize, [f64; 2]) -> [f64; 2]| {
        vec![landmarks(0.25, a), landmarks(0.75, b)]
    };
    let records = [
        record("solo", 1, "sharp.fpvc", vec![landmarks(0.25, talking)]),
        record("flat", 2, "flat.fpvc", pair(talking, talking)),
        record("still", 2, "sharp.fpvc", pair(still, still)),
        record("half", 2, "sharp.fpvc", pair(talking, still)),
        record("talking", 2, "sharp.fpvc", pair(talking, talking)),
        record("nodding", 2, "sharp.fpvc", pair(nodding, nodding)),
    ];
    let text: String = records
        .iter()
        .map(|r| serde_json::to_string(r).unwrap() + "\n")
        .collect();
    let path = dir.join("manifest.jsonl");
    fs::write(&path, text).unwrap();
    path
}

/// `(clip_id, reject_reason)` per output line, `None` when accepted.
pub fn outcomes(path: &Path) -> Vec<(String, Option<String>)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let r: ClipManifestRecord = serde_json::from_str(l).unwrap();
            assert_eq!(r.accepted, r.reject_reason.is_none());
            (r.clip_id, r.reject_reason)
        })
        .collect()
}

pub fn expected_outcomes() -> Vec<(String, Option<String>)> {
    [
        ("solo", Some("person_count")),
        ("flat", Some("blur")),
        ("still", Some("expressive")),
        ("half", Some("expressive")),
        ("talking", None),
        ("nodding", None),
    ]
    .iter()
    .map(|(id, r)| (id.to_string(), r.map(str::to_string)))
    .collect()
}
