//! Clip curation: person-count filtering, Laplacian blur scoring, and
//! expressive-motion selection over JSON Lines manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::VideoClip;
use crate::error::{Error, Result};
use crate::metrics::LandmarkTrack;
use crate::numerics::Tensor;

pub const REASON_PERSONS: &str = "person_count";
pub const REASON_BLUR: &str = "blur";
pub const REASON_EXPRESSIVE: &str = "expressive";
pub const REASON_MALFORMED: &str = "malformed";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurationConfig {
    pub min_persons: usize,
    pub blur_threshold: f64,
    pub motion_threshold: f64,
    /// Degrees.
    pub angle_threshold: f64,
    /// Landmark indices whose connecting line gives the head orientation.
    pub eye_pair: (usize, usize),
    /// Frames sampled, evenly spaced, for the clip blur score.
    pub blur_samples: usize,
}

impl Default for CurationConfig {
    fn default() -> Self {
        CurationConfig {
            min_persons: 2,
            blur_threshold: 1e-4,
            motion_threshold: 0.005,
            angle_threshold: 2.0,
            eye_pair: (8, 9),
            blur_samples: 4,
        }
    }
}

/// One manifest line. Quality fields are overwritten by the pipeline; any
/// other fields (captions, aesthetic scores) pass through.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipManifestRecord {
    pub clip_id: String,
    pub frame_count: usize,
    pub fps: f32,
    /// Per frame, per person `[x0, y0, x1, y1]` in normalized coordinates.
    pub boxes: Vec<Vec<[f64; 4]>>,
    /// One track per person.
    #[serde(default)]
    pub landmarks: Vec<LandmarkTrack>,
    /// Clip file, relative to the manifest's directory.
    #[serde(default)]
    pub clip_path: Option<String>,
    #[serde(default)]
    pub caption: Option<String>,
    #[serde(default, flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
    #[serde(default)]
    pub person_count: Option<usize>,
    #[serde(default)]
    pub blur_score: Option<f64>,
    #[serde(default)]
    pub motion_score: Option<f64>,
    #[serde(default)]
    pub angular_score: Option<f64>,
    #[serde(default)]
    pub accepted: bool,
    #[serde(default)]
    pub reject_reason: Option<String>,
}

impl ClipManifestRecord {
    pub fn validate(&self) -> Result<()> {
        if self.boxes.is_empty() {
            return Err(Error::MalformedManifest(format!(
                "clip `{}` has no frames",
                self.clip_id
            )));
        }
        if self.boxes.len() != self.frame_count {
            return Err(Error::MalformedManifest(format!(
                "clip `{}` declares {} frames but lists boxes for {}",
                self.clip_id,
                self.frame_count,
                self.boxes.len()
            )));
        }
        for b in self.boxes.iter().flatten() {
            let ok = b.iter().all(|v| (0.0..=1.0).contains(v)) && b[0] < b[2] && b[1] < b[3];
            if !ok {
                return Err(Error::MalformedManifest(format!(
                    "clip `{}` has invalid box {b:?}",
                    self.clip_id
                )));
            }
        }
        Ok(())
    }
}

/// Minimum person count over frames and whether it reaches `min_count`.
pub fn person_count_filter(rec: &ClipManifestRecord, min_count: usize) -> Result<(usize, bool)> {
    rec.validate()?;
    let count = rec.boxes.iter().map(Vec::len).min().unwrap_or(0);
    Ok((count, count >= min_count))
}

/// Variance of the 4-neighbour Laplacian response over interior pixels, so a
/// constant frame of any level scores exactly zero.
pub fn blur_score(frame: &Tensor<f32>) -> Result<f64> {
    let &[h, w] = frame.shape() else {
        return Err(Error::shape(format!(
            "blur score needs an [H, W] frame, got {:?}",
            frame.shape()
        )));
    };
    if h < 3 || w < 3 {
        return Err(Error::shape(format!("frame {h}x{w} is smaller than 3x3")));
    }
    let d = frame.data();
    let at = |y: usize, x: usize| d[y * w + x] as f64;
    let mut resp = Vec::with_capacity((h - 2) * (w - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            resp.push(at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1) - 4.0 * at(y, x));
        }
    }
    Ok(population_std(&resp).powi(2))
}

/// Minimum blur score over `samples` evenly spaced frames.
pub fn clip_blur_score(clip: &VideoClip, samples: usize) -> Result<f64> {
    let f = clip.frame_count();
    let n = samples.clamp(1, f);
    let mut best = f64::INFINITY;
    for k in 0..n {
        let i = if n == 1 { 0 } else { k * (f - 1) / (n - 1) };
        best = best.min(blur_score(&clip.gray_frame(i)?)?);
    }
    Ok(best)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn population_std(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpressiveScores {
    pub motion: f64,
    /// Degrees.
    pub angular: f64,
    pub accepted: bool,
}

/// Motion score is the mean over points of the std-dev of inter-frame
/// displacement magnitude; angular score is the std-dev of the eye-line angle.
pub fn expressive_select(track: &LandmarkTrack, cfg: &CurationConfig) -> Result<ExpressiveScores> {
    let f = track.points.len();
    if f < 2 {
        return Err(Error::InsufficientFrames { needed: 2, got: f });
    }
    let l = track.points[0].len();
    if l == 0 || track.points.iter().any(|p| p.len() != l) {
        return Err(Error::shape(
            "landmark frames need the same non-zero point count",
        ));
    }
    let (a, b) = cfg.eye_pair;
    if a >= l || b >= l {
        return Err(Error::shape(format!(
            "eye pair ({a}, {b}) outside {l} landmarks"
        )));
    }
    let motion = mean(
        &(0..l)
            .map(|p| {
                let mags: Vec<f64> = track
                    .points
                    .windows(2)
                    .map(|w| {
                        let (dx, dy) = (w[1][p][0] - w[0][p][0], w[1][p][1] - w[0][p][1]);
                        dx.hypot(dy)
                    })
                    .collect();
                population_std(&mags)
            })
            .collect::<Vec<_>>(),
    );
    let angles: Vec<f64> = track
        .points
        .iter()
        .map(|pts| {
            (pts[b][1] - pts[a][1])
                .atan2(pts[b][0] - pts[a][0])
                .to_degrees()
        })
        .collect();
    let angular = population_std(&angles);
    Ok(ExpressiveScores {
        motion,
        angular,
        accepted: motion >= cfg.motion_threshold || angular >= cfg.angle_threshold,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CurationSummary {
    pub read: usize,
    pub accepted: usize,
    pub rejected_by_stage: BTreeMap<String, usize>,
    /// One message per malformed line, naming its line number.
    pub errors: Vec<String>,
}

/// Runs every stage on one record, filling its quality fields. Stages are
/// conjunctive; the first failing stage is recorded.
pub fn curate_record(
    rec: &mut ClipManifestRecord,
    base_dir: &Path,
    cfg: &CurationConfig,
) -> Result<()> {
    rec.person_count = None;
    rec.blur_score = None;
    rec.motion_score = None;
    rec.angular_score = None;
    rec.accepted = false;
    rec.reject_reason = None;

    let (count, ok) = person_count_filter(rec, cfg.min_persons)?;
    rec.person_count = Some(count);
    if !ok {
        rec.reject_reason = Some(REASON_PERSONS.into());
        return Ok(());
    }

    let blur = match &rec.clip_path {
        Some(p) => Some(clip_blur_score(
            &VideoClip::read(&base_dir.join(p), rec.fps)?,
            cfg.blur_samples,
        )?),
        None => None,
    };
    rec.blur_score = blur;
    if blur.is_none_or(|b| b < cfg.blur_threshold) {
        rec.reject_reason = Some(REASON_BLUR.into());
        return Ok(());
    }

    let mut scores = Vec::with_capacity(rec.landmarks.len());
    for t in &rec.landmarks {
        scores.push(expressive_select(t, cfg)?);
    }
    if !scores.is_empty() {
        rec.motion_score = Some(
            scores
                .iter()
                .map(|s| s.motion)
                .fold(f64::INFINITY, f64::min),
        );
        rec.angular_score = Some(
            scores
                .iter()
                .map(|s| s.angular)
                .fold(f64::INFINITY, f64::min),
        );
    }
    if scores.is_empty() || !scores.iter().all(|s| s.accepted) {
        rec.reject_reason = Some(REASON_EXPRESSIVE.into());
        return Ok(());
    }
    rec.accepted = true;
    Ok(())
}

#[derive(Serialize)]
struct MalformedLine<'a> {
    line: usize,
    accepted: bool,
    reject_reason: &'a str,
    error: String,
}

/// Curates a JSON Lines manifest. Every non-blank input line produces one
/// output line in input order; malformed lines are reported and counted as
/// rejected rather than aborting the run.
pub fn curate_manifest(
    in_path: &Path,
    out_path: &Path,
    cfg: &CurationConfig,
) -> Result<CurationSummary> {
    let text = fs::read_to_string(in_path).map_err(|e| Error::io(in_path, e))?;
    let base_dir: PathBuf = in_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut summary = CurationSummary::default();
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        summary.read += 1;
        let parsed = serde_json::from_str::<ClipManifestRecord>(line)
            .map_err(|e| Error::MalformedManifest(e.to_string()))
            .and_then(|mut rec| curate_record(&mut rec, &base_dir, cfg).map(|_| rec));
        match parsed {
            Ok(rec) => {
                match &rec.reject_reason {
                    None => summary.accepted += 1,
                    Some(r) => *summary.rejected_by_stage.entry(r.clone()).or_default() += 1,
                }
                out.push_str(&serde_json::to_string(&rec)?);
            }
            Err(e) => {
                let msg = format!("line {}: {e}", i + 1);
                *summary
                    .rejected_by_stage
                    .entry(REASON_MALFORMED.into())
                    .or_default() += 1;
                out.push_str(&serde_json::to_string(&MalformedLine {
                    line: i + 1,
                    accepted: false,
                    reject_reason: REASON_MALFORMED,
                    error: msg.clone(),
                })?);
                summary.errors.push(msg);
            }
        }
        out.push('\n');
    }
    fs::write(out_path, out).map_err(|e| Error::io(out_path, e))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frame(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> Tensor<f32> {
        let data = (0..h * w).map(|i| f(i / w, i % w)).collect();
        Tensor::new(vec![h, w], data).unwrap()
    }

    #[test]
    fn constant_frame_scores_zero() {
        assert_eq!(blur_score(&frame(6, 6, |_, _| 0.37)).unwrap(), 0.0);
        assert!(blur_score(&frame(6, 6, |y, _| if y == 3 { 0.5 } else { 0.0 })).unwrap() > 0.0);
    }

    #[test]
    fn centred_impulse_matches_hand_convolution() {
        // Interior 3x3 response: -4 at the centre, 1 at its four neighbours, 0 at the corners.
        let got = blur_score(&frame(
            5,
            5,
            |y, x| if (y, x) == (2, 2) { 1.0 } else { 0.0 },
        ))
        .unwrap();
        let var = (16.0 + 4.0 * 1.0) / 9.0;
        assert!((got - var).abs() < 1e-15);
    }

    #[test]
    fn blur_lowers_checkerboard_score() {
        let sharp = frame(8, 8, |y, x| ((y + x) % 2) as f32);
        let d = sharp.data();
        let blurred = frame(8, 8, |y, x| {
            let (y1, x1) = ((y + 1).min(7), (x + 1).min(7));
            (d[y * 8 + x] + d[y1 * 8 + x] + d[y * 8 + x1] + d[y1 * 8 + x1]) / 4.0
        });
        assert!(blur_score(&sharp).unwrap() > blur_score(&blurred).unwrap());
    }

    #[test]
    fn tiny_frames_are_rejected() {
        assert!(blur_score(&frame(2, 5, |_, _| 0.0)).is_err());
    }

    #[test]
    fn static_landmarks_are_not_expressive() {
        let t = LandmarkTrack {
            points: vec![vec![[0.3, 0.4], [0.6, 0.4]]; 5],
        };
        let cfg = CurationConfig {
            eye_pair: (0, 1),
            ..CurationConfig::default()
        };
        let s = expressive_select(&t, &cfg).unwrap();
        assert_eq!((s.motion, s.angular, s.accepted), (0.0, 0.0, false));
    }

    #[test]
    fn sampled_sine_motion_matches_closed_form() {
        let (f, amp, period) = (16usize, 0.05, 8.0);
        let a = std::f64::consts::TAU / period;
        let t = LandmarkTrack {
            points: (0..f)
                .map(|i| {
                    let dy = amp * (a * i as f64).sin();
                    vec![[0.3, 0.5 + dy], [0.7, 0.5 + dy]]
                })
                .collect(),
        };
        // |y(t+1) - y(t)| = 2 amp |cos(a (t + 1/2)) sin(a / 2)|
        let mags: Vec<f64> = (0..f - 1)
            .map(|i| 2.0 * amp * ((a * (i as f64 + 0.5)).cos() * (a / 2.0).sin()).abs())
            .collect();
        let m = mags.iter().sum::<f64>() / mags.len() as f64;
        let want = (mags.iter().map(|x| (x - m).powi(2)).sum::<f64>() / mags.len() as f64).sqrt();
        let cfg = CurationConfig {
            eye_pair: (0, 1),
            ..CurationConfig::default()
        };
        let s = expressive_select(&t, &cfg).unwrap();
        assert!((s.motion - want).abs() < 1e-12, "{} vs {want}", s.motion);
        assert!(s.motion >= 0.005 && s.accepted);
        assert_eq!(s.angular, 0.0);
    }

    #[test]
    fn rotation_is_accepted_through_the_angular_branch() {
        let t = LandmarkTrack {
            points: (0..6)
                .map(|i| {
                    let r = if i % 2 == 0 { 10f64 } else { -10.0 }.to_radians();
                    vec![
                        [0.5 - 0.1 * r.cos(), 0.5 - 0.1 * r.sin()],
                        [0.5 + 0.1 * r.cos(), 0.5 + 0.1 * r.sin()],
                    ]
                })
                .collect(),
        };
        let cfg = CurationConfig {
            eye_pair: (0, 1),
            motion_threshold: f64::INFINITY,
            ..CurationConfig::default()
        };
        let s = expressive_select(&t, &cfg).unwrap();
        assert!((s.angular - 10.0).abs() < 1e-9);
        assert!(s.accepted);
    }

    #[test]
    fn one_frame_is_insufficient() {
        let t = LandmarkTrack {
            points: vec![vec![[0.0, 0.0]]],
        };
        assert!(matches!(
            expressive_select(&t, &CurationConfig::default()),
            Err(Error::InsufficientFrames { needed: 2, got: 1 })
        ));
    }

    fn record(boxes: Vec<Vec<[f64; 4]>>) -> ClipManifestRecord {
        ClipManifestRecord {
            clip_id: "c".into(),
            frame_count: boxes.len(),
            fps: 25.0,
            boxes,
            landmarks: vec![],
            clip_path: None,
            caption: None,
            extra: BTreeMap::new(),
            person_count: None,
            blur_score: None,
            motion_score: None,
            angular_score: None,
            accepted: false,
            reject_reason: None,
        }
    }

    #[test]
    fn person_count_uses_the_minimum_over_frames() {
        let b = [0.1, 0.1, 0.4, 0.4];
        assert_eq!(
            person_count_filter(&record(vec![vec![b, b]; 3]), 2).unwrap(),
            (2, true)
        );
        assert_eq!(
            person_count_filter(&record(vec![vec![b, b], vec![b]]), 2).unwrap(),
            (1, false)
        );
        assert_eq!(
            person_count_filter(&record(vec![vec![]; 2]), 2).unwrap(),
            (0, false)
        );
        assert!(matches!(
            person_count_filter(&record(vec![]), 2),
            Err(Error::MalformedManifest(_))
        ));
        let bad = [0.5, 0.1, 0.4, 0.4];
        assert!(person_count_filter(&record(vec![vec![bad]]), 2).is_err());
    }

    #[test]
    fn empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let (i, o) = (dir.path().join("in.jsonl"), dir.path().join("out.jsonl"));
        fs::write(&i, "").unwrap();
        let s = curate_manifest(&i, &o, &CurationConfig::default()).unwrap();
        assert_eq!((s.read, s.accepted), (0, 0));
        assert_eq!(fs::read_to_string(&o).unwrap(), "");
    }

    #[test]
    fn malformed_lines_are_reported_and_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let (i, o) = (dir.path().join("in.jsonl"), dir.path().join("out.jsonl"));
        let good = serde_json::to_string(&record(vec![vec![]])).unwrap();
        fs::write(&i, format!("{good}\nnot json\n")).unwrap();
        let s = curate_manifest(&i, &o, &CurationConfig::default()).unwrap();
        assert_eq!(s.read, 2);
        assert_eq!(s.rejected_by_stage[REASON_MALFORMED], 1);
        assert_eq!(s.rejected_by_stage[REASON_PERSONS], 1);
        assert!(s.errors[0].starts_with("line 2:"));
        assert_eq!(fs::read_to_string(&o).unwrap().lines().count(), 2);
    }

    proptest! {
        #[test]
        fn expressive_scores_ignore_global_translation(
            pts in prop::collection::vec(prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 2), 3..6),
            ox in -0.5f64..0.5, oy in -0.5f64..0.5,
        ) {
            let t = LandmarkTrack { points: pts.iter().map(|f| f.iter().map(|&(x, y)| [x, y]).collect()).collect() };
            let moved = LandmarkTrack { points: t.points.iter().map(|f| f.iter().map(|p| [p[0] + ox, p[1] + oy]).collect()).collect() };
            let cfg = CurationConfig { eye_pair: (0, 1), ..CurationConfig::default() };
            let (a, b) = (expressive_select(&t, &cfg).unwrap(), expressive_select(&moved, &cfg).unwrap());
            prop_assert!((a.motion - b.motion).abs() < 1e-9);
            prop_assert!((a.angular - b.angular).abs() < 1e-6);
        }

        #[test]
        fn blur_score_is_translation_invariant_for_interior_patterns(y in 2usize..6, x in 2usize..6) {
            let base = blur_score(&frame(10, 10, |r, c| if (r, c) == (3, 3) { 1.0 } else { 0.0 })).unwrap();
            let moved = blur_score(&frame(10, 10, |r, c| if (r, c) == (y, x) { 1.0 } else { 0.0 })).unwrap();
            prop_assert_eq!(base, moved);
        }
    }
}
