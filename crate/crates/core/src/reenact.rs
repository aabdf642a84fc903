//! Self- and cross-reenactment protocols over synthetic benchmark scenes.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec::{decode, latent_dims, LatentClip, VideoClip};
use crate::dataset::{char_of_key, reference_latent};
use crate::error::{Error, Result};
use crate::flow::{euler_sample, DenoiserField, FlowConfig};
use crate::generator::Denoiser;
use crate::metrics::{aed, apd, lmd, mae_angular, psnr, ssim, LandmarkTrack};
use crate::numerics::Tensor;
use crate::scene::{
    expr_track, fit_scene_parameters, gaze_track, landmarks, pose_track, render, SyntheticScene,
};
use crate::seed::{rng, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[serde(rename = "self")]
    SelfReenact,
    Cross,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::SelfReenact => "self",
            Mode::Cross => "cross",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self" => Ok(Mode::SelfReenact),
            "cross" => Ok(Mode::Cross),
            _ => Err(Error::Config(format!(
                "mode must be `self` or `cross`, got `{s}`"
            ))),
        }
    }
}

/// What a model sees: the source image, and the driving scene. Real models
/// only read its expression tracks and face masks; oracles may read more.
pub struct ReenactInput<'a> {
    /// Single-frame clip.
    pub source: &'a VideoClip,
    /// Scene that supplied the source frame.
    pub source_scene: &'a SyntheticScene,
    pub driving: &'a SyntheticScene,
    /// Distinguishes clips for per-clip randomness.
    pub counter: u64,
}

pub trait PortraitModel {
    fn generate(&self, input: &ReenactInput<'_>) -> Result<VideoClip>;
}

/// Returns the driving clip unchanged.
pub struct VerbatimOracle;

impl PortraitModel for VerbatimOracle {
    fn generate(&self, input: &ReenactInput<'_>) -> Result<VideoClip> {
        Ok(input.driving.clip.clone())
    }
}

/// Returns a constant clip shaped like the driving clip.
pub struct ConstantOracle(pub f32);

impl PortraitModel for ConstantOracle {
    fn generate(&self, input: &ReenactInput<'_>) -> Result<VideoClip> {
        let c = &input.driving.clip;
        VideoClip::new(Tensor::full(c.frames.shape(), self.0), c.frame_rate)
    }
}

/// Renders the source identity with the driving parameters exactly.
pub struct PuppetOracle;

impl PortraitModel for PuppetOracle {
    fn generate(&self, input: &ReenactInput<'_>) -> Result<VideoClip> {
        render(
            &input.source_scene.template,
            &input.driving.params(),
            input.driving.clip.frame_rate,
        )
    }
}

/// The trained denoiser sampled with guidance, conditioned on the source
/// frame latent, the driving tracks and the driving face masks.
pub struct DiffusionModel {
    pub denoiser: Denoiser<f32>,
    pub flow: FlowConfig,
    pub seed: u64,
}

impl PortraitModel for DiffusionModel {
    fn generate(&self, input: &ReenactInput<'_>) -> Result<VideoClip> {
        let driving = input.driving;
        let tracks = driving.tracks();
        let shape = latent_dims(driving.clip.dims()?);
        let mask = self.denoiser.pair_mask(
            &driving.masks(),
            &char_of_key(&self.denoiser, &tracks),
            &shape,
        )?;
        let reference = reference_latent(input.source)?;
        let field = DenoiserField {
            model: &self.denoiser,
            tracks: &tracks,
            reference: Some(&reference),
            mask: &mask,
        };
        let z = euler_sample(
            &field,
            &shape,
            &self.flow,
            &mut rng(self.seed, Stream::Sampler, input.counter),
        )?;
        decode(&LatentClip { tokens: z }, driving.clip.frame_rate)
    }
}

/// One benchmark entry. Cross mode takes the source frame from `source`.
#[derive(Clone, Debug)]
pub struct BenchItem {
    pub clip_id: String,
    pub driving: SyntheticScene,
    pub source: Option<SyntheticScene>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipReport {
    pub clip_id: String,
    pub mode: Mode,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub mode: Mode,
    pub clips: Vec<ClipReport>,
    /// Mean of each metric over clips.
    pub aggregate: BTreeMap<String, f64>,
}

#[derive(Serialize)]
struct AggregateLine<'a> {
    clip_id: &'static str,
    mode: Mode,
    clips: usize,
    metrics: &'a BTreeMap<String, f64>,
}

impl Report {
    /// JSON Lines: one record per clip, then the aggregate record.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for c in &self.clips {
            out.push_str(&serde_json::to_string(c)?);
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&AggregateLine {
            clip_id: "aggregate",
            mode: self.mode,
            clips: self.clips.len(),
            metrics: &self.aggregate,
        })?);
        out.push('\n');
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }
}

fn mean_over<F>(n: usize, mut f: F) -> Result<f64>
where
    F: FnMut(usize) -> Result<f64>,
{
    let mut s = 0.0;
    for i in 0..n {
        s += f(i)?;
    }
    Ok(s / n as f64)
}

fn check_item(item: &BenchItem, mode: Mode) -> Result<()> {
    let mut missing = Vec::new();
    if item.driving.characters.is_empty() {
        missing.push("driving tracks".to_string());
    }
    match (&item.source, mode) {
        (None, Mode::Cross) => missing.push("source".into()),
        (Some(s), Mode::Cross) if s.characters.len() != item.driving.characters.len() => {
            return Err(Error::shape(format!(
                "clip `{}`: source has {} characters, driving has {}",
                item.clip_id,
                s.characters.len(),
                item.driving.characters.len()
            )))
        }
        _ => {}
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::IncompleteInput(missing))
    }
}

/// Runs `model` on every item and scores it. Self mode compares the output
/// with the driving clip (PSNR, SSIM) and the fitted landmarks and gaze with
/// the driving ground truth (LMD, MAE). Cross mode fits the output with the
/// source identity and compares expression, pose and gaze with the driving
/// parameters (AED, APD, MAE). Per-character scores are averaged.
pub fn run_reenactment(
    mode: Mode,
    items: &[BenchItem],
    model: &dyn PortraitModel,
) -> Result<Report> {
    for item in items {
        check_item(item, mode)?;
    }
    let mut clips = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let driving = &item.driving;
        let source_scene = match mode {
            Mode::SelfReenact => driving,
            Mode::Cross => item.source.as_ref().expect("checked"),
        };
        let source = source_scene.clip.frame(0)?;
        let out = model.generate(&ReenactInput {
            source: &source,
            source_scene,
            driving,
            counter: i as u64,
        })?;
        if out.frames.shape() != driving.clip.frames.shape() {
            return Err(Error::shape(format!(
                "model produced {:?}, expected {:?}",
                out.frames.shape(),
                driving.clip.frames.shape()
            )));
        }
        let template = &source_scene.template;
        let fitted = fit_scene_parameters(&out, template)?;
        let n = driving.characters.len();
        let mut metrics = BTreeMap::new();
        match mode {
            Mode::SelfReenact => {
                metrics.insert("psnr".into(), psnr(&out, &driving.clip)?);
                metrics.insert("ssim".into(), ssim(&out, &driving.clip)?);
                let lmd_v = mean_over(n, |c| {
                    let ch = &template.characters[c];
                    let pred = LandmarkTrack {
                        points: fitted[c]
                            .iter()
                            .map(|p| landmarks(template, ch, p))
                            .collect(),
                    };
                    lmd(&pred, &driving.characters[c].landmarks)
                })?;
                metrics.insert("lmd".into(), lmd_v);
            }
            Mode::Cross => {
                let aed_v = mean_over(n, |c| {
                    aed(&expr_track(&fitted[c]), &driving.characters[c].expr)
                })?;
                let apd_v = mean_over(n, |c| {
                    apd(&pose_track(&fitted[c]), &driving.characters[c].pose)
                })?;
                metrics.insert("aed".into(), aed_v);
                metrics.insert("apd".into(), apd_v);
            }
        }
        let mae_v = mean_over(n, |c| {
            mae_angular(&gaze_track(&fitted[c]), &driving.characters[c].gaze)
        })?;
        metrics.insert("mae".into(), mae_v);
        clips.push(ClipReport {
            clip_id: item.clip_id.clone(),
            mode,
            metrics,
        });
    }
    clips.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
    let mut aggregate = BTreeMap::new();
    if !clips.is_empty() {
        for key in clips[0].metrics.keys() {
            let m = clips.iter().map(|c| c.metrics[key]).sum::<f64>() / clips.len() as f64;
            aggregate.insert(key.clone(), m);
        }
    }
    Ok(Report {
        mode,
        clips,
        aggregate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::PSNR_CAP;
    use crate::scene::{generate_synthetic_scene, SceneSpec};

    fn item(id: &str, seed: u64, source_seed: Option<u64>) -> BenchItem {
        let spec = |seed| SceneSpec {
            seed,
            frames: 2,
            ..SceneSpec::default()
        };
        BenchItem {
            clip_id: id.into(),
            driving: generate_synthetic_scene(&spec(seed)).unwrap(),
            source: source_seed.map(|s| generate_synthetic_scene(&spec(s)).unwrap()),
        }
    }

    #[test]
    fn verbatim_oracle_scores_perfectly_in_self_mode() {
        let items = [item("b", 1, None), item("a", 2, None)];
        let r = run_reenactment(Mode::SelfReenact, &items, &VerbatimOracle).unwrap();
        assert_eq!(r.clips[0].clip_id, "a");
        for c in &r.clips {
            assert_eq!(c.metrics["psnr"], PSNR_CAP);
            assert_eq!(c.metrics["ssim"], 1.0);
            assert_eq!(c.metrics["lmd"], 0.0);
            assert_eq!(c.metrics["mae"], 0.0);
        }
    }

    #[test]
    fn gray_oracle_lmd_matches_fitting_the_gray_clip() {
        let items = [item("g", 3, None)];
        let r = run_reenactment(Mode::SelfReenact, &items, &ConstantOracle(0.5)).unwrap();
        let d = &items[0].driving;
        let gray = VideoClip::new(Tensor::full(d.clip.frames.shape(), 0.5), 25.0).unwrap();
        let fitted = fit_scene_parameters(&gray, &d.template).unwrap();
        let ch = &d.template.characters[0];
        let pred = LandmarkTrack {
            points: fitted[0]
                .iter()
                .map(|p| landmarks(&d.template, ch, p))
                .collect(),
        };
        let want = lmd(&pred, &d.characters[0].landmarks).unwrap();
        assert_eq!(r.clips[0].metrics["lmd"], want);
    }

    #[test]
    fn puppet_oracle_scores_zero_in_cross_mode() {
        let items = [item("c", 4, Some(5)), item("d", 6, Some(7))];
        let r = run_reenactment(Mode::Cross, &items, &PuppetOracle).unwrap();
        for c in &r.clips {
            assert_eq!(
                (c.metrics["aed"], c.metrics["apd"], c.metrics["mae"]),
                (0.0, 0.0, 0.0)
            );
        }
    }

    #[test]
    fn aggregate_is_the_mean_of_clips() {
        let items = [item("x", 8, None), item("y", 9, None)];
        let r = run_reenactment(Mode::SelfReenact, &items, &ConstantOracle(0.3)).unwrap();
        for (k, v) in &r.aggregate {
            let m = (r.clips[0].metrics[k] + r.clips[1].metrics[k]) / 2.0;
            assert!((v - m).abs() < 1e-9);
        }
        let text = r.to_jsonl().unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().last().unwrap().contains("\"aggregate\""));
    }

    #[test]
    fn cross_mode_needs_a_source() {
        let items = [item("z", 1, None)];
        match run_reenactment(Mode::Cross, &items, &PuppetOracle) {
            Err(Error::IncompleteInput(m)) => assert_eq!(m, vec!["source".to_string()]),
            other => panic!("{other:?}"),
        }
    }
}
