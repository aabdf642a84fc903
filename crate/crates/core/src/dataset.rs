//! Scene directories on disk and their conversion into training samples.
//!
//! A scene `<id>` is stored as three files: `<id>.scene.json` (template and
//! per-frame parameters), `<id>.fpvc` (the rendered clip) and
//! `<id>.tracks.jsonl` (implicit expression tracks).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::{encode, VideoClip};
use crate::curation::ClipManifestRecord;
use crate::error::{Error, Result};
use crate::expression::{
    read_track_file, write_track_file, CharacterFeatures, ImplicitExpressionTrack, TrackRecord,
};
use crate::flow::TrainSample;
use crate::generator::Denoiser;
use crate::numerics::Tensor;
use crate::scene::{character_tracks, FaceParams, SceneTemplate, SyntheticScene};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub seed: u64,
    pub frame_rate: f32,
    pub template: SceneTemplate,
    pub params: Vec<Vec<FaceParams>>,
}

fn scene_paths(dir: &Path, id: &str) -> [(PathBuf, &'static str); 3] {
    [
        (dir.join(format!("{id}.scene.json")), "scene"),
        (dir.join(format!("{id}.fpvc")), "clip"),
        (dir.join(format!("{id}.tracks.jsonl")), "tracks"),
    ]
}

pub fn save_scene(dir: &Path, id: &str, scene: &SyntheticScene) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let [(meta, _), (clip, _), (tracks, _)] = scene_paths(dir, id);
    let record = SceneRecord {
        seed: scene.seed,
        frame_rate: scene.clip.frame_rate,
        template: scene.template.clone(),
        params: scene.params(),
    };
    fs::write(&meta, serde_json::to_string(&record)?).map_err(|e| Error::io(&meta, e))?;
    scene.clip.write(&clip)?;
    write_track_file(
        &tracks,
        &[TrackRecord {
            clip_id: id.to_string(),
            fps: scene.clip.frame_rate,
            characters: scene
                .characters
                .iter()
                .map(|c| CharacterFeatures::from_track(&c.expression))
                .collect(),
        }],
    )
}

/// Loads a saved scene. Absent files are reported together.
pub fn load_scene(dir: &Path, id: &str) -> Result<SyntheticScene> {
    let paths = scene_paths(dir, id);
    let missing: Vec<String> = paths
        .iter()
        .filter(|(p, _)| !p.exists())
        .map(|(_, name)| name.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::IncompleteInput(missing));
    }
    let [(meta, _), (clip, _), (tracks, _)] = paths;
    let text = fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
    let record: SceneRecord = serde_json::from_str(&text)?;
    let clip = VideoClip::read(&clip, record.frame_rate)?;
    let stored: Vec<ImplicitExpressionTrack> = read_track_file(&tracks)?
        .first()
        .ok_or_else(|| Error::IncompleteInput(vec!["tracks".into()]))?
        .tracks()?;
    let mut characters = Vec::with_capacity(record.params.len());
    for (i, p) in record.params.iter().enumerate() {
        let mut c = character_tracks(&record.template, i, p)?;
        c.expression = stored
            .iter()
            .find(|t| t.character_id == c.character_id)
            .cloned()
            .ok_or_else(|| {
                Error::IncompleteInput(vec![format!("tracks for character {}", c.character_id)])
            })?;
        characters.push(c);
    }
    Ok(SyntheticScene {
        seed: record.seed,
        template: record.template,
        clip,
        characters,
    })
}

/// Ids of every `*.scene.json` in `dir`, sorted.
pub fn list_scenes(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if let Some(id) = entry
            .file_name()
            .to_str()
            .and_then(|n| n.strip_suffix(".scene.json"))
        {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    Ok(ids)
}

/// Curation manifest record for a saved scene: mask bounding boxes per
/// frame, ground-truth landmarks, and the clip path.
pub fn manifest_record(id: &str, scene: &SyntheticScene) -> Result<ClipManifestRecord> {
    let [f, h, w, _] = scene.clip.dims()?;
    let mut boxes = vec![Vec::new(); f];
    for c in &scene.characters {
        let m = c.masks.masks.data();
        for (fr, frame_boxes) in boxes.iter_mut().enumerate() {
            let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
            for y in 0..h {
                for x in 0..w {
                    if m[(fr * h + y) * w + x] > 0.0 {
                        (x0, y0, x1, y1) = (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1));
                    }
                }
            }
            if x1 > x0 {
                frame_boxes.push([
                    x0 as f64 / w as f64,
                    y0 as f64 / h as f64,
                    x1 as f64 / w as f64,
                    y1 as f64 / h as f64,
                ]);
            }
        }
    }
    Ok(ClipManifestRecord {
        clip_id: id.to_string(),
        frame_count: f,
        fps: scene.clip.frame_rate,
        boxes,
        landmarks: scene
            .characters
            .iter()
            .map(|c| c.landmarks.clone())
            .collect(),
        clip_path: Some(format!("{id}.fpvc")),
        caption: None,
        extra: BTreeMap::new(),
        person_count: None,
        blur_score: None,
        motion_score: None,
        angular_score: None,
        accepted: false,
        reject_reason: None,
    })
}

/// Per-frame motion key owners for `tracks`, in track order.
pub fn char_of_key(model: &Denoiser<f32>, tracks: &[ImplicitExpressionTrack]) -> Vec<u32> {
    let l = model.config().expression.tokens_per_character();
    tracks
        .iter()
        .flat_map(|t| std::iter::repeat_n(t.character_id, l))
        .collect()
}

/// Latent of frame 0, `[h, w, C]`.
pub fn reference_latent(clip: &VideoClip) -> Result<Tensor<f32>> {
    let lat = encode(&clip.frame(0)?)?;
    let s = lat.tokens.shape().to_vec();
    lat.tokens.reshape(&s[1..])
}

/// A scene as a training sample: its latent, its first frame as the
/// reference, its tracks, and the pair mask from its face masks.
pub fn scene_sample(model: &Denoiser<f32>, scene: &SyntheticScene) -> Result<TrainSample> {
    let latent = encode(&scene.clip)?.tokens;
    let tracks = scene.tracks();
    let mask = model.pair_mask(&scene.masks(), &char_of_key(model, &tracks), latent.shape())?;
    Ok(TrainSample {
        latent,
        reference: Some(reference_latent(&scene.clip)?),
        tracks,
        mask,
    })
}
