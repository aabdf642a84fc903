//! Procedural "blob face" scenes with exact ground truth, and a brute-force
//! grid-search fit that recovers face parameters from rendered clips.
//!
//! Each character owns a vertical slot of the frame. Inside its slot a face
//! is an ellipse with two eyes (sclera plus pupil) and a mouth. All shapes are
//! given in face-local base units (one unit is one pixel for a 16-pixel slot)
//! and rendered with a one-pixel soft edge. Eye shapes only touch pixels inside
//! their eye zone and the mouth only touches the mouth zone, so for a fixed
//! pose the eye and mouth parameters can be fitted independently.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::VideoClip;
use crate::error::{Error, Result};
use crate::expression::{FeatureDims, ImplicitExpressionTrack};
use crate::generator::FaceMaskTrack;
use crate::metrics::{ExprFeatTrack, FeatureTrack, GazeTrack, LandmarkTrack, PoseTrack};
use crate::numerics::Tensor;
use crate::seed::{normal_tensor, rng, Stream};

const FACE_RX: f64 = 5.5;
const FACE_RY: f64 = 6.5;
const EYE_X: f64 = 2.2;
const EYE_Y: f64 = -1.6;
const EYE_RX: f64 = 1.5;
const EYE_RY: f64 = 1.5;
const PUPIL_R: f64 = 0.5;
const PUPIL_DX: f64 = 1.3;
const PUPIL_DY: f64 = 1.3;
const MOUTH_Y: f64 = 3.0;
const MOUTH_RX: f64 = 2.2;
const MOUTH_RY0: f64 = 0.25;
const MOUTH_RY1: f64 = 1.1;
const EYE_ZONE_HX: f64 = 2.3;
const EYE_ZONE_HY: f64 = 2.3;
const MOUTH_ZONE_HX: f64 = 2.9;
const MOUTH_ZONE_HY: f64 = 2.0;
const SCLERA: f64 = 0.95;
const PUPIL: f64 = 0.05;
const MOUTH: f64 = 0.15;
const VALENCE_GAIN: f64 = 0.12;
const GAZE_RANGE: f64 = 20.0;
const ROLL_RANGE: f64 = 10.0;
const SHIFT_RANGE: f64 = 0.8;
const EXTRACTOR_SEED: u64 = 0x5eed_face;
/// Narrowest slot, in pixels, that still resolves eyes and mouth.
pub const MIN_SLOT: usize = 12;

/// Number of values per parameter axis.
pub const GRID_LEN: usize = 5;

/// Values of each parameter axis, in the order of [`FaceParams::to_array`].
pub const GRID: [[f64; GRID_LEN]; 8] = [
    [0.0, 0.25, 0.5, 0.75, 1.0],
    [0.2, 0.4, 0.6, 0.8, 1.0],
    [-20.0, -10.0, 0.0, 10.0, 20.0],
    [-20.0, -10.0, 0.0, 10.0, 20.0],
    [-0.8, -0.4, 0.0, 0.4, 0.8],
    [-0.8, -0.4, 0.0, 0.4, 0.8],
    [-10.0, -5.0, 0.0, 5.0, 10.0],
    [-1.0, -0.5, 0.0, 0.5, 1.0],
];

/// Spacing of each grid axis.
pub fn grid_step(axis: usize) -> f64 {
    GRID[axis][1] - GRID[axis][0]
}

/// Per-frame face state of one character.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceParams {
    /// Mouth openness in `[0, 1]`.
    pub mouth: f64,
    /// Eye openness in `[0.2, 1]`; eyes never fully close.
    pub eye_open: f64,
    /// Gaze yaw in degrees.
    pub gaze_yaw: f64,
    /// Gaze pitch in degrees, positive looking up.
    pub gaze_pitch: f64,
    /// Head offset in base units.
    pub dx: f64,
    pub dy: f64,
    /// In-plane head rotation in degrees.
    pub roll: f64,
    /// Emotional valence in `[-1, 1]`; brightens or darkens the face.
    pub valence: f64,
}

impl FaceParams {
    pub fn to_array(&self) -> [f64; 8] {
        [
            self.mouth,
            self.eye_open,
            self.gaze_yaw,
            self.gaze_pitch,
            self.dx,
            self.dy,
            self.roll,
            self.valence,
        ]
    }

    pub fn from_array(a: [f64; 8]) -> Self {
        FaceParams {
            mouth: a[0],
            eye_open: a[1],
            gaze_yaw: a[2],
            gaze_pitch: a[3],
            dx: a[4],
            dy: a[5],
            roll: a[6],
            valence: a[7],
        }
    }

    pub fn from_indices(idx: [usize; 8]) -> Self {
        let mut a = [0.0; 8];
        for (axis, v) in a.iter_mut().enumerate() {
            *v = GRID[axis][idx[axis]];
        }
        Self::from_array(a)
    }

    /// The grid centre: neutral face.
    pub fn neutral() -> Self {
        Self::from_indices([GRID_LEN / 2; 8])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharacterTemplate {
    pub character_id: u32,
    pub slot_x0: usize,
    pub slot_width: usize,
    pub face_level: f64,
}

/// Everything about a scene except its per-frame parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneTemplate {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub background: f64,
    pub characters: Vec<CharacterTemplate>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub characters: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Trajectory amplitude in `[0, 1]`; 0 gives a static clip.
    pub amplitude: f64,
    pub frame_rate: f32,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            characters: 1,
            frames: 16,
            height: 32,
            width: 32,
            amplitude: 1.0,
            frame_rate: 25.0,
        }
    }
}

/// Ground truth of one character.
#[derive(Clone, Debug, PartialEq)]
pub struct CharacterTracks {
    pub character_id: u32,
    pub params: Vec<FaceParams>,
    pub expression: ImplicitExpressionTrack,
    pub masks: FaceMaskTrack,
    pub landmarks: LandmarkTrack,
    pub gaze: GazeTrack,
    pub pose: PoseTrack,
    pub expr: ExprFeatTrack,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    pub template: SceneTemplate,
    pub clip: VideoClip,
    pub characters: Vec<CharacterTracks>,
}

impl SyntheticScene {
    pub fn tracks(&self) -> Vec<ImplicitExpressionTrack> {
        self.characters
            .iter()
            .map(|c| c.expression.clone())
            .collect()
    }

    pub fn masks(&self) -> Vec<FaceMaskTrack> {
        self.characters.iter().map(|c| c.masks.clone()).collect()
    }

    pub fn params(&self) -> Vec<Vec<FaceParams>> {
        self.characters.iter().map(|c| c.params.clone()).collect()
    }
}

/// Placement of one face in one frame.
#[derive(Clone, Copy, Debug)]
struct Pose {
    cx: f64,
    cy: f64,
    cos: f64,
    sin: f64,
    scale: f64,
}

impl Pose {
    fn new(template: &SceneTemplate, ch: &CharacterTemplate, dx: f64, dy: f64, roll: f64) -> Self {
        let scale = slot_scale(template, ch);
        let r = roll.to_radians();
        Pose {
            cx: ch.slot_x0 as f64 + ch.slot_width as f64 / 2.0 + dx * scale,
            cy: template.height as f64 / 2.0 + dy * scale,
            cos: r.cos(),
            sin: r.sin(),
            scale,
        }
    }

    /// Face-local base-unit coordinates of pixel `(x, y)`'s centre.
    fn local(&self, x: usize, y: usize) -> (f64, f64) {
        let gx = x as f64 + 0.5 - self.cx;
        let gy = y as f64 + 0.5 - self.cy;
        (
            (self.cos * gx + self.sin * gy) / self.scale,
            (-self.sin * gx + self.cos * gy) / self.scale,
        )
    }

    /// Image-space normalized coordinates of a face-local point.
    fn to_image(&self, u: f64, w: f64, template: &SceneTemplate) -> [f64; 2] {
        let gx = (self.cos * u - self.sin * w) * self.scale + self.cx;
        let gy = (self.sin * u + self.cos * w) * self.scale + self.cy;
        [gx / template.width as f64, gy / template.height as f64]
    }
}

fn slot_scale(template: &SceneTemplate, ch: &CharacterTemplate) -> f64 {
    ch.slot_width.min(template.height) as f64 / 16.0
}

/// Soft coverage of an ellipse: 1 inside, 0 beyond half a pixel outside.
fn ellipse_cover(u: f64, w: f64, cu: f64, cw: f64, rx: f64, ry: f64, scale: f64) -> f64 {
    let (a, b) = ((u - cu) / rx, (w - cw) / ry);
    let r = (a * a + b * b).sqrt();
    let d = if r < 1e-12 {
        -rx.min(ry)
    } else {
        let grad = (a * a / (rx * rx) + b * b / (ry * ry)).sqrt() / r;
        (r - 1.0) / grad
    };
    (0.5 - d * scale).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Zone {
    Plain,
    Eye(usize),
    Mouth,
}

fn eye_centre(k: usize) -> (f64, f64) {
    (if k == 0 { -EYE_X } else { EYE_X }, EYE_Y)
}

fn zone_of(u: f64, w: f64) -> Zone {
    for k in 0..2 {
        let (eu, ew) = eye_centre(k);
        if (u - eu).abs() <= EYE_ZONE_HX && (w - ew).abs() <= EYE_ZONE_HY {
            return Zone::Eye(k);
        }
    }
    if u.abs() <= MOUTH_ZONE_HX && (w - MOUTH_Y).abs() <= MOUTH_ZONE_HY {
        return Zone::Mouth;
    }
    Zone::Plain
}

fn pupil_offset(yaw: f64, pitch: f64) -> (f64, f64) {
    (yaw / GAZE_RANGE * PUPIL_DX, -pitch / GAZE_RANGE * PUPIL_DY)
}

fn mouth_ry(m: f64) -> f64 {
    MOUTH_RY0 + MOUTH_RY1 * m
}

/// Sclera and pupil coverage of eye `k`.
fn eye_cover(u: f64, w: f64, k: usize, p: &FaceParams, scale: f64) -> (f64, f64) {
    let (eu, ew) = eye_centre(k);
    let ce = ellipse_cover(u, w, eu, ew, EYE_RX, EYE_RY * p.eye_open, scale);
    let (ox, oy) = pupil_offset(p.gaze_yaw, p.gaze_pitch);
    let cp = ellipse_cover(u, w, eu + ox, ew + oy, PUPIL_R, PUPIL_R, scale);
    (ce, cp)
}

fn mouth_cover(u: f64, w: f64, p: &FaceParams, scale: f64) -> f64 {
    ellipse_cover(u, w, 0.0, MOUTH_Y, MOUTH_RX, mouth_ry(p.mouth), scale)
}

fn face_level(ch: &CharacterTemplate, valence: f64) -> f64 {
    ch.face_level + VALENCE_GAIN * valence
}

fn blend_eye(base: f64, (ce, cp): (f64, f64)) -> f64 {
    let v = base + (SCLERA - base) * ce;
    v + (PUPIL - v) * cp
}

fn blend_mouth(base: f64, cm: f64) -> f64 {
    base + (MOUTH - base) * cm
}

fn base_value(bg: f64, level: f64, face_cov: f64) -> f64 {
    bg + (level - bg) * face_cov
}

/// Renders every character's per-frame parameters into a grayscale clip.
pub fn render(
    template: &SceneTemplate,
    params: &[Vec<FaceParams>],
    frame_rate: f32,
) -> Result<VideoClip> {
    check_template(template)?;
    if params.len() != template.characters.len() {
        return Err(Error::shape(format!(
            "{} parameter tracks for {} characters",
            params.len(),
            template.characters.len()
        )));
    }
    let (f, h, w) = (template.frames, template.height, template.width);
    if let Some(p) = params.iter().find(|p| p.len() != f) {
        return Err(Error::shape(format!(
            "parameter track has {} frames, expected {f}",
            p.len()
        )));
    }
    let mut data = vec![template.background as f32; f * h * w];
    for (ch, track) in template.characters.iter().zip(params) {
        for (fr, p) in track.iter().enumerate() {
            let pose = Pose::new(template, ch, p.dx, p.dy, p.roll);
            let level = face_level(ch, p.valence);
            for y in 0..h {
                for x in ch.slot_x0..ch.slot_x0 + ch.slot_width {
                    let (u, v) = pose.local(x, y);
                    let fc = ellipse_cover(u, v, 0.0, 0.0, FACE_RX, FACE_RY, pose.scale);
                    let base = base_value(template.background, level, fc);
                    let value = match zone_of(u, v) {
                        Zone::Plain => base,
                        Zone::Eye(k) => blend_eye(base, eye_cover(u, v, k, p, pose.scale)),
                        Zone::Mouth => blend_mouth(base, mouth_cover(u, v, p, pose.scale)),
                    };
                    data[(fr * h + y) * w + x] = value as f32;
                }
            }
        }
    }
    VideoClip::new(Tensor::new(vec![f, h, w, 1], data)?, frame_rate)
}

/// Largest image-space half extents of a face over all grid poses.
fn face_extent(scale: f64) -> (f64, f64) {
    let r = ROLL_RANGE.to_radians();
    let (c, s) = (r.cos(), r.sin());
    let hx = (FACE_RX * FACE_RX * c * c + FACE_RY * FACE_RY * s * s).sqrt();
    let hy = (FACE_RY * FACE_RY * c * c + FACE_RX * FACE_RX * s * s).sqrt();
    (
        (hx + SHIFT_RANGE) * scale + 0.5,
        (hy + SHIFT_RANGE) * scale + 0.5,
    )
}

fn check_template(t: &SceneTemplate) -> Result<()> {
    if t.frames == 0 || t.height == 0 || t.width == 0 || t.characters.is_empty() {
        return Err(Error::Placement(
            "scene needs frames, pixels and characters".into(),
        ));
    }
    for ch in &t.characters {
        if ch.slot_x0 + ch.slot_width > t.width {
            return Err(Error::Placement(format!(
                "character {} slot leaves the frame",
                ch.character_id
            )));
        }
        if ch.slot_width.min(t.height) < MIN_SLOT {
            return Err(Error::Placement(format!(
                "character {} slot of {}x{} is below {MIN_SLOT} pixels",
                ch.character_id, ch.slot_width, t.height
            )));
        }
        let (hx, hy) = face_extent(slot_scale(t, ch));
        if hx > ch.slot_width as f64 / 2.0 || hy > t.height as f64 / 2.0 {
            return Err(Error::Placement(format!(
                "a face of character {} does not fit a {}x{} slot",
                ch.character_id, ch.slot_width, t.height
            )));
        }
    }
    Ok(())
}

/// Band-limited trajectory in `[-1, 1]`: a random mix of slow sinusoids.
fn trajectory(r: &mut ChaCha8Rng, frames: usize) -> Vec<f64> {
    let comps: Vec<(f64, f64, f64)> = (0..3)
        .map(|k| {
            let freq = 0.5 * (k + 1) as f64;
            (
                r.random_range(-1.0..1.0),
                freq,
                r.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let norm: f64 = comps.iter().map(|c| c.0.abs()).sum::<f64>().max(1e-9);
    (0..frames)
        .map(|i| {
            let x = i as f64 / frames as f64;
            comps
                .iter()
                .map(|(a, f, ph)| a * (std::f64::consts::TAU * f * x + ph).sin())
                .sum::<f64>()
                / norm
        })
        .collect()
}

/// Grid index nearest to a trajectory value `v` in `[-1, 1]`.
fn quantize(v: f64, amplitude: f64) -> usize {
    let half = (GRID_LEN / 2) as f64;
    (half + (v * amplitude * half).round()).clamp(0.0, (GRID_LEN - 1) as f64) as usize
}

/// A seeded scene with smooth on-grid trajectories and all derived tracks.
pub fn generate_synthetic_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    if spec.characters == 0 {
        return Err(Error::Placement(
            "at least one character is required".into(),
        ));
    }
    if !(0.0..=1.0).contains(&spec.amplitude) {
        return Err(Error::Config("amplitude must lie in [0, 1]".into()));
    }
    let slot = spec.width / spec.characters;
    let mut r = rng(spec.seed, Stream::Scene, 0);
    let background = r.random_range(0.1..0.25);
    let characters: Vec<CharacterTemplate> = (0..spec.characters)
        .map(|i| CharacterTemplate {
            character_id: i as u32 + 1,
            slot_x0: i * slot,
            slot_width: slot,
            face_level: r.random_range(0.5..0.7),
        })
        .collect();
    let template = SceneTemplate {
        frames: spec.frames,
        height: spec.height,
        width: spec.width,
        background,
        characters,
    };
    check_template(&template)?;

    let mut params = Vec::with_capacity(spec.characters);
    for i in 0..spec.characters {
        let mut tr = rng(spec.seed, Stream::Scene, 1 + i as u64);
        let axes: Vec<Vec<f64>> = (0..8).map(|_| trajectory(&mut tr, spec.frames)).collect();
        let track: Vec<FaceParams> = (0..spec.frames)
            .map(|fr| {
                let mut idx = [0; 8];
                for (a, slot) in idx.iter_mut().enumerate() {
                    *slot = quantize(axes[a][fr], spec.amplitude);
                }
                FaceParams::from_indices(idx)
            })
            .collect();
        params.push(track);
    }
    let clip = render(&template, &params, spec.frame_rate)?;
    let characters = params
        .iter()
        .enumerate()
        .map(|(i, p)| character_tracks(&template, i, p))
        .collect::<Result<_>>()?;
    Ok(SyntheticScene {
        seed: spec.seed,
        template,
        clip,
        characters,
    })
}

fn projection(stream: u64, inputs: usize, outputs: usize) -> (Tensor<f64>, Tensor<f64>) {
    let mut r = rng(EXTRACTOR_SEED, Stream::Init, stream);
    (
        normal_tensor(&mut r, &[outputs, inputs], 1.5),
        normal_tensor(&mut r, &[outputs], 0.5),
    )
}

fn project(inputs: &[f64], (a, c): &(Tensor<f64>, Tensor<f64>)) -> Vec<f32> {
    let n = inputs.len();
    (0..c.len())
        .map(|o| {
            let s: f64 = (0..n).map(|i| a.data()[o * n + i] * inputs[i]).sum::<f64>() + c.data()[o];
            s.tanh() as f32
        })
        .collect()
}

/// The implicit features a fixed extractor assigns to a parameter track.
pub fn implicit_features(
    character_id: u32,
    params: &[FaceParams],
) -> Result<ImplicitExpressionTrack> {
    let d = FeatureDims::default();
    let maps = [
        projection(1, 1, d.lip),
        projection(2, 3, d.eye),
        projection(3, 3, d.head),
        projection(4, 1, d.emo),
    ];
    let mut streams: [Vec<f32>; 4] = Default::default();
    for p in params {
        let inputs: [Vec<f64>; 4] = [
            vec![p.mouth * 2.0 - 1.0],
            vec![
                (p.eye_open - 0.6) / 0.4,
                p.gaze_yaw / GAZE_RANGE,
                p.gaze_pitch / GAZE_RANGE,
            ],
            vec![p.dx / SHIFT_RANGE, p.dy / SHIFT_RANGE, p.roll / ROLL_RANGE],
            vec![p.valence],
        ];
        for k in 0..4 {
            streams[k].extend(project(&inputs[k], &maps[k]));
        }
    }
    let f = params.len();
    let [lip, eye, head, emo] = streams;
    ImplicitExpressionTrack::new(
        character_id,
        Tensor::new(vec![f, d.lip], lip)?,
        Tensor::new(vec![f, d.eye], eye)?,
        Tensor::new(vec![f, d.head], head)?,
        Tensor::new(vec![f, d.emo], emo)?,
    )
}

/// 16 landmarks: 8 on the outline, pupils, eye tops, mouth corners, and
/// mouth top and bottom.
pub fn landmarks(
    template: &SceneTemplate,
    ch: &CharacterTemplate,
    p: &FaceParams,
) -> Vec<[f64; 2]> {
    let pose = Pose::new(template, ch, p.dx, p.dy, p.roll);
    let mut pts = Vec::with_capacity(16);
    for k in 0..8 {
        let a = std::f64::consts::TAU * k as f64 / 8.0;
        pts.push(pose.to_image(FACE_RX * a.cos(), FACE_RY * a.sin(), template));
    }
    let (ox, oy) = pupil_offset(p.gaze_yaw, p.gaze_pitch);
    for k in 0..2 {
        let (eu, ew) = eye_centre(k);
        pts.push(pose.to_image(eu + ox, ew + oy, template));
    }
    for k in 0..2 {
        let (eu, ew) = eye_centre(k);
        pts.push(pose.to_image(eu, ew - EYE_RY * p.eye_open, template));
    }
    pts.push(pose.to_image(-MOUTH_RX, MOUTH_Y, template));
    pts.push(pose.to_image(MOUTH_RX, MOUTH_Y, template));
    let ry = mouth_ry(p.mouth);
    pts.push(pose.to_image(0.0, MOUTH_Y - ry, template));
    pts.push(pose.to_image(0.0, MOUTH_Y + ry, template));
    pts
}

/// Bounding box of the rendered face grown by one pixel, clipped to the slot.
fn face_mask(template: &SceneTemplate, ch: &CharacterTemplate, p: &FaceParams) -> Vec<f32> {
    let (h, w) = (template.height, template.width);
    let pose = Pose::new(template, ch, p.dx, p.dy, p.roll);
    let (mut x0, mut x1, mut y0, mut y1) = (usize::MAX, 0, usize::MAX, 0);
    for y in 0..h {
        for x in ch.slot_x0..ch.slot_x0 + ch.slot_width {
            let (u, v) = pose.local(x, y);
            if ellipse_cover(u, v, 0.0, 0.0, FACE_RX, FACE_RY, pose.scale) > 0.0 {
                (x0, x1, y0, y1) = (x0.min(x), x1.max(x), y0.min(y), y1.max(y));
            }
        }
    }
    let mut m = vec![0.0; h * w];
    if x0 == usize::MAX {
        return m;
    }
    let (x0, x1) = (
        x0.saturating_sub(1).max(ch.slot_x0),
        (x1 + 1).min(ch.slot_x0 + ch.slot_width - 1),
    );
    let (y0, y1) = (y0.saturating_sub(1), (y1 + 1).min(h - 1));
    for y in y0..=y1 {
        for x in x0..=x1 {
            m[y * w + x] = 1.0;
        }
    }
    m
}

/// All ground-truth tracks implied by a parameter track.
pub fn character_tracks(
    template: &SceneTemplate,
    index: usize,
    params: &[FaceParams],
) -> Result<CharacterTracks> {
    let ch = template
        .characters
        .get(index)
        .ok_or_else(|| Error::shape(format!("no character at index {index}")))?;
    let (h, w) = (template.height, template.width);
    let mask_data: Vec<f32> = params
        .iter()
        .flat_map(|p| face_mask(template, ch, p))
        .collect();
    Ok(CharacterTracks {
        character_id: ch.character_id,
        params: params.to_vec(),
        expression: implicit_features(ch.character_id, params)?,
        masks: FaceMaskTrack::new(
            ch.character_id,
            Tensor::new(vec![params.len(), h, w], mask_data)?,
        )?,
        landmarks: LandmarkTrack {
            points: params.iter().map(|p| landmarks(template, ch, p)).collect(),
        },
        gaze: gaze_track(params),
        pose: pose_track(params),
        expr: expr_track(params),
    })
}

pub fn gaze_track(params: &[FaceParams]) -> GazeTrack {
    GazeTrack {
        angles: params.iter().map(|p| [p.gaze_yaw, p.gaze_pitch]).collect(),
    }
}

pub fn pose_track(params: &[FaceParams]) -> PoseTrack {
    FeatureTrack {
        vectors: params.iter().map(|p| vec![p.dx, p.dy, p.roll]).collect(),
    }
}

pub fn expr_track(params: &[FaceParams]) -> ExprFeatTrack {
    FeatureTrack {
        vectors: params
            .iter()
            .map(|p| vec![p.mouth, p.eye_open, p.valence])
            .collect(),
    }
}

/// Squared error between a candidate value and an observed f32 pixel, after
/// rounding the candidate exactly as the renderer stores it.
fn sq_err(candidate: f64, observed: f32) -> f64 {
    let d = candidate as f32 as f64 - observed as f64;
    d * d
}

struct PixelGeom {
    index: usize,
    u: f64,
    w: f64,
    face_cov: f64,
}

/// Per-frame grid search over every character's parameters, minimizing
/// pixel squared error inside its slot. Ties go to the lowest grid index.
pub fn fit_scene_parameters(
    clip: &VideoClip,
    template: &SceneTemplate,
) -> Result<Vec<Vec<FaceParams>>> {
    check_template(template)?;
    let [f, h, w, c] = clip.dims()?;
    if [f, h, w] != [template.frames, template.height, template.width] {
        return Err(Error::shape(format!(
            "clip {f}x{h}x{w} does not match template {}x{}x{}",
            template.frames, template.height, template.width
        )));
    }
    let gray: Vec<Vec<f32>> = (0..f)
        .map(|i| {
            if c == 1 {
                Ok(clip.frames.data()[i * h * w..(i + 1) * h * w].to_vec())
            } else {
                Ok(clip.gray_frame(i)?.into_data())
            }
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(template.characters.len());
    for ch in &template.characters {
        let track = gray
            .iter()
            .map(|frame| fit_frame(frame, template, ch))
            .collect();
        out.push(track);
    }
    Ok(out)
}

fn eye_combos() -> Vec<[usize; 3]> {
    let mut v = Vec::with_capacity(GRID_LEN.pow(3));
    for b in 0..GRID_LEN {
        for yaw in 0..GRID_LEN {
            for pitch in 0..GRID_LEN {
                v.push([b, yaw, pitch]);
            }
        }
    }
    v
}

fn fit_frame(frame: &[f32], template: &SceneTemplate, ch: &CharacterTemplate) -> FaceParams {
    let (h, w) = (template.height, template.width);
    let bg = template.background;
    let eyes = eye_combos();
    let mut best: Option<(f64, FaceParams)> = None;
    let mut geom = Vec::with_capacity(h * ch.slot_width);
    for dxi in 0..GRID_LEN {
        for dyi in 0..GRID_LEN {
            for ri in 0..GRID_LEN {
                let pose = Pose::new(template, ch, GRID[4][dxi], GRID[5][dyi], GRID[6][ri]);
                geom.clear();
                let (mut plain, mut eye_px, mut mouth_px) = (Vec::new(), Vec::new(), Vec::new());
                for y in 0..h {
                    for x in ch.slot_x0..ch.slot_x0 + ch.slot_width {
                        let (u, v) = pose.local(x, y);
                        let face_cov = ellipse_cover(u, v, 0.0, 0.0, FACE_RX, FACE_RY, pose.scale);
                        let k = geom.len();
                        match zone_of(u, v) {
                            Zone::Plain => plain.push(k),
                            Zone::Eye(e) => eye_px.push((k, e)),
                            Zone::Mouth => mouth_px.push(k),
                        }
                        geom.push(PixelGeom {
                            index: y * w + x,
                            u,
                            w: v,
                            face_cov,
                        });
                    }
                }
                // Eye coverage per combo and eye pixel, independent of valence.
                let eye_cov: Vec<Vec<(f64, f64)>> = eyes
                    .iter()
                    .map(|&[b, yaw, pitch]| {
                        let p = FaceParams {
                            eye_open: GRID[1][b],
                            gaze_yaw: GRID[2][yaw],
                            gaze_pitch: GRID[3][pitch],
                            ..FaceParams::neutral()
                        };
                        eye_px
                            .iter()
                            .map(|&(k, e)| eye_cover(geom[k].u, geom[k].w, e, &p, pose.scale))
                            .collect()
                    })
                    .collect();
                let mouth_cov: Vec<Vec<f64>> = (0..GRID_LEN)
                    .map(|m| {
                        let p = FaceParams {
                            mouth: GRID[0][m],
                            ..FaceParams::neutral()
                        };
                        mouth_px
                            .iter()
                            .map(|&k| mouth_cover(geom[k].u, geom[k].w, &p, pose.scale))
                            .collect()
                    })
                    .collect();

                for vi in 0..GRID_LEN {
                    let level = face_level(ch, GRID[7][vi]);
                    let base = |k: usize| base_value(bg, level, geom[k].face_cov);
                    let mut total: f64 = plain
                        .iter()
                        .map(|&k| sq_err(base(k), frame[geom[k].index]))
                        .sum();
                    if best.is_some_and(|(b, _)| total > b) {
                        continue;
                    }
                    let mut eye_best = (f64::INFINITY, 0);
                    for (ci, covs) in eye_cov.iter().enumerate() {
                        let e: f64 = eye_px
                            .iter()
                            .zip(covs)
                            .map(|(&(k, _), &cv)| {
                                sq_err(blend_eye(base(k), cv), frame[geom[k].index])
                            })
                            .sum();
                        if e < eye_best.0 {
                            eye_best = (e, ci);
                        }
                    }
                    let mut mouth_best = (f64::INFINITY, 0);
                    for (mi, covs) in mouth_cov.iter().enumerate() {
                        let e: f64 = mouth_px
                            .iter()
                            .zip(covs)
                            .map(|(&k, &cv)| sq_err(blend_mouth(base(k), cv), frame[geom[k].index]))
                            .sum();
                        if e < mouth_best.0 {
                            mouth_best = (e, mi);
                        }
                    }
                    total += eye_best.0 + mouth_best.0;
                    if best.is_none_or(|(b, _)| total < b) {
                        let [b, yaw, pitch] = eyes[eye_best.1];
                        let p = FaceParams::from_indices([
                            mouth_best.1,
                            b,
                            yaw,
                            pitch,
                            dxi,
                            dyi,
                            ri,
                            vi,
                        ]);
                        best = Some((total, p));
                    }
                }
            }
        }
    }
    best.expect("grid is non-empty").1
}
