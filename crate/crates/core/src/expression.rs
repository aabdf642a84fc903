//! Implicit expression tracks and their conversion into motion-token
//! sequences for cross-attention conditioning.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::params::{Bound, Init, ParamSet};

/// Feature widths of the four implicit expression streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureDims {
    pub lip: usize,
    pub eye: usize,
    pub head: usize,
    pub emo: usize,
}

impl Default for FeatureDims {
    fn default() -> Self {
        FeatureDims {
            lip: 16,
            eye: 6,
            head: 6,
            emo: 16,
        }
    }
}

/// Per-frame implicit features of one character.
#[derive(Clone, Debug, PartialEq)]
pub struct ImplicitExpressionTrack {
    pub character_id: u32,
    pub e_lip: Tensor<f32>,
    pub e_eye: Tensor<f32>,
    pub e_head: Tensor<f32>,
    pub e_emo: Tensor<f32>,
}

impl ImplicitExpressionTrack {
    pub fn new(
        character_id: u32,
        e_lip: Tensor<f32>,
        e_eye: Tensor<f32>,
        e_head: Tensor<f32>,
        e_emo: Tensor<f32>,
    ) -> Result<Self> {
        let track = ImplicitExpressionTrack {
            character_id,
            e_lip,
            e_eye,
            e_head,
            e_emo,
        };
        track.validate()?;
        Ok(track)
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.frames();
        for (name, t) in self.streams() {
            if t.rank() != 2 {
                return Err(Error::shape(format!(
                    "{name} must be [frames, dim], got {:?}",
                    t.shape()
                )));
            }
            if t.shape()[0] != f {
                return Err(Error::shape(format!(
                    "{name} has {} frames, e_lip has {f}",
                    t.shape()[0]
                )));
            }
            if !t.is_finite() {
                return Err(Error::Evaluation(format!(
                    "{name} contains non-finite values"
                )));
            }
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.e_lip.shape().first().copied().unwrap_or(0)
    }

    pub fn dims(&self) -> FeatureDims {
        let d = |t: &Tensor<f32>| t.shape().get(1).copied().unwrap_or(0);
        FeatureDims {
            lip: d(&self.e_lip),
            eye: d(&self.e_eye),
            head: d(&self.e_head),
            emo: d(&self.e_emo),
        }
    }

    fn streams(&self) -> [(&'static str, &Tensor<f32>); 4] {
        [
            ("e_lip", &self.e_lip),
            ("e_eye", &self.e_eye),
            ("e_head", &self.e_head),
            ("e_emo", &self.e_emo),
        ]
    }

    pub(crate) fn expect_dims(&self, dims: &FeatureDims) -> Result<()> {
        self.validate()?;
        if self.dims() != *dims {
            return Err(Error::shape(format!(
                "track of character {} has feature dims {:?}, model expects {:?}",
                self.character_id,
                self.dims(),
                dims
            )));
        }
        Ok(())
    }
}

/// Stand-alone parameters of one expression-augment encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentParams<T = f32> {
    /// Learnable queries `[K, c]`.
    pub token_bank: Tensor<T>,
    /// Splits a feature row into `kv_tokens` tokens: `[d, kv_tokens * c]`.
    pub split: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub heads: usize,
}

impl<T: Scalar> AugmentParams<T> {
    /// Seeded random parameters for a `d`-dimensional feature.
    pub fn random(
        d: usize,
        tokens: usize,
        width: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut set = ParamSet::new();
        let mut init = Init { set: &mut set, rng };
        init_augment(&mut init, "", d, tokens, 4, width);
        Self::from_set(&set, "", heads).expect("freshly initialised")
    }

    pub(crate) fn from_set(set: &ParamSet<T>, prefix: &str, heads: usize) -> Result<Self> {
        let get = |n: &str| set.get(&format!("{prefix}{n}")).cloned();
        Ok(AugmentParams {
            token_bank: get("bank")?,
            split: get("split")?,
            wq: get("wq")?,
            wk: get("wk")?,
            wv: get("wv")?,
            wo: get("wo")?,
            heads,
        })
    }

    fn bind(&self, g: &mut Graph<T>) -> AugmentVars {
        AugmentVars {
            bank: g.constant(self.token_bank.clone()),
            split: g.constant(self.split.clone()),
            wq: g.constant(self.wq.clone()),
            wk: g.constant(self.wk.clone()),
            wv: g.constant(self.wv.clone()),
            wo: g.constant(self.wo.clone()),
            heads: self.heads,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AugmentVars {
    pub bank: Var,
    pub split: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub heads: usize,
}

impl AugmentVars {
    pub fn from_bound(b: &Bound, prefix: &str, heads: usize) -> Result<Self> {
        let get = |n: &str| b.get(&format!("{prefix}{n}"));
        Ok(AugmentVars {
            bank: get("bank")?,
            split: get("split")?,
            wq: get("wq")?,
            wk: get("wk")?,
            wv: get("wv")?,
            wo: get("wo")?,
            heads,
        })
    }
}

fn init_augment<T: Scalar>(
    init: &mut Init<'_, T>,
    prefix: &str,
    d: usize,
    tokens: usize,
    kv_tokens: usize,
    width: usize,
) {
    init.normal(format!("{prefix}bank"), &[tokens, width], 1.0);
    init.weight(format!("{prefix}split"), d, kv_tokens * width, 1.0);
    for w in ["wq", "wk", "wv", "wo"] {
        init.weight(format!("{prefix}{w}"), width, width, 1.0);
    }
}

/// `feat [f, d]` to `[f, K, c]`: the token bank attends to key/value tokens
/// split out of each frame's feature row.
pub(crate) fn augment_graph<T: Scalar>(
    g: &mut Graph<T>,
    p: &AugmentVars,
    feat: Var,
) -> Result<Var> {
    let fshape = g.shape(feat).to_vec();
    let (bshape, sshape) = (g.shape(p.bank).to_vec(), g.shape(p.split).to_vec());
    if fshape.len() != 2 || bshape.len() != 2 || sshape.len() != 2 || fshape[1] != sshape[0] {
        return Err(Error::shape(format!(
            "expression augment: feature {fshape:?}, split {sshape:?}, bank {bshape:?}"
        )));
    }
    let (f, width) = (fshape[0], bshape[1]);
    if sshape[1] % width != 0 || width % p.heads != 0 {
        return Err(Error::shape(format!(
            "expression augment: split width {} or heads {} incompatible with width {width}",
            sshape[1], p.heads
        )));
    }
    let kv = g.matmul(feat, p.split)?;
    let kv = g.reshape(kv, &[f, sshape[1] / width, width])?;
    let k = g.matmul(kv, p.wk)?;
    let v = g.matmul(kv, p.wv)?;
    let q = g.matmul(p.bank, p.wq)?;
    let q = g.tile(q, f)?;
    let a = g.attention(q, k, v, p.heads, None)?;
    let o = g.matmul(a, p.wo)?;
    let bank = g.tile(p.bank, f)?;
    g.add(o, bank)
}

/// Decomposes each frame's feature row into `K` sub-feature tokens.
pub fn expression_augment<T: Scalar>(
    feat: &Tensor<T>,
    params: &AugmentParams<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let x = g.constant(feat.clone());
    let out = augment_graph(&mut g, &vars, x)?;
    Ok(g.value(out).clone())
}

/// Shape of the motion encoder.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpressionConfig {
    pub dims: FeatureDims,
    /// Motion token width `c`.
    pub width: usize,
    /// Learnable tokens per augmented stream (`K_emo = K_lip`).
    pub tokens: usize,
    pub kv_tokens: usize,
    pub heads: usize,
    pub use_eal: bool,
}

impl Default for ExpressionConfig {
    fn default() -> Self {
        ExpressionConfig {
            dims: FeatureDims::default(),
            width: 64,
            tokens: 8,
            kv_tokens: 4,
            heads: 4,
            use_eal: true,
        }
    }
}

impl ExpressionConfig {
    /// Motion tokens per character per frame (`l`).
    pub fn tokens_per_character(&self) -> usize {
        if self.use_eal {
            2 * self.tokens + 2
        } else {
            4
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims;
        if self.width == 0 || self.tokens == 0 || self.kv_tokens == 0 || self.heads == 0 {
            return Err(Error::Config("expression sizes must be positive".into()));
        }
        if d.lip == 0 || d.eye == 0 || d.head == 0 || d.emo == 0 {
            return Err(Error::Config("feature dims must be positive".into()));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "motion width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    pub(crate) fn init_params<T: Scalar>(&self, init: &mut Init<'_, T>) {
        let (d, c) = (self.dims, self.width);
        if self.use_eal {
            init_augment(init, "expr.emo.", d.emo, self.tokens, self.kv_tokens, c);
            init_augment(init, "expr.lip.", d.lip, self.tokens, self.kv_tokens, c);
        } else {
            init.weight("expr.emo_w".into(), d.emo, c, 1.0);
            init.zeros("expr.emo_b".into(), &[c]);
            init.weight("expr.lip_w".into(), d.lip, c, 1.0);
            init.zeros("expr.lip_b".into(), &[c]);
        }
        init.weight("expr.head_w".into(), d.head, c, 1.0);
        init.zeros("expr.head_b".into(), &[c]);
        init.weight("expr.eye_w".into(), d.eye, c, 1.0);
        init.zeros("expr.eye_b".into(), &[c]);
        init.normal("expr.null".into(), &[self.tokens_per_character(), c], 1.0);
    }
}

/// Motion tokens of one character, `[f, l, c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionEmbedding<T = f32> {
    pub tokens: Tensor<T>,
    pub character_id: u32,
}

/// Motion tokens of `N` characters concatenated along the token axis.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiMotionEmbedding<T = f32> {
    /// `[f, N * l, c]`.
    pub tokens: Tensor<T>,
    /// Character of each of the `N * l` per-frame key positions.
    pub char_of_key: Vec<u32>,
}

impl<T: Scalar> MultiMotionEmbedding<T> {
    pub fn frames(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn keys_per_frame(&self) -> usize {
        self.tokens.shape()[1]
    }

    /// Character and frame of every flattened key `frame * (N * l) + j`.
    pub fn key_layout(&self) -> (Vec<u32>, Vec<usize>) {
        key_layout(&self.char_of_key, self.frames())
    }
}

pub(crate) fn key_layout(char_of_key: &[u32], frames: usize) -> (Vec<u32>, Vec<usize>) {
    let n = char_of_key.len();
    let chars = (0..frames)
        .flat_map(|_| char_of_key.iter().copied())
        .collect();
    let frame = (0..frames)
        .flat_map(|fr| std::iter::repeat_n(fr, n))
        .collect();
    (chars, frame)
}

fn track_var<T: Scalar>(g: &mut Graph<T>, t: &Tensor<f32>) -> Var {
    g.constant(t.cast())
}

/// `[f, l, c]` motion tokens of `track` inside `g`, ordered
/// `[emo tokens | lip tokens | head | eye]`.
pub(crate) fn motion_tokens_graph<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound,
    cfg: &ExpressionConfig,
    track: &ImplicitExpressionTrack,
) -> Result<Var> {
    track.expect_dims(&cfg.dims)?;
    let f = track.frames();
    let c = cfg.width;
    let project = |g: &mut Graph<T>, feat: &Tensor<f32>, w: &str, bias: &str| -> Result<Var> {
        let x = track_var(g, feat);
        let y = g.linear(x, b.get(w)?, Some(b.get(bias)?))?;
        g.reshape(y, &[f, 1, c])
    };
    let (emo, lip) = if cfg.use_eal {
        let emo_p = AugmentVars::from_bound(b, "expr.emo.", cfg.heads)?;
        let lip_p = AugmentVars::from_bound(b, "expr.lip.", cfg.heads)?;
        let x = track_var(g, &track.e_emo);
        let emo = augment_graph(g, &emo_p, x)?;
        let x = track_var(g, &track.e_lip);
        let lip = augment_graph(g, &lip_p, x)?;
        (emo, lip)
    } else {
        (
            project(g, &track.e_emo, "expr.emo_w", "expr.emo_b")?,
            project(g, &track.e_lip, "expr.lip_w", "expr.lip_b")?,
        )
    };
    let head = project(g, &track.e_head, "expr.head_w", "expr.head_b")?;
    let eye = project(g, &track.e_eye, "expr.eye_w", "expr.eye_b")?;
    g.concat(&[emo, lip, head, eye], 1)
}

fn check_distinct(ids: impl IntoIterator<Item = u32>) -> Result<()> {
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::DuplicateIdentity(id));
        }
    }
    Ok(())
}

/// Concatenated `[f, N * l, c]` motion tokens of several tracks inside `g`.
pub(crate) fn multi_motion_graph<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound,
    cfg: &ExpressionConfig,
    tracks: &[ImplicitExpressionTrack],
) -> Result<(Var, Vec<u32>)> {
    if tracks.is_empty() {
        return Err(Error::shape("at least one character track is required"));
    }
    check_distinct(tracks.iter().map(|t| t.character_id))?;
    let f = tracks[0].frames();
    if let Some(t) = tracks.iter().find(|t| t.frames() != f) {
        return Err(Error::shape(format!(
            "character {} has {} frames, expected {f}",
            t.character_id,
            t.frames()
        )));
    }
    let l = cfg.tokens_per_character();
    let mut vars = Vec::with_capacity(tracks.len());
    let mut char_of_key = Vec::with_capacity(tracks.len() * l);
    for t in tracks {
        vars.push(motion_tokens_graph(g, b, cfg, t)?);
        char_of_key.extend(std::iter::repeat_n(t.character_id, l));
    }
    let tokens = if vars.len() == 1 {
        vars[0]
    } else {
        g.concat(&vars, 1)?
    };
    Ok((tokens, char_of_key))
}

/// The learned null condition tiled to `[frames, characters * l, c]`.
pub(crate) fn null_tokens_graph<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound,
    frames: usize,
    characters: usize,
) -> Result<Var> {
    let null = b.get("expr.null")?;
    let per_frame = if characters == 1 {
        null
    } else {
        let blocks = vec![null; characters];
        g.concat(&blocks, 0)?
    };
    g.tile(per_frame, frames)
}

/// Motion embedding of one track under the encoder parameters in `params`.
pub fn build_motion_embedding<T: Scalar>(
    track: &ImplicitExpressionTrack,
    params: &ParamSet<T>,
    cfg: &ExpressionConfig,
) -> Result<MotionEmbedding<T>> {
    if track.frames() == 0 {
        return Err(Error::EmptyTrack {
            character_id: track.character_id,
        });
    }
    let mut g = Graph::new();
    let b = params.bind(&mut g, false);
    let v = motion_tokens_graph(&mut g, &b, cfg, track)?;
    Ok(MotionEmbedding {
        tokens: g.value(v).clone(),
        character_id: track.character_id,
    })
}

/// Concatenates per-character embeddings along the token axis, in order.
pub fn concat_multi_portrait<T: Scalar>(
    embeddings: &[MotionEmbedding<T>],
) -> Result<MultiMotionEmbedding<T>> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::shape("at least one motion embedding is required"))?;
    let s = first.tokens.shape().to_vec();
    if s.len() != 3 {
        return Err(Error::shape(format!(
            "motion embedding must be [f, l, c], got {s:?}"
        )));
    }
    if let Some(e) = embeddings.iter().find(|e| e.tokens.shape() != s.as_slice()) {
        return Err(Error::shape(format!(
            "character {} embedding {:?} differs from {s:?}",
            e.character_id,
            e.tokens.shape()
        )));
    }
    check_distinct(embeddings.iter().map(|e| e.character_id))?;
    let (f, l, c) = (s[0], s[1], s[2]);
    let n = embeddings.len();
    let mut data = Vec::with_capacity(f * n * l * c);
    for fr in 0..f {
        for e in embeddings {
            data.extend_from_slice(&e.tokens.data()[fr * l * c..(fr + 1) * l * c]);
        }
    }
    let char_of_key = embeddings
        .iter()
        .flat_map(|e| std::iter::repeat_n(e.character_id, l))
        .collect();
    Ok(MultiMotionEmbedding {
        tokens: Tensor::new(vec![f, n * l, c], data)?,
        char_of_key,
    })
}

/// One Bernoulli(p) draw deciding whether a training sample loses its condition.
pub fn drop_condition(p: f64, rng: &mut impl Rng) -> bool {
    rng.random::<f64>() < p
}

/// With probability `p`, replaces the whole condition by `null` (`[l, c]`)
/// tiled over frames and characters.
pub fn apply_condition_dropout<T: Scalar>(
    em: MultiMotionEmbedding<T>,
    null: &Tensor<T>,
    p: f64,
    rng: &mut impl Rng,
) -> Result<MultiMotionEmbedding<T>> {
    let s = em.tokens.shape().to_vec();
    let ns = null.shape();
    if ns.len() != 2 || ns[1] != s[2] || !s[1].is_multiple_of(ns[0]) {
        return Err(Error::shape(format!(
            "null tokens {ns:?} do not tile embedding {s:?}"
        )));
    }
    if !drop_condition(p, rng) {
        return Ok(em);
    }
    let per_frame = s[1] * s[2];
    let tokens = Tensor::from_fn(&s, |i| null.data()[(i % per_frame) % null.len()]);
    Ok(MultiMotionEmbedding {
        tokens,
        char_of_key: em.char_of_key,
    })
}

/// One character's features in a track file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharacterFeatures {
    pub character_id: u32,
    pub e_lip: Vec<Vec<f32>>,
    pub e_eye: Vec<Vec<f32>>,
    pub e_head: Vec<Vec<f32>>,
    pub e_emo: Vec<Vec<f32>>,
}

/// One line of a track file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub clip_id: String,
    pub fps: f32,
    pub characters: Vec<CharacterFeatures>,
}

fn rows_to_tensor(id: u32, name: &str, rows: &[Vec<f32>]) -> Result<Tensor<f32>> {
    let width = rows.first().map(Vec::len).unwrap_or(0);
    if rows.is_empty() || width == 0 {
        return Err(Error::EmptyTrack { character_id: id });
    }
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::shape(format!("character {id}: ragged {name} rows")));
    }
    Tensor::new(vec![rows.len(), width], rows.concat())
}

fn tensor_to_rows(t: &Tensor<f32>) -> Vec<Vec<f32>> {
    let w = t.shape()[1];
    t.data().chunks(w).map(<[f32]>::to_vec).collect()
}

impl CharacterFeatures {
    pub fn to_track(&self) -> Result<ImplicitExpressionTrack> {
        let id = self.character_id;
        ImplicitExpressionTrack::new(
            id,
            rows_to_tensor(id, "e_lip", &self.e_lip)?,
            rows_to_tensor(id, "e_eye", &self.e_eye)?,
            rows_to_tensor(id, "e_head", &self.e_head)?,
            rows_to_tensor(id, "e_emo", &self.e_emo)?,
        )
    }

    pub fn from_track(t: &ImplicitExpressionTrack) -> Self {
        CharacterFeatures {
            character_id: t.character_id,
            e_lip: tensor_to_rows(&t.e_lip),
            e_eye: tensor_to_rows(&t.e_eye),
            e_head: tensor_to_rows(&t.e_head),
            e_emo: tensor_to_rows(&t.e_emo),
        }
    }
}

impl TrackRecord {
    pub fn tracks(&self) -> Result<Vec<ImplicitExpressionTrack>> {
        self.characters
            .iter()
            .map(CharacterFeatures::to_track)
            .collect()
    }
}

pub fn read_track_file(path: &Path) -> Result<Vec<TrackRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn write_track_file(path: &Path, records: &[TrackRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}
