//! Flat `key = value` run configuration.
//!
//! Every key has a default; unknown keys are rejected. Blank lines and lines
//! starting with `#` are ignored. [`RunConfig::to_text`] writes every key, so
//! a written file documents the full run.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::curation::CurationConfig;
use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::generator::DenoiserConfig;

/// Every accepted key with a short description, in file order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "root seed for every random stream"),
    ("model.layers", "transformer blocks"),
    ("model.width", "token width"),
    ("model.heads", "attention heads"),
    ("model.patch", "spatial patch edge in latent cells"),
    ("model.latent_channels", "latent channels"),
    ("model.max_frames", "frame position table rows"),
    ("model.max_grid", "row and column position table rows"),
    (
        "model.use_mca",
        "restrict motion keys to each character's face region",
    ),
    ("model.context_dim", "context token width, 0 disables"),
    ("expr.lip_dim", "lip feature width"),
    ("expr.eye_dim", "eye feature width"),
    ("expr.head_dim", "head feature width"),
    ("expr.emo_dim", "emotion feature width"),
    ("expr.width", "motion token width"),
    ("expr.tokens", "learnable tokens per augmented stream"),
    ("expr.kv_tokens", "key/value tokens split from each feature"),
    ("expr.heads", "augmentation attention heads"),
    (
        "expr.use_eal",
        "expression-augmented tokens for lip and emotion",
    ),
    ("flow.steps", "sampling steps"),
    ("flow.cfg_scale", "guidance scale for expressions"),
    ("flow.t_mu", "logit-normal timestep mean"),
    ("flow.t_sigma", "logit-normal timestep spread"),
    ("flow.lr", "Adam learning rate"),
    (
        "flow.dropout_p",
        "condition and reference dropout probability",
    ),
    ("train.steps", "optimizer steps"),
    ("train.batch", "clips per optimizer step"),
    (
        "train.log_every",
        "steps between loss log lines, 0 disables",
    ),
    ("train.data", "directory of synthetic scenes"),
    ("train.out", "checkpoint path"),
    ("curate.min_persons", "minimum persons in every frame"),
    ("curate.blur_threshold", "minimum Laplacian variance"),
    ("curate.motion_threshold", "minimum landmark motion score"),
    (
        "curate.angle_threshold",
        "minimum eye-line angle spread in degrees",
    ),
    ("curate.eye_a", "first eye-line landmark"),
    ("curate.eye_b", "second eye-line landmark"),
    ("curate.blur_samples", "frames sampled for the blur score"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: DenoiserConfig,
    pub flow: FlowConfig,
    pub train_steps: u64,
    pub batch: usize,
    pub log_every: u64,
    pub data_dir: String,
    pub out: String,
    pub curation: CurationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: DenoiserConfig::default(),
            flow: FlowConfig::default(),
            train_steps: 2000,
            batch: 4,
            log_every: 100,
            data_dir: "data".into(),
            out: "checkpoint.fpck".into(),
            curation: CurationConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{value}`: {e}")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        let m = &mut self.model;
        let f = &mut self.flow;
        let c = &mut self.curation;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "model.layers" => m.layers = parse(key, v)?,
            "model.width" => m.width = parse(key, v)?,
            "model.heads" => m.heads = parse(key, v)?,
            "model.patch" => m.patch = parse(key, v)?,
            "model.latent_channels" => m.latent_channels = parse(key, v)?,
            "model.max_frames" => m.max_frames = parse(key, v)?,
            "model.max_grid" => m.max_grid = parse(key, v)?,
            "model.use_mca" => m.use_mca = parse(key, v)?,
            "model.context_dim" => m.context_dim = parse(key, v)?,
            "expr.lip_dim" => m.expression.dims.lip = parse(key, v)?,
            "expr.eye_dim" => m.expression.dims.eye = parse(key, v)?,
            "expr.head_dim" => m.expression.dims.head = parse(key, v)?,
            "expr.emo_dim" => m.expression.dims.emo = parse(key, v)?,
            "expr.width" => m.expression.width = parse(key, v)?,
            "expr.tokens" => m.expression.tokens = parse(key, v)?,
            "expr.kv_tokens" => m.expression.kv_tokens = parse(key, v)?,
            "expr.heads" => m.expression.heads = parse(key, v)?,
            "expr.use_eal" => m.expression.use_eal = parse(key, v)?,
            "flow.steps" => f.steps = parse(key, v)?,
            "flow.cfg_scale" => f.cfg_scale = parse(key, v)?,
            "flow.t_mu" => f.t_mu = parse(key, v)?,
            "flow.t_sigma" => f.t_sigma = parse(key, v)?,
            "flow.lr" => f.lr = parse(key, v)?,
            "flow.dropout_p" => f.dropout_p = parse(key, v)?,
            "train.steps" => self.train_steps = parse(key, v)?,
            "train.batch" => self.batch = parse(key, v)?,
            "train.log_every" => self.log_every = parse(key, v)?,
            "train.data" => self.data_dir = v.to_string(),
            "train.out" => self.out = v.to_string(),
            "curate.min_persons" => c.min_persons = parse(key, v)?,
            "curate.blur_threshold" => c.blur_threshold = parse(key, v)?,
            "curate.motion_threshold" => c.motion_threshold = parse(key, v)?,
            "curate.angle_threshold" => c.angle_threshold = parse(key, v)?,
            "curate.eye_a" => c.eye_pair.0 = parse(key, v)?,
            "curate.eye_b" => c.eye_pair.1 = parse(key, v)?,
            "curate.blur_samples" => c.blur_samples = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let (m, e, f, c) = (
            &self.model,
            &self.model.expression,
            &self.flow,
            &self.curation,
        );
        match key {
            "seed" => self.seed.to_string(),
            "model.layers" => m.layers.to_string(),
            "model.width" => m.width.to_string(),
            "model.heads" => m.heads.to_string(),
            "model.patch" => m.patch.to_string(),
            "model.latent_channels" => m.latent_channels.to_string(),
            "model.max_frames" => m.max_frames.to_string(),
            "model.max_grid" => m.max_grid.to_string(),
            "model.use_mca" => m.use_mca.to_string(),
            "model.context_dim" => m.context_dim.to_string(),
            "expr.lip_dim" => e.dims.lip.to_string(),
            "expr.eye_dim" => e.dims.eye.to_string(),
            "expr.head_dim" => e.dims.head.to_string(),
            "expr.emo_dim" => e.dims.emo.to_string(),
            "expr.width" => e.width.to_string(),
            "expr.tokens" => e.tokens.to_string(),
            "expr.kv_tokens" => e.kv_tokens.to_string(),
            "expr.heads" => e.heads.to_string(),
            "expr.use_eal" => e.use_eal.to_string(),
            "flow.steps" => f.steps.to_string(),
            "flow.cfg_scale" => f.cfg_scale.to_string(),
            "flow.t_mu" => f.t_mu.to_string(),
            "flow.t_sigma" => f.t_sigma.to_string(),
            "flow.lr" => f.lr.to_string(),
            "flow.dropout_p" => f.dropout_p.to_string(),
            "train.steps" => self.train_steps.to_string(),
            "train.batch" => self.batch.to_string(),
            "train.log_every" => self.log_every.to_string(),
            "train.data" => self.data_dir.clone(),
            "train.out" => self.out.clone(),
            "curate.min_persons" => c.min_persons.to_string(),
            "curate.blur_threshold" => c.blur_threshold.to_string(),
            "curate.motion_threshold" => c.motion_threshold.to_string(),
            "curate.angle_threshold" => c.angle_threshold.to_string(),
            "curate.eye_a" => c.eye_pair.0.to_string(),
            "curate.eye_b" => c.eye_pair.1.to_string(),
            "curate.blur_samples" => c.blur_samples.to_string(),
            _ => unreachable!("KEYS and get disagree on `{key}`"),
        }
    }

    /// Defaults overridden by the assignments in `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.flow.validate()?;
        if self.batch == 0 {
            return Err(Error::Config("train.batch must be positive".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|(k, _)| format!("{k} = {}\n", self.get(k)))
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}
