//! FPCK1 checkpoints: run config, step, seed, and every parameter and Adam
//! moment as a named little-endian f32 array.
//!
//! Layout, all integers little-endian:
//! `"FPCK1\n"`, u32 config length, config text, u64 step, u64 seed,
//! u32 array count, then per array in name order: u32 name length, name,
//! u32 rank, u64 per dimension, f32 values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::flow::TrainState;
use crate::generator::Denoiser;
use crate::numerics::Tensor;
use crate::params::ParamSet;

pub const MAGIC: &[u8] = b"FPCK1\n";
const PREFIXES: [&str; 3] = ["param/", "adam_m/", "adam_v/"];

/// Serializes `state` under `cfg`, whose model section must match the state.
/// The data and output paths are stored as their defaults.
pub fn checkpoint_bytes(state: &TrainState, cfg: &RunConfig) -> Result<Vec<u8>> {
    if cfg.model != *state.model.config() || cfg.seed != state.seed {
        return Err(Error::Config(
            "checkpoint config does not describe the training state".into(),
        ));
    }
    let mut arrays: BTreeMap<String, &Tensor<f32>> = BTreeMap::new();
    for (prefix, set) in PREFIXES
        .iter()
        .zip([state.model.params(), &state.adam_m, &state.adam_v])
    {
        for (name, t) in set.iter() {
            arrays.insert(format!("{prefix}{name}"), t);
        }
    }
    let defaults = RunConfig::default();
    let text = RunConfig {
        data_dir: defaults.data_dir,
        out: defaults.out,
        ..cfg.clone()
    }
    .to_text();
    let mut out = Vec::with_capacity(64 + 4 * 3 * state.model.params().numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&state.step.to_le_bytes());
    out.extend_from_slice(&state.seed.to_le_bytes());
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, t) in arrays {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(state: &TrainState, cfg: &RunConfig, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(state, cfg)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptCheckpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn text(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?)
            .map_err(|_| Error::CorruptCheckpoint("text is not UTF-8".into()))
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(TrainState, RunConfig)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(MAGIC) {
        return Err(Error::CorruptCheckpoint("bad magic or version".into()));
    }
    let n = r.u32()? as usize;
    let cfg = RunConfig::parse(r.text(n)?)
        .map_err(|e| Error::CorruptCheckpoint(format!("config block: {e}")))?;
    let step = r.u64()?;
    let seed = r.u64()?;
    let count = r.u32()? as usize;
    let mut arrays: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = r.text(n)?.to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|l| l.checked_mul(4))
            .ok_or_else(|| Error::CorruptCheckpoint(format!("array `{name}` is too large")))?;
        let data = r
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        if arrays.insert(name.clone(), t).is_some() {
            return Err(Error::CorruptCheckpoint(format!(
                "duplicate array `{name}`"
            )));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    if seed != cfg.seed {
        return Err(Error::CorruptCheckpoint(
            "seed disagrees with the config block".into(),
        ));
    }

    // The freshly initialized model gives the expected names and shapes.
    let template = Denoiser::<f32>::new(cfg.model, 0)?;
    let mut sets: [ParamSet<f32>; 3] = Default::default();
    for (prefix, set) in PREFIXES.iter().zip(sets.iter_mut()) {
        for (name, t) in template.params().iter() {
            let key = format!("{prefix}{name}");
            let a = arrays
                .remove(&key)
                .ok_or_else(|| Error::IncompleteCheckpoint(key.clone()))?;
            if a.shape() != t.shape() {
                return Err(Error::CorruptCheckpoint(format!(
                    "array `{key}` has shape {:?}, expected {:?}",
                    a.shape(),
                    t.shape()
                )));
            }
            set.insert(name.clone(), a);
        }
    }
    if let Some(extra) = arrays.keys().next() {
        return Err(Error::CorruptCheckpoint(format!(
            "unexpected array `{extra}`"
        )));
    }
    let [params, m, v] = sets;
    let model = Denoiser::from_params(cfg.model, params)?;
    let state = TrainState::from_parts(model, m, v, step, seed)?;
    Ok((state, cfg))
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainState, RunConfig)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}
