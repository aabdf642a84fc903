//! Exact invertible latent codec: a factor-2 spatial space-to-depth fold with
//! the affine value map `v ↦ 2v − 1`. Temporal extent is preserved.
//!
//! Also hosts the `FPVC` clip container:
//!
//! ```text
//! "FPVC" | u32 frames | u32 height | u32 width | u32 channels | f32 × (f·H·W·ch)
//! ```
//!
//! All integers and floats are little-endian; samples are row-major
//! `[frame][y][x][channel]`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FOLD: usize = 2;
const CLIP_MAGIC: &[u8; 4] = b"FPVC";

/// A pixel-space clip `[f, H, W, ch]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: Tensor<f32>,
    pub frame_rate: f32,
}

/// A latent clip `[f, H/2, W/2, 4·ch]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentClip {
    pub tokens: Tensor<f32>,
}

impl VideoClip {
    pub fn new(frames: Tensor<f32>, frame_rate: f32) -> Result<Self> {
        let clip = VideoClip { frames, frame_rate };
        clip.validate()?;
        Ok(clip)
    }

    pub fn validate(&self) -> Result<()> {
        let [_, h, w, ch] = self.dims()?;
        if h % FOLD != 0 || w % FOLD != 0 {
            return Err(Error::shape(format!(
                "clip spatial dims {h}x{w} must be even"
            )));
        }
        if ch != 1 && ch != 3 {
            return Err(Error::shape(format!("clip has {ch} channels, need 1 or 3")));
        }
        Ok(())
    }

    pub fn dims(&self) -> Result<[usize; 4]> {
        match *self.frames.shape() {
            [f, h, w, c] => Ok([f, h, w, c]),
            ref s => Err(Error::shape(format!("clip must be rank 4, got {s:?}"))),
        }
    }

    pub fn frame_count(&self) -> usize {
        self.frames.shape()[0]
    }

    /// Single-frame clip holding frame `index`.
    pub fn frame(&self, index: usize) -> Result<VideoClip> {
        let [f, h, w, c] = self.dims()?;
        if index >= f {
            return Err(Error::shape(format!("frame {index} of {f}")));
        }
        let n = h * w * c;
        let data = self.frames.data()[index * n..(index + 1) * n].to_vec();
        Ok(VideoClip {
            frames: Tensor::new(vec![1, h, w, c], data)?,
            frame_rate: self.frame_rate,
        })
    }

    /// Grayscale `[H, W]` view of one frame (channel mean for colour clips).
    pub fn gray_frame(&self, index: usize) -> Result<Tensor<f32>> {
        let [f, h, w, c] = self.dims()?;
        if index >= f {
            return Err(Error::shape(format!("frame {index} of {f}")));
        }
        let base = index * h * w * c;
        let src = self.frames.data();
        Ok(Tensor::from_fn(&[h, w], |i| {
            let px = &src[base + i * c..base + (i + 1) * c];
            px.iter().sum::<f32>() / c as f32
        }))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let [f, h, w, c] = self.dims()?;
        let mut buf = Vec::with_capacity(20 + 4 * self.frames.len());
        buf.extend_from_slice(CLIP_MAGIC);
        for d in [f, h, w, c] {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in self.frames.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    /// Reads an `FPVC` file. The container carries no frame rate; it is set to `frame_rate`.
    pub fn read(path: &Path, frame_rate: f32) -> Result<VideoClip> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, frame_rate)
    }

    pub fn from_bytes(bytes: &[u8], frame_rate: f32) -> Result<VideoClip> {
        if bytes.len() < 20 || &bytes[..4] != CLIP_MAGIC {
            return Err(Error::CorruptClip("missing FPVC header".into()));
        }
        let word = |i: usize| {
            u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize
        };
        let dims = [word(0), word(1), word(2), word(3)];
        let n: usize = dims.iter().product();
        if bytes.len() != 20 + 4 * n {
            return Err(Error::CorruptClip(format!(
                "expected {} payload bytes, found {}",
                4 * n,
                bytes.len() - 20
            )));
        }
        let data = bytes[20..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let frames =
            Tensor::new(dims.to_vec(), data).map_err(|e| Error::CorruptClip(e.to_string()))?;
        VideoClip::new(frames, frame_rate)
    }
}

impl LatentClip {
    pub fn dims(&self) -> Result<[usize; 4]> {
        match *self.tokens.shape() {
            [f, h, w, c] => Ok([f, h, w, c]),
            ref s => Err(Error::shape(format!("latent must be rank 4, got {s:?}"))),
        }
    }
}

/// Latent dims `[f, h, w, c_lat]` for a clip of dims `[f, H, W, ch]`.
pub fn latent_dims(clip_dims: [usize; 4]) -> [usize; 4] {
    let [f, h, w, c] = clip_dims;
    [f, h / FOLD, w / FOLD, c * FOLD * FOLD]
}

/// Folds each 2×2 pixel block into the channel axis, ordered
/// `(dy, dx, channel)`, and maps values through `v ↦ 2v − 1`.
///
/// The round trip through [`decode`] is bit-exact for intensities that are
/// multiples of 2⁻²⁴ (every 8/16/24-bit source and every uniform `f32` draw);
/// smaller arbitrary `f32` fractions cannot survive an `f32` affine map.
pub fn encode(clip: &VideoClip) -> Result<LatentClip> {
    clip.validate()?;
    let [f, hh, ww, ch] = clip.dims()?;
    let [_, h, w, cl] = latent_dims([f, hh, ww, ch]);
    let src = clip.frames.data();
    let mut out = Vec::with_capacity(src.len());
    for t in 0..f {
        for y in 0..h {
            for x in 0..w {
                for dy in 0..FOLD {
                    for dx in 0..FOLD {
                        let base = ((t * hh + y * FOLD + dy) * ww + x * FOLD + dx) * ch;
                        out.extend(src[base..base + ch].iter().map(|&v| 2.0 * v - 1.0));
                    }
                }
            }
        }
    }
    Ok(LatentClip {
        tokens: Tensor::new(vec![f, h, w, cl], out)?,
    })
}

/// Exact inverse of [`encode`]. Decoded values are clamped to `[0, 1]`; a
/// latent produced by `encode` never triggers the clamp.
pub fn decode(lat: &LatentClip, frame_rate: f32) -> Result<VideoClip> {
    let [f, h, w, cl] = lat.dims()?;
    if cl % (FOLD * FOLD) != 0 {
        return Err(Error::shape(format!(
            "latent channel count {cl} not divisible by {}",
            FOLD * FOLD
        )));
    }
    let ch = cl / (FOLD * FOLD);
    let (hh, ww) = (h * FOLD, w * FOLD);
    let src = lat.tokens.data();
    let mut out = vec![0.0f32; f * hh * ww * ch];
    let mut i = 0;
    for t in 0..f {
        for y in 0..h {
            for x in 0..w {
                for dy in 0..FOLD {
                    for dx in 0..FOLD {
                        let base = ((t * hh + y * FOLD + dy) * ww + x * FOLD + dx) * ch;
                        for c in 0..ch {
                            out[base + c] = ((src[i] + 1.0) / 2.0).clamp(0.0, 1.0);
                            i += 1;
                        }
                    }
                }
            }
        }
    }
    VideoClip::new(Tensor::new(vec![f, hh, ww, ch], out)?, frame_rate)
}
