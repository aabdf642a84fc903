//! Face masks in pixel space, their latent-grid counterparts, and the
//! query/key pair mask for masked cross-attention.

use crate::error::{Error, Result};
use crate::numerics::{trilinear_resample, PairMask, Tensor};

/// Binary per-frame face mask of one character, `[f, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceMaskTrack {
    pub character_id: u32,
    pub masks: Tensor<f32>,
}

impl FaceMaskTrack {
    pub fn new(character_id: u32, masks: Tensor<f32>) -> Result<Self> {
        if masks.rank() != 3 {
            return Err(Error::shape(format!(
                "face mask must be [f, H, W], got {:?}",
                masks.shape()
            )));
        }
        if masks.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::shape(format!(
                "face mask of character {character_id} is not binary"
            )));
        }
        Ok(FaceMaskTrack {
            character_id,
            masks,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.masks.shape();
        [s[0], s[1], s[2]]
    }
}

/// Binarized per-character masks on a latent grid `[f, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentMaskSet {
    dims: [usize; 3],
    masks: Vec<(u32, Tensor<f32>)>,
}

impl LatentMaskSet {
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn characters(&self) -> impl Iterator<Item = u32> + '_ {
        self.masks.iter().map(|(id, _)| *id)
    }

    pub fn get(&self, character_id: u32) -> Option<&Tensor<f32>> {
        self.masks
            .iter()
            .find(|(id, _)| *id == character_id)
            .map(|(_, m)| m)
    }

    /// Whether `character_id` covers latent position `(frame, y, x)`.
    pub fn covers(&self, character_id: u32, frame: usize, y: usize, x: usize) -> bool {
        let [_, h, w] = self.dims;
        self.get(character_id)
            .is_some_and(|m| m.data()[(frame * h + y) * w + x] >= 0.5)
    }

    /// A single character covering every latent position.
    pub fn full(character_id: u32, dims: [usize; 3]) -> Self {
        LatentMaskSet {
            dims,
            masks: vec![(character_id, Tensor::full(&dims, 1.0))],
        }
    }
}

/// Resamples each pixel mask trilinearly to `latent_dims` and binarizes at 0.5.
pub fn build_latent_mask(
    masks: &[FaceMaskTrack],
    latent_dims: [usize; 3],
) -> Result<LatentMaskSet> {
    if latent_dims.contains(&0) {
        return Err(Error::shape(format!("latent dims {latent_dims:?}")));
    }
    let mut out = Vec::with_capacity(masks.len());
    for m in masks {
        let d = m.dims();
        if d.iter().zip(&latent_dims).any(|(p, l)| p % l != 0) {
            return Err(Error::shape(format!(
                "pixel mask dims {d:?} are not a multiple of latent dims {latent_dims:?}"
            )));
        }
        if masks[0].dims() != d {
            return Err(Error::shape(format!(
                "character {} mask dims {d:?} differ from {:?}",
                m.character_id,
                masks[0].dims()
            )));
        }
        let r = trilinear_resample(&m.masks, latent_dims)?;
        out.push((m.character_id, r.map(|v| if v >= 0.5 { 1.0 } else { 0.0 })));
    }
    Ok(LatentMaskSet {
        dims: latent_dims,
        masks: out,
    })
}

/// Latent token positions enumerated frame-major, then row, then column.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QueryLayout {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl QueryLayout {
    pub fn len(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn position(&self, q: usize) -> (usize, usize, usize) {
        let x = q % self.width;
        let y = (q / self.width) % self.height;
        (q / (self.width * self.height), y, x)
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.frames, self.height, self.width]
    }
}

impl From<[usize; 3]> for QueryLayout {
    fn from([frames, height, width]: [usize; 3]) -> Self {
        QueryLayout {
            frames,
            height,
            width,
        }
    }
}

/// `M[q, k]` is set iff the mask of `char_of_key[k]` covers `q` and key `k`
/// belongs to `q`'s frame.
pub fn build_pair_mask(
    mset: &LatentMaskSet,
    char_of_key: &[u32],
    frame_of_key: &[usize],
    layout: QueryLayout,
) -> Result<PairMask> {
    if layout.dims() != mset.dims() {
        return Err(Error::shape(format!(
            "query layout {:?} differs from latent masks {:?}",
            layout.dims(),
            mset.dims()
        )));
    }
    if char_of_key.len() != frame_of_key.len() {
        return Err(Error::shape("char_of_key and frame_of_key lengths differ"));
    }
    Ok(PairMask::from_fn(
        layout.len(),
        char_of_key.len(),
        |q, k| {
            let (fr, y, x) = layout.position(q);
            frame_of_key[k] == fr && mset.covers(char_of_key[k], fr, y, x)
        },
    ))
}

/// Frame alignment only: every query sees all keys of its own frame.
pub fn frame_pair_mask(frame_of_key: &[usize], layout: QueryLayout) -> PairMask {
    PairMask::from_fn(layout.len(), frame_of_key.len(), |q, k| {
        frame_of_key[k] == layout.position(q).0
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expression::key_layout;

    fn halves(f: usize, h: usize, w: usize) -> [FaceMaskTrack; 2] {
        let left = Tensor::from_fn(&[f, h, w], |i| if i % w < w / 2 { 1.0 } else { 0.0 });
        let right = left.map(|v| 1.0 - v);
        [
            FaceMaskTrack::new(1, left).unwrap(),
            FaceMaskTrack::new(2, right).unwrap(),
        ]
    }

    #[test]
    fn constant_masks_stay_constant() {
        for v in [0.0f32, 1.0] {
            let m = FaceMaskTrack::new(1, Tensor::full(&[4, 32, 32], v)).unwrap();
            let set = build_latent_mask(&[m], [4, 16, 16]).unwrap();
            assert!(set.get(1).unwrap().data().iter().all(|&x| x == v));
        }
    }

    #[test]
    fn disjoint_halves_stay_disjoint() {
        let set = build_latent_mask(&halves(2, 32, 32), [2, 16, 16]).unwrap();
        let (a, b) = (set.get(1).unwrap(), set.get(2).unwrap());
        // Column j samples source column j * 31 / 15; the left half is 0..=15.
        for i in 0..a.len() {
            let col = i % 16;
            let src = col as f64 * 31.0 / 15.0;
            let (i0, t) = (src.floor(), src.fract());
            let left = |c: f64| if c < 16.0 { 1.0 } else { 0.0 };
            let expect_left = (1.0 - t) * left(i0) + t * left(i0 + 1.0) >= 0.5;
            assert_eq!(a.data()[i] == 1.0, expect_left, "col {col}");
            assert!(a.data()[i] + b.data()[i] <= 1.0);
        }
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x + y == 1.0));
    }

    #[test]
    fn latent_mask_errors() {
        let m = FaceMaskTrack::new(1, Tensor::full(&[2, 30, 32], 1.0)).unwrap();
        assert!(matches!(
            build_latent_mask(&[m], [2, 16, 16]),
            Err(Error::InvalidShape(_))
        ));
        assert!(FaceMaskTrack::new(1, Tensor::full(&[2, 4, 4], 0.5)).is_err());
    }

    #[test]
    fn single_full_mask_enables_matching_frames() {
        let layout = QueryLayout::from([2, 3, 3]);
        let set = LatentMaskSet::full(5, layout.dims());
        let (chars, frames) = key_layout(&[5, 5, 5], 2);
        let m = build_pair_mask(&set, &chars, &frames, layout).unwrap();
        for q in 0..layout.len() {
            for k in 0..chars.len() {
                assert_eq!(m.get(q, k), layout.position(q).0 == frames[k]);
            }
        }
        assert_eq!(m, frame_pair_mask(&frames, layout));
    }

    #[test]
    fn background_rows_are_empty_and_characters_do_not_mix() {
        // Character 1 owns columns 0..2, character 2 owns column 3, column 2 is background.
        let (f, h, w) = (2, 4, 4);
        let a = Tensor::from_fn(&[f, h, w], |i| if i % w < 2 { 1.0 } else { 0.0 });
        let b = Tensor::from_fn(&[f, h, w], |i| if i % w == 3 { 1.0 } else { 0.0 });
        let set = build_latent_mask(
            &[
                FaceMaskTrack::new(1, a).unwrap(),
                FaceMaskTrack::new(2, b).unwrap(),
            ],
            [f, h, w],
        )
        .unwrap();
        let (chars, frames) = key_layout(&[1, 1, 2, 2, 2], f);
        let layout = QueryLayout::from([f, h, w]);
        let m = build_pair_mask(&set, &chars, &frames, layout).unwrap();
        for q in 0..layout.len() {
            let (fr, _, x) = layout.position(q);
            for k in 0..chars.len() {
                let expect = frames[k] == fr
                    && match chars[k] {
                        1 => x < 2,
                        _ => x == 3,
                    };
                assert_eq!(m.get(q, k), expect, "q {q} k {k}");
            }
            if x == 2 {
                assert!(m.row(q).iter().all(|&b| !b));
            }
        }
    }
}
