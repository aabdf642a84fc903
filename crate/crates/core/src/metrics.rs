//! Reenactment metrics: pixel fidelity (PSNR, SSIM), landmark distance,
//! gaze angular error, and expression/pose feature distances.

use serde::{Deserialize, Serialize};

use crate::codec::VideoClip;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// PSNR reported for identical inputs.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 7;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Landmarks `[f, L, 2]` in normalized image coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkTrack {
    pub points: Vec<Vec<[f64; 2]>>,
}

/// Gaze `(yaw, pitch)` per frame in degrees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GazeTrack {
    pub angles: Vec<[f64; 2]>,
}

/// Per-frame feature vectors, used for both expression and pose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureTrack {
    pub vectors: Vec<Vec<f64>>,
}

pub type ExprFeatTrack = FeatureTrack;
pub type PoseTrack = FeatureTrack;

impl LandmarkTrack {
    pub fn frames(&self) -> usize {
        self.points.len()
    }
}

/// Wraps an angle in degrees to `[-180, 180)`.
pub fn wrap_degrees(a: f64) -> f64 {
    (a + 180.0).rem_euclid(360.0) - 180.0
}

fn frame_mse(a: &[f32], b: &[f32]) -> f64 {
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum();
    s / a.len() as f64
}

fn expect_same_clip(a: &VideoClip, b: &VideoClip) -> Result<[usize; 4]> {
    let (da, db) = (a.dims()?, b.dims()?);
    if da != db {
        return Err(Error::shape(format!(
            "clip shapes {da:?} and {db:?} differ"
        )));
    }
    Ok(da)
}

/// `10 log10(1 / MSE)` per frame, averaged over frames, capped at [`PSNR_CAP`].
pub fn psnr(a: &VideoClip, b: &VideoClip) -> Result<f64> {
    let [f, h, w, c] = expect_same_clip(a, b)?;
    let n = h * w * c;
    let total: f64 = (0..f)
        .map(|i| {
            let mse = frame_mse(
                &a.frames.data()[i * n..(i + 1) * n],
                &b.frames.data()[i * n..(i + 1) * n],
            );
            if mse == 0.0 {
                PSNR_CAP
            } else {
                (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
            }
        })
        .sum();
    Ok(total / f as f64)
}

/// SSIM of two grayscale images over all valid 7x7 windows (uniform weights,
/// population statistics).
pub fn ssim_frame(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    a.expect_same_shape(b)?;
    let &[h, w] = a.shape() else {
        return Err(Error::shape(format!(
            "ssim frames must be [H, W], got {:?}",
            a.shape()
        )));
    };
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return Err(Error::shape(format!(
            "frame {h}x{w} smaller than the {k}x{k} window"
        )));
    }
    let (pa, pb) = (a.data(), b.data());
    let n = (k * k) as f64;
    let mut total = 0.0;
    for y in 0..=h - k {
        for x in 0..=w - k {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..k {
                for dx in 0..k {
                    let i = (y + dy) * w + x + dx;
                    let (u, v) = (pa[i] as f64, pb[i] as f64);
                    sa += u;
                    sb += v;
                    saa += u * u;
                    sbb += v * v;
                    sab += u * v;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = (saa / n - ma * ma).max(0.0);
            let vb = (sbb / n - mb * mb).max(0.0);
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
    }
    Ok(total / ((h - k + 1) * (w - k + 1)) as f64)
}

/// Mean of [`ssim_frame`] over frames, on channel-mean grayscale.
pub fn ssim(a: &VideoClip, b: &VideoClip) -> Result<f64> {
    let [f, ..] = expect_same_clip(a, b)?;
    let mut total = 0.0;
    for i in 0..f {
        total += ssim_frame(&a.gray_frame(i)?, &b.gray_frame(i)?)?;
    }
    Ok(total / f as f64)
}

/// Mean Euclidean distance over frames and points.
pub fn lmd(pred: &LandmarkTrack, gt: &LandmarkTrack) -> Result<f64> {
    if pred.frames() != gt.frames() || pred.frames() == 0 {
        return Err(Error::shape(format!(
            "landmark tracks have {} and {} frames",
            pred.frames(),
            gt.frames()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (p, g) in pred.points.iter().zip(&gt.points) {
        if p.len() != g.len() || p.is_empty() {
            return Err(Error::shape(format!(
                "landmark counts {} and {} differ",
                p.len(),
                g.len()
            )));
        }
        for (a, b) in p.iter().zip(g) {
            total += (a[0] - b[0]).hypot(a[1] - b[1]);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean wrapped absolute angle difference over frames and both components.
pub fn mae_angular(pred: &GazeTrack, gt: &GazeTrack) -> Result<f64> {
    if pred.angles.len() != gt.angles.len() || pred.angles.is_empty() {
        return Err(Error::shape(format!(
            "gaze tracks have {} and {} frames",
            pred.angles.len(),
            gt.angles.len()
        )));
    }
    let mut total = 0.0;
    for (p, g) in pred.angles.iter().zip(&gt.angles) {
        for c in 0..2 {
            let d = (p[c] - g[c]).rem_euclid(360.0);
            total += d.min(360.0 - d);
        }
    }
    Ok(total / (2 * pred.angles.len()) as f64)
}

fn mean_feature_distance(pred: &FeatureTrack, gt: &FeatureTrack) -> Result<f64> {
    if pred.vectors.len() != gt.vectors.len() || pred.vectors.is_empty() {
        return Err(Error::shape(format!(
            "feature tracks have {} and {} frames",
            pred.vectors.len(),
            gt.vectors.len()
        )));
    }
    let mut total = 0.0;
    for (p, g) in pred.vectors.iter().zip(&gt.vectors) {
        if p.len() != g.len() {
            return Err(Error::shape(format!(
                "feature widths {} and {} differ",
                p.len(),
                g.len()
            )));
        }
        total += p
            .iter()
            .zip(g)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
    }
    Ok(total / pred.vectors.len() as f64)
}

/// Average expression distance.
pub fn aed(pred: &ExprFeatTrack, gt: &ExprFeatTrack) -> Result<f64> {
    mean_feature_distance(pred, gt)
}

/// Average pose distance.
pub fn apd(pred: &PoseTrack, gt: &PoseTrack) -> Result<f64> {
    mean_feature_distance(pred, gt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn clip(f: usize, h: usize, w: usize, v: impl Fn(usize) -> f32) -> VideoClip {
        VideoClip::new(Tensor::from_fn(&[f, h, w, 1], v), 25.0).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = clip(2, 8, 8, |i| (i % 7) as f32 / 7.0);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let zeros = clip(1, 4, 4, |_| 0.0);
        let ones = clip(1, 4, 4, |_| 1.0);
        assert_eq!(psnr(&zeros, &ones).unwrap(), 0.0);
        // 64 of 100 pixels off by 1/8: MSE = 64 / 64 / 100 = 0.01.
        let base = clip(1, 10, 10, |_| 0.25);
        let off = clip(1, 10, 10, |i| if i < 64 { 0.375 } else { 0.25 });
        assert!((psnr(&base, &off).unwrap() - 20.0).abs() <= 1e-9);
        let half = clip(1, 4, 4, |_| 0.5);
        let quarter = clip(1, 4, 4, |_| 0.25);
        // MSE 0.0625 exactly.
        assert!((psnr(&half, &quarter).unwrap() - 10.0 * 16f64.log10()).abs() <= 1e-12);
        assert!(psnr(&a, &zeros).is_err());
    }

    #[test]
    fn ssim_examples() {
        let a = clip(2, 10, 10, |i| ((i * 37) % 11) as f32 / 11.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() <= 1e-12);

        let c5 = clip(1, 8, 8, |_| 0.5);
        let c7 = clip(1, 8, 8, |_| 0.7);
        let (x, y) = (0.5f32 as f64, 0.7f32 as f64);
        let expect = (2.0 * x * y + SSIM_C1) / (x * x + y * y + SSIM_C1);
        assert!((ssim(&c5, &c7).unwrap() - expect).abs() <= 1e-9);

        let checker = clip(1, 8, 8, |i| ((i / 8 + i % 8) % 2) as f32);
        let inverted = clip(1, 8, 8, |i| 1.0 - ((i / 8 + i % 8) % 2) as f32);
        assert!(ssim(&checker, &inverted).unwrap() < 0.0);

        let small = clip(1, 6, 8, |_| 0.0);
        assert!(matches!(ssim(&small, &small), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn lmd_examples() {
        let t = |p: [f64; 2]| LandmarkTrack {
            points: vec![vec![p]],
        };
        assert_eq!(lmd(&t([0.2, 0.1]), &t([0.2, 0.1])).unwrap(), 0.0);
        assert!((lmd(&t([0.3, 0.4]), &t([0.0, 0.0])).unwrap() - 0.5).abs() <= 1e-9);
        let a = LandmarkTrack {
            points: vec![vec![[0.1, 0.2], [0.5, 0.5]]],
        };
        let b = LandmarkTrack {
            points: vec![vec![[0.4, 0.6], [0.5, 0.7]]],
        };
        let dup = |t: &LandmarkTrack| LandmarkTrack {
            points: t
                .points
                .iter()
                .map(|p| p.iter().chain(p).copied().collect())
                .collect(),
        };
        let base = lmd(&a, &b).unwrap();
        assert!((lmd(&dup(&a), &dup(&b)).unwrap() - base).abs() <= 1e-15);
        assert!(lmd(&a, &t([0.0, 0.0])).is_err());
    }

    #[test]
    fn angular_examples() {
        let g = |y: f64, p: f64| GazeTrack {
            angles: vec![[y, p]],
        };
        assert_eq!(mae_angular(&g(10.0, -5.0), &g(10.0, -5.0)).unwrap(), 0.0);
        // One component wraps by 20 degrees, the other is equal.
        assert!((mae_angular(&g(170.0, 0.0), &g(-170.0, 0.0)).unwrap() - 10.0).abs() <= 1e-9);
        assert!((mae_angular(&g(170.0, 170.0), &g(-170.0, -170.0)).unwrap() - 20.0).abs() <= 1e-9);
        assert!((mae_angular(&g(90.0, 45.0), &g(0.0, -45.0)).unwrap() - 90.0).abs() <= 1e-9);
        assert_eq!(wrap_degrees(180.0), -180.0);
        assert_eq!(wrap_degrees(-190.0), 170.0);
    }

    #[test]
    fn feature_distance_examples() {
        let t = |v: Vec<Vec<f64>>| FeatureTrack { vectors: v };
        let a = t(vec![vec![1.0, 2.0, 3.0], vec![0.0, 0.0, 0.0]]);
        assert_eq!(aed(&a, &a).unwrap(), 0.0);
        let b = t(vec![vec![1.0, 3.0, 3.0], vec![0.0, 1.0, 0.0]]);
        assert!((apd(&a, &b).unwrap() - 1.0).abs() <= 1e-9);
        let d = aed(&t(vec![vec![1.0, 0.0]]), &t(vec![vec![0.0, 1.0]])).unwrap();
        assert!((d - 2f64.sqrt()).abs() <= 1e-9);
        assert!(aed(&a, &t(vec![vec![1.0, 2.0]])).is_err());
    }

    proptest! {
        #[test]
        fn psnr_decreases_with_noise(seed in 0u64..1000, a1 in 0.01f32..0.1, extra in 0.01f32..0.1) {
            let base = clip(1, 8, 8, |i| 0.5 + 0.2 * ((i as f32 * 0.7).sin()));
            let signs: Vec<f32> = (0..64).map(|i| if (seed >> (i % 10)) & 1 == 0 { 1.0 } else { -1.0 }).collect();
            let noisy = |amp: f32| clip(1, 8, 8, |i| base.frames.data()[i] + amp * signs[i]);
            let p1 = psnr(&base, &noisy(a1)).unwrap();
            let p2 = psnr(&base, &noisy(a1 + extra)).unwrap();
            prop_assert!(p2 < p1);
        }

        #[test]
        fn distances_are_symmetric(v in proptest::collection::vec(-1.0f64..1.0, 12)) {
            let a = LandmarkTrack { points: vec![vec![[v[0], v[1]], [v[2], v[3]]]] };
            let b = LandmarkTrack { points: vec![vec![[v[4], v[5]], [v[6], v[7]]]] };
            prop_assert_eq!(lmd(&a, &b).unwrap(), lmd(&b, &a).unwrap());
            let g = GazeTrack { angles: vec![[v[8] * 180.0, v[9] * 180.0]] };
            let h = GazeTrack { angles: vec![[v[10] * 180.0, v[11] * 180.0]] };
            prop_assert!((mae_angular(&g, &h).unwrap() - mae_angular(&h, &g).unwrap()).abs() <= 1e-12);
        }
    }
}
