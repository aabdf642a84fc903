use rand_chacha::ChaCha8Rng;

use super::{cfg_velocity, FlowConfig};
use crate::error::{Error, Result};
use crate::expression::ImplicitExpressionTrack;
use crate::generator::{Condition, Denoiser, DenoiserInput};
use crate::numerics::{PairMask, Scalar, Tensor};
use crate::seed::normal_tensor;

/// A velocity predictor with a conditional and an unconditional branch.
pub trait VelocityField<T: Scalar> {
    fn velocity(&self, z: &Tensor<T>, t: f64, conditional: bool) -> Result<Tensor<T>>;
}

/// Integrates from `t = 1` (standard normal) to `t = 0` with `cfg.steps`
/// uniform Euler steps of the guided velocity.
pub fn euler_sample<T: Scalar, V: VelocityField<T> + ?Sized>(
    field: &V,
    shape: &[usize],
    cfg: &FlowConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>> {
    if cfg.steps == 0 {
        return Err(Error::Config("steps must be at least 1".into()));
    }
    let mut z: Tensor<T> = normal_tensor(rng, shape, 1.0);
    let dt = 1.0 / cfg.steps as f64;
    for i in 0..cfg.steps {
        let t = (cfg.steps - i) as f64 / cfg.steps as f64;
        let v_cond = field.velocity(&z, t, true)?;
        let v = if cfg.cfg_scale == 1.0 {
            v_cond
        } else {
            let v_uncond = field.velocity(&z, t, false)?;
            cfg_velocity(&v_cond, &v_uncond, cfg.cfg_scale)?
        };
        let step = T::of(dt);
        z = z.zip_map(&v, |a, b| a - step * b)?;
        if !z.is_finite() {
            return Err(Error::DivergedSampling { step: i });
        }
    }
    Ok(z)
}

/// A trained denoiser driven by character tracks, with the learned null
/// condition as the unconditional branch.
pub struct DenoiserField<'a, T: Scalar> {
    pub model: &'a Denoiser<T>,
    pub tracks: &'a [ImplicitExpressionTrack],
    pub reference: Option<&'a Tensor<T>>,
    pub mask: &'a PairMask,
}

impl<T: Scalar> VelocityField<T> for DenoiserField<'_, T> {
    fn velocity(&self, z: &Tensor<T>, t: f64, conditional: bool) -> Result<Tensor<T>> {
        let condition = if conditional {
            Condition::Tracks(self.tracks)
        } else {
            Condition::Null {
                characters: self.tracks.len(),
            }
        };
        self.model.forward(&DenoiserInput {
            z_t: z,
            t,
            reference: self.reference,
            condition,
            mask: self.mask,
            context: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::{rng, Stream};
    use std::cell::Cell;

    /// Velocity of the straight path towards a single data point `z1`.
    struct Dirac(Tensor<f64>);

    impl VelocityField<f64> for Dirac {
        fn velocity(&self, z: &Tensor<f64>, t: f64, _: bool) -> Result<Tensor<f64>> {
            z.zip_map(&self.0, |a, b| (a - b) / t)
        }
    }

    fn target() -> Tensor<f64> {
        normal_tensor(&mut rng(3, Stream::Test, 0), &[2, 3, 4], 2.0)
    }

    #[test]
    fn dirac_oracle_is_recovered_at_any_step_count() {
        let z1 = target();
        for steps in [1, 2, 7, 30] {
            for seed in 0..5 {
                let cfg = FlowConfig {
                    steps,
                    cfg_scale: 4.5,
                    ..FlowConfig::default()
                };
                let z = euler_sample(
                    &Dirac(z1.clone()),
                    z1.shape(),
                    &cfg,
                    &mut rng(seed, Stream::Sampler, 0),
                )
                .unwrap();
                assert!(z.max_abs_diff(&z1).unwrap() <= 1e-6, "steps {steps}");
            }
        }
    }

    struct Branches {
        uncond_calls: Cell<usize>,
    }

    impl VelocityField<f64> for Branches {
        fn velocity(&self, z: &Tensor<f64>, t: f64, conditional: bool) -> Result<Tensor<f64>> {
            if conditional {
                Ok(z.map(|v| 0.3 * v + t))
            } else {
                self.uncond_calls.set(self.uncond_calls.get() + 1);
                Ok(z.map(|v| -5.0 * v + 100.0))
            }
        }
    }

    #[test]
    fn unit_guidance_follows_conditional_branch() {
        struct CondOnly;
        impl VelocityField<f64> for CondOnly {
            fn velocity(&self, z: &Tensor<f64>, t: f64, _: bool) -> Result<Tensor<f64>> {
                Ok(z.map(|v| 0.3 * v + t))
            }
        }
        let cfg = FlowConfig {
            cfg_scale: 1.0,
            ..FlowConfig::default()
        };
        let b = Branches {
            uncond_calls: Cell::new(0),
        };
        let a = euler_sample(&b, &[5, 2], &cfg, &mut rng(1, Stream::Sampler, 0)).unwrap();
        let c = euler_sample(&CondOnly, &[5, 2], &cfg, &mut rng(1, Stream::Sampler, 0)).unwrap();
        assert!(a.max_abs_diff(&c).unwrap() <= 1e-6);

        let guided = FlowConfig::default();
        let g = euler_sample(&b, &[5, 2], &guided, &mut rng(1, Stream::Sampler, 0)).unwrap();
        assert_eq!(b.uncond_calls.get(), 30);
        assert!(g.max_abs_diff(&c).unwrap() > 1e-3);
    }

    #[test]
    fn divergence_reports_step() {
        struct Blowup;
        impl VelocityField<f64> for Blowup {
            fn velocity(&self, z: &Tensor<f64>, _: f64, _: bool) -> Result<Tensor<f64>> {
                Ok(z.map(|v| v * 1e300 + 1e300))
            }
        }
        let cfg = FlowConfig {
            steps: 5,
            cfg_scale: 1.0,
            ..FlowConfig::default()
        };
        let err = euler_sample::<f64, _>(&Blowup, &[3], &cfg, &mut rng(0, Stream::Sampler, 0));
        assert!(
            matches!(err, Err(Error::DivergedSampling { step: 1 })),
            "{err:?}"
        );
    }

    #[test]
    fn same_seed_same_sample() {
        let z1 = target();
        let cfg = FlowConfig::default();
        let field = Branches {
            uncond_calls: Cell::new(0),
        };
        let a = euler_sample(&field, z1.shape(), &cfg, &mut rng(9, Stream::Sampler, 0)).unwrap();
        let b = euler_sample(&field, z1.shape(), &cfg, &mut rng(9, Stream::Sampler, 0)).unwrap();
        assert_eq!(a, b);
    }
}
