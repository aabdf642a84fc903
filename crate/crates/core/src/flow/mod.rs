//! Flow matching on the straight path `z_t = (1 - t) z + t ε`: timestep
//! sampling, velocity targets, guidance, Euler integration, and training.

mod sampler;
mod train;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

pub use sampler::{euler_sample, DenoiserField, VelocityField};
pub use train::{evaluate_loss, train_loop, train_step, Adam, TrainSample, TrainState};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub t_mu: f64,
    pub t_sigma: f64,
    pub lr: f64,
    pub dropout_p: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            steps: 30,
            cfg_scale: 4.5,
            t_mu: 0.0,
            t_sigma: 1.0,
            lr: 1e-4,
            dropout_p: 0.2,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.t_sigma < 0.0 || !self.t_mu.is_finite() || !self.t_sigma.is_finite() {
            return Err(Error::Config(
                "t_sigma must be finite and non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.dropout_p) {
            return Err(Error::Config("dropout_p must lie in [0, 1]".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 || !self.cfg_scale.is_finite() {
            return Err(Error::Config(
                "lr and cfg_scale must be finite, lr non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Logit-normal draw: `logistic(n)` with `n ~ Normal(mu, sigma)`, kept strictly
/// inside `(0, 1)`.
pub fn sample_t(rng: &mut impl Rng, mu: f64, sigma: f64) -> f64 {
    let n = if sigma > 0.0 {
        Normal::new(mu, sigma).expect("finite sigma").sample(rng)
    } else {
        mu
    };
    let t = 1.0 / (1.0 + (-n).exp());
    t.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// `(z_t, v_target)` with `z_t = (1 - t) data + t noise` and `v = noise - data`.
pub fn make_training_pair<T: Scalar>(
    data: &Tensor<T>,
    noise: &Tensor<T>,
    t: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    data.expect_same_shape(noise)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Evaluation(format!("t = {t} outside [0, 1]")));
    }
    let (a, b) = (T::of(1.0 - t), T::of(t));
    let z_t = Tensor::from_fn(data.shape(), |i| {
        let (d, n) = (data.data()[i], noise.data()[i]);
        if t == 0.0 {
            d
        } else if t == 1.0 {
            n
        } else {
            a * d + b * n
        }
    });
    let v = noise.zip_map(data, |n, d| n - d)?;
    Ok((z_t, v))
}

/// Mean squared error over all elements.
pub fn fm_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    pred.expect_same_shape(target)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let d = p.as_f64() - t.as_f64();
            d * d
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

/// `v_uncond + s (v_cond - v_uncond)`.
pub fn cfg_velocity<T: Scalar>(
    v_cond: &Tensor<T>,
    v_uncond: &Tensor<T>,
    s: f64,
) -> Result<Tensor<T>> {
    let s = T::of(s);
    v_cond.zip_map(v_uncond, |c, u| u + s * (c - u))
}
