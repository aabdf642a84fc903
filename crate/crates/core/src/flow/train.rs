use super::{make_training_pair, sample_t, FlowConfig};
use crate::error::{Error, Result};
use crate::expression::{drop_condition, ImplicitExpressionTrack};
use crate::generator::{Condition, Denoiser, DenoiserInput, GraphInput};
use crate::numerics::{Graph, PairMask, Tensor};
use crate::params::ParamSet;
use crate::seed::{normal_tensor, rng, Stream};

/// One training clip: clean latent, optional source-frame latent, driving
/// tracks, and the token-by-key mask.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub latent: Tensor<f32>,
    pub reference: Option<Tensor<f32>>,
    pub tracks: Vec<ImplicitExpressionTrack>,
    pub mask: PairMask,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Parameters, optimizer moments, step counter and root seed.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Denoiser<f32>,
    pub adam_m: ParamSet<f32>,
    pub adam_v: ParamSet<f32>,
    pub step: u64,
    pub seed: u64,
    pub adam: Adam,
}

impl TrainState {
    pub fn new(model: Denoiser<f32>, seed: u64) -> Self {
        let zeros = model.params().zeros_like();
        TrainState {
            model,
            adam_m: zeros.clone(),
            adam_v: zeros,
            step: 0,
            seed,
            adam: Adam::default(),
        }
    }

    pub fn from_parts(
        model: Denoiser<f32>,
        adam_m: ParamSet<f32>,
        adam_v: ParamSet<f32>,
        step: u64,
        seed: u64,
    ) -> Result<Self> {
        model.params().expect_layout(&adam_m)?;
        model.params().expect_layout(&adam_v)?;
        Ok(TrainState {
            model,
            adam_m,
            adam_v,
            step,
            seed,
            adam: Adam::default(),
        })
    }
}

fn item_counter(step: u64, item: usize) -> u64 {
    (step << 16) | item as u64
}

/// One optimizer step on the mean flow-matching loss of `batch`. All draws
/// come from `(seed, step, item)`, so a resumed state continues identically.
pub fn train_step(state: &mut TrainState, batch: &[TrainSample], cfg: &FlowConfig) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::shape("empty training batch"));
    }
    let step = state.step;
    let diverged = |e: Error| match e {
        Error::Evaluation(_) => Error::DivergedTraining {
            step,
            loss: f64::NAN,
        },
        other => other,
    };

    let mut g = Graph::new();
    let b = state.model.params().bind(&mut g, true);
    let mut total = None;
    for (j, s) in batch.iter().enumerate() {
        let counter = item_counter(step, j);
        let t = sample_t(
            &mut rng(state.seed, Stream::Timestep, counter),
            cfg.t_mu,
            cfg.t_sigma,
        );
        let noise = normal_tensor(
            &mut rng(state.seed, Stream::Noise, counter),
            s.latent.shape(),
            1.0,
        );
        let mut dr = rng(state.seed, Stream::Dropout, counter);
        let dropped = drop_condition(cfg.dropout_p, &mut dr);
        let drop_reference = drop_condition(cfg.dropout_p, &mut dr);
        let (z_t, v_target) = make_training_pair(&s.latent, &noise, t)?;
        let cond = if dropped {
            Condition::Null {
                characters: s.tracks.len(),
            }
        } else {
            Condition::Tracks(&s.tracks)
        };
        let frames = z_t.shape()[0];
        let motion = state.model.condition_graph(&mut g, &b, cond, frames)?;
        let gi = GraphInput {
            z_t: g.constant(z_t),
            t,
            reference: s
                .reference
                .clone()
                .filter(|_| !drop_reference)
                .map(|r| g.constant(r)),
            motion,
            mask: &s.mask,
            context: None,
        };
        let out = state
            .model
            .forward_graph(&mut g, &b, &gi)
            .map_err(diverged)?;
        let target = g.constant(v_target);
        let l = g.mse(out, target).map_err(diverged)?;
        total = Some(match total {
            None => l,
            Some(acc) => g.add(acc, l)?,
        });
    }
    let total = total.expect("non-empty batch");
    let loss_var = g.scale(total, 1.0 / batch.len() as f64)?;
    let loss = g.value(loss_var).data()[0] as f64;
    if !loss.is_finite() {
        return Err(Error::DivergedTraining { step, loss });
    }
    let grads = g.backward(loss_var).map_err(diverged)?;

    let Adam { beta1, beta2, eps } = state.adam;
    let n = (step + 1) as i32;
    let bc1 = 1.0 - beta1.powi(n);
    let bc2 = 1.0 - beta2.powi(n);
    let lr = cfg.lr;
    let names: Vec<String> = state
        .model
        .params()
        .iter()
        .map(|(k, _)| k.clone())
        .collect();
    for name in names {
        let grad = grads.get(b.get(&name)?);
        let p = state.model.params_mut().get_mut(&name).expect("bound name");
        let m = state.adam_m.get_mut(&name).expect("moment layout");
        let v = state.adam_v.get_mut(&name).expect("moment layout");
        for i in 0..p.len() {
            let gi = grad.as_ref().map_or(0.0, |g| g.data()[i] as f64);
            let mi = beta1 * m.data()[i] as f64 + (1.0 - beta1) * gi;
            let vi = beta2 * v.data()[i] as f64 + (1.0 - beta2) * gi * gi;
            m.data_mut()[i] = mi as f32;
            v.data_mut()[i] = vi as f32;
            let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
            if update != 0.0 {
                p.data_mut()[i] = (p.data()[i] as f64 - update) as f32;
            }
        }
    }
    state.step += 1;
    Ok(loss)
}

/// Runs `steps` optimizer steps, cycling through `samples` in order `batch`
/// at a time. The batch is a function of the step counter, so a resumed
/// state picks up the same schedule.
pub fn train_loop(
    state: &mut TrainState,
    samples: &[TrainSample],
    cfg: &FlowConfig,
    steps: u64,
    batch: usize,
    mut on_step: impl FnMut(u64, f64),
) -> Result<()> {
    if samples.is_empty() || batch == 0 {
        return Err(Error::shape(
            "training needs samples and a positive batch size",
        ));
    }
    let n = samples.len();
    for _ in 0..steps {
        let start = (state.step as usize).wrapping_mul(batch) % n;
        let chosen: Vec<TrainSample> = (0..batch.min(n))
            .map(|k| samples[(start + k) % n].clone())
            .collect();
        let loss = train_step(state, &chosen, cfg)?;
        on_step(state.step, loss);
    }
    Ok(())
}

/// Mean conditional flow-matching loss over fixed `(t, noise)` draws per
/// sample, for comparing models independently of training randomness.
pub fn evaluate_loss(
    model: &Denoiser<f32>,
    samples: &[TrainSample],
    cfg: &FlowConfig,
    seed: u64,
    draws: usize,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, s) in samples.iter().enumerate() {
        for k in 0..draws {
            let counter = item_counter(i as u64, k);
            let t = sample_t(&mut rng(seed, Stream::Eval, counter), cfg.t_mu, cfg.t_sigma);
            let noise = normal_tensor(
                &mut rng(seed, Stream::Noise, counter),
                s.latent.shape(),
                1.0,
            );
            let (z_t, v_target) = make_training_pair(&s.latent, &noise, t)?;
            let v = model.forward(&DenoiserInput {
                z_t: &z_t,
                t,
                reference: s.reference.as_ref(),
                condition: Condition::Tracks(&s.tracks),
                mask: &s.mask,
                context: None,
            })?;
            sum += super::fm_loss(&v, &v_target)?;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::shape("no samples to evaluate"));
    }
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expression::{ExpressionConfig, FeatureDims};
    use crate::generator::DenoiserConfig;

    fn tiny_cfg() -> DenoiserConfig {
        DenoiserConfig {
            layers: 1,
            width: 32,
            heads: 2,
            patch: 2,
            latent_channels: 4,
            max_frames: 2,
            max_grid: 4,
            use_mca: true,
            expression: ExpressionConfig {
                dims: FeatureDims {
                    lip: 2,
                    eye: 2,
                    head: 2,
                    emo: 2,
                },
                width: 8,
                tokens: 2,
                kv_tokens: 2,
                heads: 2,
                use_eal: true,
            },
            context_dim: 0,
        }
    }

    fn sample(salt: u64) -> TrainSample {
        let mut r = rng(31, Stream::Test, salt);
        let f = 2;
        let feat = |r: &mut _| normal_tensor(r, &[f, 2], 1.0);
        let track =
            ImplicitExpressionTrack::new(1, feat(&mut r), feat(&mut r), feat(&mut r), feat(&mut r))
                .unwrap();
        let latent = normal_tensor::<f32>(&mut r, &[f, 8, 8, 4], 0.7);
        let frame_of_key: Vec<usize> = (0..f * 6).map(|k| k / 6).collect();
        TrainSample {
            reference: None,
            mask: crate::generator::frame_pair_mask(&frame_of_key, [f, 4, 4].into()),
            latent,
            tracks: vec![track],
        }
    }

    fn fresh(seed: u64) -> TrainState {
        TrainState::new(Denoiser::new(tiny_cfg(), seed).unwrap(), seed)
    }

    #[test]
    fn same_seed_gives_identical_trace() {
        let batch = [sample(0), sample(1)];
        let cfg = FlowConfig {
            lr: 1e-3,
            ..FlowConfig::default()
        };
        let run = || {
            let mut s = fresh(5);
            let trace: Vec<f64> = (0..5)
                .map(|_| train_step(&mut s, &batch, &cfg).unwrap())
                .collect();
            (trace, s)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert_eq!(sa.step, 5);
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let batch = [sample(2)];
        let cfg = FlowConfig {
            lr: 0.0,
            ..FlowConfig::default()
        };
        let mut s = fresh(6);
        let before = s.model.clone();
        let probe = |m: &Denoiser<f32>| evaluate_loss(m, &batch, &cfg, 1, 3).unwrap();
        let l0 = probe(&s.model);
        for _ in 0..3 {
            train_step(&mut s, &batch, &cfg).unwrap();
            assert_eq!(probe(&s.model), l0);
        }
        assert_eq!(s.model, before);
    }

    #[test]
    fn single_sample_is_memorized() {
        let batch = [sample(3)];
        let cfg = FlowConfig {
            lr: 3e-3,
            dropout_p: 0.0,
            ..FlowConfig::default()
        };
        let mut s = fresh(7);
        let probe = |m: &Denoiser<f32>| evaluate_loss(m, &batch, &cfg, 2, 8).unwrap();
        let l0 = probe(&s.model);
        for _ in 0..500 {
            train_step(&mut s, &batch, &cfg).unwrap();
        }
        let l500 = probe(&s.model);
        assert!(l500 < 0.1 * l0, "{l0} -> {l500}");
    }

    #[test]
    fn non_finite_parameters_report_divergence() {
        let batch = [sample(4)];
        let mut s = fresh(8);
        s.model.params_mut().get_mut("final.b").unwrap().data_mut()[0] = f32::NAN;
        let err = train_step(&mut s, &batch, &FlowConfig::default());
        assert!(
            matches!(err, Err(Error::DivergedTraining { step: 0, .. })),
            "{err:?}"
        );
    }
}
