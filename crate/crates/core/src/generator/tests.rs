use super::*;
use crate::expression::{
    build_motion_embedding, concat_multi_portrait, ExpressionConfig, FeatureDims,
    ImplicitExpressionTrack, MultiMotionEmbedding,
};
use crate::numerics::{Graph, PairMask, Tensor};
use crate::seed::{normal_tensor, rng, Stream};

fn small_cfg(layers: usize, patch: usize) -> DenoiserConfig {
    DenoiserConfig {
        layers,
        width: 16,
        heads: 2,
        patch,
        latent_channels: 4,
        max_frames: 4,
        max_grid: 8,
        use_mca: true,
        expression: ExpressionConfig {
            dims: FeatureDims {
                lip: 3,
                eye: 2,
                head: 2,
                emo: 3,
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

fn track(id: u32, f: usize, dims: FeatureDims, salt: u64) -> ImplicitExpressionTrack {
    let mut r = rng(21, Stream::Test, salt);
    ImplicitExpressionTrack::new(
        id,
        normal_tensor(&mut r, &[f, dims.lip], 1.0),
        normal_tensor(&mut r, &[f, dims.eye], 1.0),
        normal_tensor(&mut r, &[f, dims.head], 1.0),
        normal_tensor(&mut r, &[f, dims.emo], 1.0),
    )
    .unwrap()
}

fn latent<T: crate::numerics::Scalar>(shape: &[usize], salt: u64) -> Tensor<T> {
    normal_tensor(&mut rng(22, Stream::Test, salt), shape, 1.0)
}

/// Character 1 owns token columns 0..3, character 2 owns columns 5..8,
/// columns 3 and 4 are background.
fn two_face_masks(f: usize, h: usize, w: usize) -> [FaceMaskTrack; 2] {
    let a = Tensor::from_fn(&[f, h, w], |i| if i % w < 3 * w / 8 { 1.0 } else { 0.0 });
    let b = Tensor::from_fn(&[f, h, w], |i| if i % w >= 5 * w / 8 { 1.0 } else { 0.0 });
    [
        FaceMaskTrack::new(1, a).unwrap(),
        FaceMaskTrack::new(2, b).unwrap(),
    ]
}

fn embedding<T: crate::numerics::Scalar>(
    model: &Denoiser<T>,
    tracks: &[ImplicitExpressionTrack],
) -> MultiMotionEmbedding<T> {
    let ems: Vec<_> = tracks
        .iter()
        .map(|t| build_motion_embedding(t, model.params(), &model.config().expression).unwrap())
        .collect();
    concat_multi_portrait(&ems).unwrap()
}

#[test]
fn patchify_round_trip() {
    let cfg = small_cfg(1, 2);
    let grid = cfg.grid(&[2, 8, 6, 4]).unwrap();
    assert_eq!((grid.tokens(), grid.features()), (2 * 4 * 3, 16));
    let fwd = grid.patchify_index();
    let inv = grid.unpatchify_index();
    assert!(inv.iter().enumerate().all(|(i, &j)| fwd[j] == i));
    // First token gathers the top-left 2x2 block of frame 0.
    assert_eq!(&fwd[..8], &[0, 1, 2, 3, 4, 5, 6, 7]);
    assert_eq!(fwd[8], 6 * 4);
}

#[test]
fn forward_shape_and_timestep_sensitivity() {
    let cfg = small_cfg(2, 2);
    let model = Denoiser::<f32>::new(cfg, 1).unwrap();
    let z = latent::<f32>(&[2, 8, 8, 4], 0);
    let tracks = [track(1, 2, cfg.expression.dims, 0)];
    let mask = PairMask::ones(2 * 16, 2 * 6);
    let mut input = DenoiserInput {
        z_t: &z,
        t: 0.1,
        reference: None,
        condition: Condition::Tracks(&tracks),
        mask: &mask,
        context: None,
    };
    let a = model.forward(&input).unwrap();
    assert_eq!(a.shape(), z.shape());
    input.t = 0.9;
    let b = model.forward(&input).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() > 0.0);
}

#[test]
fn forward_rejects_bad_inputs() {
    let cfg = small_cfg(1, 2);
    let model = Denoiser::<f32>::new(cfg, 1).unwrap();
    let mut z = latent::<f32>(&[2, 8, 8, 4], 0);
    let tracks = [track(1, 2, cfg.expression.dims, 0)];
    let mask = PairMask::ones(32, 12);
    let input = |z: &Tensor<f32>, mask: &PairMask| {
        model.forward(&DenoiserInput {
            z_t: z,
            t: 0.5,
            reference: None,
            condition: Condition::Tracks(&tracks),
            mask,
            context: None,
        })
    };
    assert!(matches!(
        input(&z, &PairMask::ones(32, 11)),
        Err(crate::Error::InvalidShape(_))
    ));
    assert!(input(&latent(&[2, 7, 8, 4], 1), &mask).is_err());
    z.data_mut()[3] = f32::NAN;
    assert!(matches!(input(&z, &mask), Err(crate::Error::Evaluation(_))));
}

#[test]
fn null_condition_equals_tiled_null_tokens() {
    let cfg = small_cfg(1, 2);
    let model = Denoiser::<f64>::new(cfg, 2).unwrap();
    let z = latent::<f64>(&[2, 8, 8, 4], 1);
    let mask = PairMask::ones(32, 2 * 12);
    let null = model.params().get("expr.null").unwrap();
    let tiled = Tensor::from_fn(&[2, 12, 8], |i| null.data()[i % null.len()]);
    let em = MultiMotionEmbedding {
        tokens: tiled,
        char_of_key: vec![1; 6].into_iter().chain(vec![2; 6]).collect(),
    };
    let run = |condition| {
        model
            .forward(&DenoiserInput {
                z_t: &z,
                t: 0.4,
                reference: None,
                condition,
                mask: &mask,
                context: None,
            })
            .unwrap()
    };
    let a = run(Condition::Null { characters: 2 });
    let b = run(Condition::Embedding(&em));
    assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let cfg = DenoiserConfig {
        context_dim: 3,
        ..small_cfg(1, 1)
    };
    let model = Denoiser::<f64>::new(cfg, 3).unwrap();
    let z = latent::<f64>(&[2, 8, 8, 4], 2);
    let reference = latent::<f64>(&[8, 8, 4], 3);
    let context = latent::<f64>(&[2, 3], 4);
    let tracks = [
        track(1, 2, cfg.expression.dims, 1),
        track(2, 2, cfg.expression.dims, 2),
    ];
    let mask = model
        .pair_mask(
            &two_face_masks(2, 8, 8),
            &[1, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2, 2],
            z.shape(),
        )
        .unwrap();
    let weights = latent::<f64>(&[2, 8, 8, 4], 5);

    let input = DenoiserInput {
        z_t: &z,
        t: 0.3,
        reference: Some(&reference),
        condition: Condition::Tracks(&tracks),
        mask: &mask,
        context: Some(&context),
    };

    let eps = 1e-4;
    for name in [
        "z_t",
        "blocks.0.ada_w",
        "blocks.0.cross.wk",
        "blocks.0.ctx.wv",
        "embed.ref_w",
        "expr.emo.bank",
        "expr.eye_w",
        "final.b",
        "pos.x",
        "time.w1",
    ] {
        let err = model.gradient_check(&input, &weights, name, eps).unwrap();
        assert!(err <= 1e-4, "{name}: {err}");
    }
}

#[test]
fn cross_attention_block_contracts() {
    let (t, width, c) = (12, 16, 8);
    let mut r = rng(23, Stream::Test, 0);
    let params = CrossAttentionParams::<f64> {
        wq: normal_tensor(&mut r, &[width, width], 0.3),
        wk: normal_tensor(&mut r, &[c, width], 0.3),
        wv: normal_tensor(&mut r, &[c, width], 0.3),
        wo: normal_tensor(&mut r, &[width, width], 0.3),
        heads: 2,
    };
    let z = normal_tensor::<f64>(&mut r, &[t, width], 1.0);
    let single = MultiMotionEmbedding {
        tokens: normal_tensor(&mut r, &[1, 3, c], 1.0),
        char_of_key: vec![1; 3],
    };

    let zeroed =
        masked_cross_attention_block(&z, &single, &PairMask::zeros(t, 3), &params).unwrap();
    assert_eq!(zeroed, z);

    let masked = masked_cross_attention_block(&z, &single, &PairMask::ones(t, 3), &params).unwrap();
    let mut g = Graph::new();
    let q = g.constant(z.clone());
    let wq = g.constant(params.wq.clone());
    let qq = g.matmul(q, wq).unwrap();
    let kv = g.constant(single.tokens.clone().reshape(&[3, c]).unwrap());
    let wk = g.constant(params.wk.clone());
    let wv = g.constant(params.wv.clone());
    let k = g.matmul(kv, wk).unwrap();
    let v = g.matmul(kv, wv).unwrap();
    let a = g.attention(qq, k, v, 2, None).unwrap();
    let wo = g.constant(params.wo.clone());
    let o = g.matmul(a, wo).unwrap();
    let plain = g.add(q, o).unwrap();
    assert!(masked.max_abs_diff(g.value(plain)).unwrap() <= 1e-6);

    // Queries 0..6 belong to character 1, 6..12 to character 2.
    let two = MultiMotionEmbedding {
        tokens: normal_tensor(&mut r, &[1, 6, c], 1.0),
        char_of_key: vec![1, 1, 1, 2, 2, 2],
    };
    let mask = PairMask::from_fn(t, 6, |q, k| (q < 6) == (k < 3));
    let base = masked_cross_attention_block(&z, &two, &mask, &params).unwrap();
    let mut perturbed = two.clone();
    for v in &mut perturbed.tokens.data_mut()[3 * c..] {
        *v += 1.0;
    }
    let out = masked_cross_attention_block(&z, &perturbed, &mask, &params).unwrap();
    let n = 6 * width;
    let diff = |lo: usize, hi: usize| {
        base.data()[lo..hi]
            .iter()
            .zip(&out.data()[lo..hi])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    };
    assert!(diff(0, n) <= 1e-6);
    assert!(diff(n, 2 * n) > 1e-3);
}

fn isolation_trial(model: &Denoiser<f64>, seed: u64) -> (f64, f64) {
    let cfg = model.config();
    let (f, h, w) = (2, 8, 8);
    let z = latent::<f64>(&[f, h, w, 4], 100 + seed);
    let masks = two_face_masks(f, h, w);
    let tracks = [
        track(1, f, cfg.expression.dims, 200 + seed),
        track(2, f, cfg.expression.dims, 300 + seed),
    ];
    let em = embedding(model, &tracks);
    let mask = model.pair_mask(&masks, &em.char_of_key, z.shape()).unwrap();
    let mut perturbed = em.clone();
    let l = cfg.expression.tokens_per_character();
    let c = cfg.expression.width;
    let mut r = rng(24, Stream::Test, seed);
    let delta = normal_tensor::<f64>(&mut r, &[f * l * c], 1.0);
    for fr in 0..f {
        let start = (fr * 2 * l + l) * c;
        for (i, v) in perturbed.tokens.data_mut()[start..start + l * c]
            .iter_mut()
            .enumerate()
        {
            *v += delta.data()[fr * l * c + i];
        }
    }
    let run = |em: &MultiMotionEmbedding<f64>| {
        model
            .forward(&DenoiserInput {
                z_t: &z,
                t: 0.5,
                reference: None,
                condition: Condition::Embedding(em),
                mask: &mask,
                context: None,
            })
            .unwrap()
    };
    let (a, b) = (run(&em), run(&perturbed));
    let (mut outside_max, mut inside_sum, mut inside_n) = (0.0f64, 0.0, 0);
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        let col = (i / 4) % w;
        let d = (x - y).abs();
        if col >= 5 {
            inside_sum += d;
            inside_n += 1;
        } else {
            outside_max = outside_max.max(d);
        }
    }
    (outside_max, inside_sum / inside_n as f64)
}

#[test]
fn single_block_isolates_characters() {
    let model = Denoiser::<f64>::new(small_cfg(1, 1), 4).unwrap();
    for seed in 0..3 {
        let (outside, inside) = isolation_trial(&model, seed);
        assert!(outside <= 1e-6, "{outside}");
        assert!(inside > 1e-3, "{inside}");
    }
}

#[test]
fn disabling_mca_matches_full_frame_single_character() {
    let cfg = small_cfg(2, 2);
    let with = Denoiser::<f64>::new(cfg, 5).unwrap();
    let without = Denoiser::<f64>::from_params(
        DenoiserConfig {
            use_mca: false,
            ..cfg
        },
        with.params().clone(),
    )
    .unwrap();
    let z = latent::<f64>(&[2, 8, 8, 4], 6);
    let tracks = [track(9, 2, cfg.expression.dims, 7)];
    let full = FaceMaskTrack::new(9, Tensor::full(&[2, 8, 8], 1.0)).unwrap();
    let l = cfg.expression.tokens_per_character();
    let mask = with.pair_mask(&[full], &vec![9; l], z.shape()).unwrap();
    let run = |m: &Denoiser<f64>, mask: &PairMask| {
        m.forward(&DenoiserInput {
            z_t: &z,
            t: 0.7,
            reference: None,
            condition: Condition::Tracks(&tracks),
            mask,
            context: None,
        })
        .unwrap()
    };
    let a = run(&with, &mask);
    let b = run(&without, &PairMask::zeros(32, 2 * l));
    assert!(a.max_abs_diff(&b).unwrap() <= 1e-6);
}

#[test]
fn from_params_checks_layout() {
    let cfg = small_cfg(1, 2);
    let model = Denoiser::<f32>::new(cfg, 1).unwrap();
    let mut params = model.params().clone();
    params.insert("final.b", Tensor::zeros(&[3]));
    assert!(Denoiser::from_params(cfg, params).is_err());
    let deeper = DenoiserConfig { layers: 2, ..cfg };
    assert!(Denoiser::from_params(deeper, model.params().clone()).is_err());
}
