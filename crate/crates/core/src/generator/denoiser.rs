//! Toy diffusion transformer predicting flow velocities for latent clips.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::expression::{
    key_layout, multi_motion_graph, null_tokens_graph, ExpressionConfig, ImplicitExpressionTrack,
    MultiMotionEmbedding,
};
use crate::numerics::{finite_diff_grad_check, Graph, PairMask, Scalar, Tensor, Var};
use crate::params::{Bound, Init, ParamSet};
use crate::seed::{rng, Stream};

use super::mask::{
    build_latent_mask, build_pair_mask, frame_pair_mask, FaceMaskTrack, QueryLayout,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    /// Spatial patch edge in latent cells.
    pub patch: usize,
    pub latent_channels: usize,
    /// Rows of the learned frame position table.
    pub max_frames: usize,
    /// Rows of the learned row/column position tables.
    pub max_grid: usize,
    pub use_mca: bool,
    pub expression: ExpressionConfig,
    /// Width of optional context tokens; 0 disables the context branch.
    pub context_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            layers: 4,
            width: 128,
            heads: 4,
            patch: 1,
            latent_channels: 4,
            max_frames: 16,
            max_grid: 16,
            use_mca: true,
            expression: ExpressionConfig::default(),
            context_dim: 0,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        self.expression.validate()?;
        let positive = [
            ("layers", self.layers),
            ("width", self.width),
            ("heads", self.heads),
            ("patch", self.patch),
            ("latent_channels", self.latent_channels),
            ("max_frames", self.max_frames),
            ("max_grid", self.max_grid),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    pub fn patch_features(&self) -> usize {
        self.patch * self.patch * self.latent_channels
    }

    /// Token grid for a latent of shape `[f, h, w, C]`.
    pub fn grid(&self, latent_shape: &[usize]) -> Result<TokenGrid> {
        let &[f, h, w, c] = latent_shape else {
            return Err(Error::shape(format!(
                "latent must be [f, h, w, C], got {latent_shape:?}"
            )));
        };
        let p = self.patch;
        if c != self.latent_channels || h % p != 0 || w % p != 0 {
            return Err(Error::shape(format!(
                "latent {latent_shape:?} incompatible with {} channels and patch {p}",
                self.latent_channels
            )));
        }
        let (gh, gw) = (h / p, w / p);
        if f > self.max_frames || gh > self.max_grid || gw > self.max_grid {
            return Err(Error::shape(format!(
                "token grid {f}x{gh}x{gw} exceeds position tables {}x{}x{}",
                self.max_frames, self.max_grid, self.max_grid
            )));
        }
        Ok(TokenGrid {
            frames: f,
            gh,
            gw,
            patch: p,
            channels: c,
        })
    }
}

/// Latent tokenization: one token per `patch x patch` cell block per frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub frames: usize,
    pub gh: usize,
    pub gw: usize,
    pub patch: usize,
    pub channels: usize,
}

impl TokenGrid {
    pub fn tokens(&self) -> usize {
        self.frames * self.gh * self.gw
    }

    pub fn features(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn layout(&self) -> QueryLayout {
        QueryLayout::from([self.frames, self.gh, self.gw])
    }

    /// Source offset in `[f, h, w, C]` of every `(token, feature)` pair.
    pub fn patchify_index(&self) -> Vec<usize> {
        let (p, c) = (self.patch, self.channels);
        let (h, w) = (self.gh * p, self.gw * p);
        let mut idx = Vec::with_capacity(self.tokens() * self.features());
        for fr in 0..self.frames {
            for ty in 0..self.gh {
                for tx in 0..self.gw {
                    for py in 0..p {
                        for px in 0..p {
                            let base = ((fr * h + ty * p + py) * w + tx * p + px) * c;
                            idx.extend(base..base + c);
                        }
                    }
                }
            }
        }
        idx
    }

    /// Inverse permutation of [`Self::patchify_index`].
    pub fn unpatchify_index(&self) -> Vec<usize> {
        let fwd = self.patchify_index();
        let mut inv = vec![0; fwd.len()];
        for (i, &src) in fwd.iter().enumerate() {
            inv[src] = i;
        }
        inv
    }
}

/// Motion conditioning for one forward pass.
#[derive(Clone, Copy, Debug)]
pub enum Condition<'a, T: Scalar> {
    Tracks(&'a [ImplicitExpressionTrack]),
    Embedding(&'a MultiMotionEmbedding<T>),
    /// The learned null condition for `characters` characters.
    Null {
        characters: usize,
    },
}

#[derive(Clone, Copy, Debug)]
pub struct DenoiserInput<'a, T: Scalar> {
    /// Noised latent `[f, h, w, C]`.
    pub z_t: &'a Tensor<T>,
    pub t: f64,
    /// Clean latent of the source frame, `[h, w, C]`.
    pub reference: Option<&'a Tensor<T>>,
    pub condition: Condition<'a, T>,
    /// Token-by-key mask; ignored when masked cross-attention is disabled.
    pub mask: &'a PairMask,
    /// Context tokens `[n, context_dim]`.
    pub context: Option<&'a Tensor<T>>,
}

/// Graph-level inputs of [`Denoiser::forward_graph`].
#[derive(Clone, Copy, Debug)]
pub(crate) struct GraphInput<'a> {
    pub z_t: Var,
    pub t: f64,
    pub reference: Option<Var>,
    /// Motion tokens `[f, S, c]`.
    pub motion: Var,
    pub mask: &'a PairMask,
    pub context: Option<Var>,
}

/// Cross-attention projections of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttentionParams<T = f32> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub heads: usize,
}

#[derive(Clone, Copy)]
struct CrossVars {
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    heads: usize,
}

/// `OutProj(attention(query · Wq, kv · Wk, kv · Wv, mask))` with `kv [S, c]`.
fn cross_attention(
    g: &mut Graph<impl Scalar>,
    query: Var,
    kv: Var,
    mask: Option<&PairMask>,
    p: CrossVars,
) -> Result<Var> {
    let q = g.matmul(query, p.wq)?;
    let k = g.matmul(kv, p.wk)?;
    let v = g.matmul(kv, p.wv)?;
    let a = g.attention(q, k, v, p.heads, mask)?;
    g.matmul(a, p.wo)
}

/// `Z + OutProj(masked_attention(Z · Wq, e · Wk, e · Wv, M))` over the
/// flattened `[f * N * l, c]` motion keys.
pub fn masked_cross_attention_block<T: Scalar>(
    z: &Tensor<T>,
    em: &MultiMotionEmbedding<T>,
    mask: &PairMask,
    params: &CrossAttentionParams<T>,
) -> Result<Tensor<T>> {
    let s = em.tokens.shape();
    if z.rank() != 2 || mask.rows() != z.shape()[0] || mask.cols() != s[0] * s[1] {
        return Err(Error::shape(format!(
            "cross-attention: Z {:?}, keys {:?}, mask {}x{}",
            z.shape(),
            s,
            mask.rows(),
            mask.cols()
        )));
    }
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let kv = g.constant(em.tokens.clone().reshape(&[s[0] * s[1], s[2]])?);
    let p = CrossVars {
        wq: g.constant(params.wq.clone()),
        wk: g.constant(params.wk.clone()),
        wv: g.constant(params.wv.clone()),
        wo: g.constant(params.wo.clone()),
        heads: params.heads,
    };
    let a = cross_attention(&mut g, zv, kv, Some(mask), p)?;
    let out = g.add(zv, a)?;
    Ok(g.value(out).clone())
}

/// A denoiser configuration together with its parameters, including the
/// motion encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser<T: Scalar = f32> {
    cfg: DenoiserConfig,
    params: ParamSet<T>,
}

impl Denoiser<f64> {
    /// Maximum relative finite-difference error of `sum(forward(input) * weights)`
    /// with respect to `wrt`, which is `"z_t"` or a parameter name.
    pub fn gradient_check(
        &self,
        input: &DenoiserInput<'_, f64>,
        weights: &Tensor<f64>,
        wrt: &str,
        eps: f64,
    ) -> Result<f64> {
        weights.expect_same_shape(input.z_t)?;
        let x = if wrt == "z_t" {
            input.z_t.clone()
        } else {
            self.params.get(wrt)?.clone()
        };
        let frames = input.z_t.shape().first().copied().unwrap_or(0);
        let loss = |g: &mut Graph<f64>, v: Var| -> Result<Var> {
            let mut b = self.params.bind(g, false);
            let z_t = if wrt == "z_t" {
                v
            } else {
                b.rebind(wrt, v)?;
                g.constant(input.z_t.clone())
            };
            let motion = self.condition_graph(g, &b, input.condition, frames)?;
            let gi = GraphInput {
                z_t,
                t: input.t,
                reference: input.reference.map(|r| g.constant(r.clone())),
                motion,
                mask: input.mask,
                context: input.context.map(|c| g.constant(c.clone())),
            };
            let out = self.forward_graph(g, &b, &gi)?;
            let w = g.constant(weights.clone());
            let p = g.mul(out, w)?;
            g.sum(p)
        };
        finite_diff_grad_check(loss, &x, eps)
    }
}

fn init_params<T: Scalar>(cfg: &DenoiserConfig, seed: u64) -> ParamSet<T> {
    let mut set = ParamSet::new();
    let mut r = rng(seed, Stream::Init, 0);
    let mut init = Init {
        set: &mut set,
        rng: &mut r,
    };
    let (d, f, c) = (cfg.width, cfg.patch_features(), cfg.expression.width);
    init.weight("embed.patch_w".into(), f, d, 1.0);
    init.zeros("embed.patch_b".into(), &[d]);
    init.weight("embed.ref_w".into(), f, d, 1.0);
    init.normal("pos.frame".into(), &[cfg.max_frames, d], 0.5);
    init.normal("pos.y".into(), &[cfg.max_grid, d], 0.5);
    init.normal("pos.x".into(), &[cfg.max_grid, d], 0.5);
    init.weight("time.w1".into(), d, d, 1.0);
    init.zeros("time.b1".into(), &[d]);
    init.weight("time.w2".into(), d, d, 1.0);
    init.zeros("time.b2".into(), &[d]);
    for i in 0..cfg.layers {
        let p = |n: &str| format!("blocks.{i}.{n}");
        init.weight(p("ada_w"), d, 6 * d, 0.5);
        init.zeros(p("ada_b"), &[6 * d]);
        for w in [
            "attn.wq", "attn.wk", "attn.wv", "attn.wo", "cross.wq", "cross.wo",
        ] {
            init.weight(p(w), d, d, 1.0);
        }
        init.weight(p("cross.wk"), c, d, 1.0);
        init.weight(p("cross.wv"), c, d, 1.0);
        init.weight(p("mlp.w1"), d, 4 * d, 1.0);
        init.zeros(p("mlp.b1"), &[4 * d]);
        init.weight(p("mlp.w2"), 4 * d, d, 1.0);
        init.zeros(p("mlp.b2"), &[d]);
        if cfg.context_dim > 0 {
            init.weight(p("ctx.wq"), d, d, 1.0);
            init.weight(p("ctx.wk"), cfg.context_dim, d, 1.0);
            init.weight(p("ctx.wv"), cfg.context_dim, d, 1.0);
            init.weight(p("ctx.wo"), d, d, 1.0);
        }
    }
    init.weight("final.ada_w".into(), d, 2 * d, 0.5);
    init.zeros("final.ada_b".into(), &[2 * d]);
    init.weight("final.w".into(), d, f, 1.0);
    init.zeros("final.b".into(), &[f]);
    cfg.expression.init_params(&mut init);
    set
}

/// Sinusoidal features of `t * 1000`, half cosines then half sines.
fn timestep_features(t: f64, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        let a = t * 1000.0 * freq;
        out[i] = a.cos();
        out[half + i] = a.sin();
    }
    out
}

/// `LN(x) * (1 + scale) + shift`.
fn modulate(g: &mut Graph<impl Scalar>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let h = g.layer_norm(x)?;
    let s1 = g.add_scalar(scale, 1.0)?;
    let h = g.mul_row(h, s1)?;
    g.add_row(h, shift)
}

fn table_rows(rows: impl Iterator<Item = usize>, d: usize) -> Arc<Vec<usize>> {
    Arc::new(rows.flat_map(|r| r * d..(r + 1) * d).collect())
}

impl<T: Scalar> Denoiser<T> {
    /// Seeded random parameters.
    pub fn new(cfg: DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Denoiser {
            cfg,
            params: init_params(&cfg, seed),
        })
    }

    /// Wraps existing parameters after checking names and shapes.
    pub fn from_params(cfg: DenoiserConfig, params: ParamSet<T>) -> Result<Self> {
        cfg.validate()?;
        init_params::<T>(&cfg, 0).expect_layout(&params)?;
        Ok(Denoiser { cfg, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet<T> {
        self.params
    }

    pub fn cast<U: Scalar>(&self) -> Denoiser<U> {
        Denoiser {
            cfg: self.cfg,
            params: self.params.cast(),
        }
    }

    /// Pair mask between the token grid of a `latent_shape` latent and the
    /// motion keys of `char_of_key` characters per frame.
    pub fn pair_mask(
        &self,
        face_masks: &[FaceMaskTrack],
        char_of_key: &[u32],
        latent_shape: &[usize],
    ) -> Result<PairMask> {
        let grid = self.cfg.grid(latent_shape)?;
        let mset = build_latent_mask(face_masks, grid.layout().dims())?;
        let (chars, frames) = key_layout(char_of_key, grid.frames);
        build_pair_mask(&mset, &chars, &frames, grid.layout())
    }

    /// Motion tokens `[f, S, c]` for `cond` inside `g`.
    pub(crate) fn condition_graph(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        cond: Condition<'_, T>,
        frames: usize,
    ) -> Result<Var> {
        let tokens = match cond {
            Condition::Tracks(tracks) => multi_motion_graph(g, b, &self.cfg.expression, tracks)?.0,
            Condition::Embedding(em) => g.constant(em.tokens.clone()),
            Condition::Null { characters } => {
                if characters == 0 {
                    return Err(Error::shape("null condition needs at least one character"));
                }
                null_tokens_graph(g, b, frames, characters)?
            }
        };
        let s = g.shape(tokens);
        if s[0] != frames || s[2] != self.cfg.expression.width {
            return Err(Error::shape(format!(
                "motion tokens {s:?} for {frames} frames of width {}",
                self.cfg.expression.width
            )));
        }
        Ok(tokens)
    }

    /// Velocity prediction with the same shape as `input.z_t`.
    pub fn forward(&self, input: &DenoiserInput<'_, T>) -> Result<Tensor<T>> {
        if !input.z_t.is_finite() || !input.t.is_finite() {
            return Err(Error::Evaluation("non-finite denoiser input".into()));
        }
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let frames = input.z_t.shape().first().copied().unwrap_or(0);
        let motion = self.condition_graph(&mut g, &b, input.condition, frames)?;
        let gi = GraphInput {
            z_t: g.constant(input.z_t.clone()),
            t: input.t,
            reference: input.reference.map(|r| g.constant(r.clone())),
            motion,
            mask: input.mask,
            context: input.context.map(|c| g.constant(c.clone())),
        };
        let out = self.forward_graph(&mut g, &b, &gi)?;
        Ok(g.value(out).clone())
    }

    pub(crate) fn forward_graph(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        inp: &GraphInput<'_>,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let grid = cfg.grid(g.shape(inp.z_t))?;
        let (d, n_tok, feats) = (cfg.width, grid.tokens(), grid.features());
        let hw = grid.gh * grid.gw;

        let patch_idx = Arc::new(grid.patchify_index());
        let tokens = g.gather(inp.z_t, patch_idx, vec![n_tok, feats])?;
        let mut x = g.linear(
            tokens,
            b.get("embed.patch_w")?,
            Some(b.get("embed.patch_b")?),
        )?;

        if let Some(r) = inp.reference {
            let ref_grid = TokenGrid { frames: 1, ..grid };
            if g.shape(r) != [grid.gh * grid.patch, grid.gw * grid.patch, grid.channels] {
                return Err(Error::shape(format!("reference latent {:?}", g.shape(r))));
            }
            let rt = g.gather(r, Arc::new(ref_grid.patchify_index()), vec![hw, feats])?;
            let re = g.matmul(rt, b.get("embed.ref_w")?)?;
            let re = g.tile(re, grid.frames)?;
            let re = g.reshape(re, &[n_tok, d])?;
            x = g.add(x, re)?;
        }

        let layout = grid.layout();
        let pos = [
            (
                "pos.frame",
                table_rows((0..n_tok).map(|q| layout.position(q).0), d),
            ),
            (
                "pos.y",
                table_rows((0..n_tok).map(|q| layout.position(q).1), d),
            ),
            (
                "pos.x",
                table_rows((0..n_tok).map(|q| layout.position(q).2), d),
            ),
        ];
        for (name, idx) in pos {
            let p = g.gather(b.get(name)?, idx, vec![n_tok, d])?;
            x = g.add(x, p)?;
        }

        let tf = Tensor::from_fn(&[1, d], |i| T::of(timestep_features(inp.t, d)[i]));
        let tf = g.constant(tf);
        let h = g.linear(tf, b.get("time.w1")?, Some(b.get("time.b1")?))?;
        let h = g.silu(h)?;
        let temb = g.linear(h, b.get("time.w2")?, Some(b.get("time.b2")?))?;
        let cvec = g.silu(temb)?;

        let ms = g.shape(inp.motion).to_vec();
        if ms.len() != 3 || ms[0] != grid.frames {
            return Err(Error::shape(format!(
                "motion tokens {ms:?} for {} frames",
                grid.frames
            )));
        }
        let n_keys = ms[0] * ms[1];
        let kv = g.reshape(inp.motion, &[n_keys, ms[2]])?;
        let frame_mask;
        let mask = if cfg.use_mca {
            inp.mask
        } else {
            let frame_of_key: Vec<usize> = (0..n_keys).map(|k| k / ms[1]).collect();
            frame_mask = frame_pair_mask(&frame_of_key, layout);
            &frame_mask
        };
        if mask.rows() != n_tok || mask.cols() != n_keys {
            return Err(Error::shape(format!(
                "pair mask {}x{} for {n_tok} tokens and {n_keys} keys",
                mask.rows(),
                mask.cols()
            )));
        }

        for i in 0..cfg.layers {
            let p = |n: &str| b.get(&format!("blocks.{i}.{n}"));
            let m = g.linear(cvec, p("ada_w")?, Some(p("ada_b")?))?;
            let mut chunk = Vec::with_capacity(6);
            for j in 0..6 {
                chunk.push(g.slice_last(m, j * d, d)?);
            }

            let h = modulate(g, x, chunk[0], chunk[1])?;
            let q = g.matmul(h, p("attn.wq")?)?;
            let k = g.matmul(h, p("attn.wk")?)?;
            let v = g.matmul(h, p("attn.wv")?)?;
            let a = g.attention(q, k, v, cfg.heads, None)?;
            let a = g.matmul(a, p("attn.wo")?)?;
            let a = g.mul_row(a, chunk[2])?;
            x = g.add(x, a)?;

            let h = g.layer_norm(x)?;
            let cross = CrossVars {
                wq: p("cross.wq")?,
                wk: p("cross.wk")?,
                wv: p("cross.wv")?,
                wo: p("cross.wo")?,
                heads: cfg.heads,
            };
            let a = cross_attention(g, h, kv, Some(mask), cross)?;
            x = g.add(x, a)?;

            if let (true, Some(ctx)) = (cfg.context_dim > 0, inp.context) {
                let h = g.layer_norm(x)?;
                let vars = CrossVars {
                    wq: p("ctx.wq")?,
                    wk: p("ctx.wk")?,
                    wv: p("ctx.wv")?,
                    wo: p("ctx.wo")?,
                    heads: cfg.heads,
                };
                let a = cross_attention(g, h, ctx, None, vars)?;
                x = g.add(x, a)?;
            }

            let h = modulate(g, x, chunk[3], chunk[4])?;
            let h = g.linear(h, p("mlp.w1")?, Some(p("mlp.b1")?))?;
            let h = g.gelu(h)?;
            let h = g.linear(h, p("mlp.w2")?, Some(p("mlp.b2")?))?;
            let h = g.mul_row(h, chunk[5])?;
            x = g.add(x, h)?;
        }

        let m = g.linear(cvec, b.get("final.ada_w")?, Some(b.get("final.ada_b")?))?;
        let shift = g.slice_last(m, 0, d)?;
        let scale = g.slice_last(m, d, d)?;
        let h = modulate(g, x, shift, scale)?;
        let out = g.linear(h, b.get("final.w")?, Some(b.get("final.b")?))?;
        let shape = g.shape(inp.z_t).to_vec();
        g.gather(out, Arc::new(grid.unpatchify_index()), shape)
    }
}
