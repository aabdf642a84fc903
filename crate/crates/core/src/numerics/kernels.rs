//! Pure numeric kernels shared by the forward-only API and the autodiff graph.

use super::tensor::{gemm, Mat, Scalar, Tensor};
use crate::error::{Error, Result};

/// Binary query-by-key mask for attention; `true` lets query `r` attend key `c`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl PairMask {
    pub fn new(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::shape(format!(
                "pair mask {rows}x{cols} needs {} bits, got {}",
                rows * cols,
                bits.len()
            )));
        }
        Ok(PairMask { rows, cols, bits })
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        PairMask {
            rows,
            cols,
            bits: vec![true; rows * cols],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        PairMask {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                bits.push(f(r, c));
            }
        }
        PairMask { rows, cols, bits }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, on: bool) {
        self.bits[r * self.cols + c] = on;
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.bits[r * self.cols..(r + 1) * self.cols]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Row-wise softmax over the last dimension of `x`.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() == 0 || x.shape().last() == Some(&0) {
        return Err(Error::shape("softmax over empty row dimension"));
    }
    if !x.is_finite() {
        return Err(Error::Evaluation("softmax input is not finite".into()));
    }
    let (_, cols) = x.as_matrix_dims();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(cols) {
        softmax_in_place(row, None);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Softmax of one logit row. Masked-out entries take the fill logit; a row
/// with no enabled entry becomes all zeros.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T], mask: Option<&[bool]>) {
    match mask {
        None => {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            let inv = T::one() / sum;
            for v in row.iter_mut() {
                *v = *v * inv;
            }
        }
        Some(bits) => {
            if !bits.iter().any(|&b| b) {
                row.iter_mut().for_each(|v| *v = T::zero());
                return;
            }
            let fill = T::of(T::MASK_FILL);
            let mut max = T::neg_infinity();
            for (v, &on) in row.iter_mut().zip(bits) {
                if !on {
                    *v = fill;
                }
                max = max.max(*v);
            }
            // Underflows to exactly zero unless the row max is itself near the fill.
            let fill_weight = (fill - max).exp();
            let mut sum = T::zero();
            for (v, &on) in row.iter_mut().zip(bits) {
                *v = if on { (*v - max).exp() } else { fill_weight };
                sum = sum + *v;
            }
            let inv = T::one() / sum;
            for v in row.iter_mut() {
                *v = *v * inv;
            }
        }
    }
}

/// Shapes of a (batched, multi-head) attention call. `dq` and `dv` are the
/// full widths of the query/key and value tensors, split evenly across heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct AttnDims {
    pub batch: usize,
    pub tq: usize,
    pub tk: usize,
    pub dq: usize,
    pub dv: usize,
    pub heads: usize,
}

impl AttnDims {
    pub fn head_q(&self) -> usize {
        self.dq / self.heads
    }

    pub fn head_v(&self) -> usize {
        self.dv / self.heads
    }

    pub fn probs_len(&self) -> usize {
        self.batch * self.heads * self.tq * self.tk
    }
}

/// Forward pass of scaled-dot-product attention. Returns the output
/// `[batch, tq, dv]` and the attention weights `[batch, heads, tq, tk]`.
pub(crate) fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    dims: AttnDims,
    mask: Option<&PairMask>,
) -> (Vec<T>, Vec<T>) {
    let AttnDims {
        batch,
        tq,
        tk,
        dq,
        dv,
        heads,
    } = dims;
    let (hq, hv) = (dims.head_q(), dims.head_v());
    let scale = T::one() / T::of(hq as f64).sqrt();
    let mut probs = vec![T::zero(); dims.probs_len()];
    let mut out = vec![T::zero(); batch * tq * dv];
    for b in 0..batch {
        for h in 0..heads {
            let p_off = (b * heads + h) * tq * tk;
            let qm = Mat::block(b * tq * dq + h * hq, tq, hq, dq);
            let km = Mat::block(b * tk * dq + h * hq, tk, hq, dq);
            gemm(
                scale,
                q,
                qm,
                k,
                km.t(),
                T::zero(),
                &mut probs,
                Mat::dense(p_off, tq, tk),
            );
            for r in 0..tq {
                let row = &mut probs[p_off + r * tk..p_off + (r + 1) * tk];
                softmax_in_place(row, mask.map(|m| m.row(r)));
            }
            let vm = Mat::block(b * tk * dv + h * hv, tk, hv, dv);
            let om = Mat::block(b * tq * dv + h * hv, tq, hv, dv);
            gemm(
                T::one(),
                &probs,
                Mat::dense(p_off, tq, tk),
                v,
                vm,
                T::zero(),
                &mut out,
                om,
            );
        }
    }
    (out, probs)
}

/// Accumulates attention input gradients into `gq`, `gk`, `gv` (any may be `None`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    gout: &[T],
    dims: AttnDims,
    mut gq: Option<&mut [T]>,
    mut gk: Option<&mut [T]>,
    mut gv: Option<&mut [T]>,
) {
    let AttnDims {
        batch,
        tq,
        tk,
        dq,
        dv,
        heads,
    } = dims;
    let (hq, hv) = (dims.head_q(), dims.head_v());
    let scale = T::one() / T::of(hq as f64).sqrt();
    let mut dp = vec![T::zero(); tq * tk];
    for b in 0..batch {
        for h in 0..heads {
            let p_off = (b * heads + h) * tq * tk;
            let pm = Mat::dense(p_off, tq, tk);
            let gom = Mat::block(b * tq * dv + h * hv, tq, hv, dv);
            let vm = Mat::block(b * tk * dv + h * hv, tk, hv, dv);
            if let Some(gv) = gv.as_deref_mut() {
                gemm(T::one(), probs, pm.t(), gout, gom, T::one(), gv, vm);
            }
            if gq.is_none() && gk.is_none() {
                continue;
            }
            gemm(
                T::one(),
                gout,
                gom,
                v,
                vm.t(),
                T::zero(),
                &mut dp,
                Mat::dense(0, tq, tk),
            );
            for r in 0..tq {
                let p_row = &probs[p_off + r * tk..p_off + (r + 1) * tk];
                let d_row = &mut dp[r * tk..(r + 1) * tk];
                let dot = p_row
                    .iter()
                    .zip(d_row.iter())
                    .fold(T::zero(), |acc, (&p, &d)| acc + p * d);
                for (d, &p) in d_row.iter_mut().zip(p_row) {
                    *d = p * (*d - dot) * scale;
                }
            }
            let qm = Mat::block(b * tq * dq + h * hq, tq, hq, dq);
            let km = Mat::block(b * tk * dq + h * hq, tk, hq, dq);
            let dsm = Mat::dense(0, tq, tk);
            if let Some(gq) = gq.as_deref_mut() {
                gemm(T::one(), &dp, dsm, k, km, T::one(), gq, qm);
            }
            if let Some(gk) = gk.as_deref_mut() {
                gemm(T::one(), &dp, dsm.t(), q, qm, T::one(), gk, km);
            }
        }
    }
}

/// Single-head masked scaled-dot-product attention.
///
/// Logits `Q Kᵀ / √d` take the value −1e9 wherever the mask bit is 0; a query
/// row whose mask is entirely 0 produces an all-zero output row.
pub fn masked_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &PairMask,
) -> Result<Tensor<T>> {
    let dims = check_attention_dims(q, k, v, 1, Some(mask))?;
    let (out, _) = attention_forward(q.data(), k.data(), v.data(), dims, Some(mask));
    let out = Tensor::from_parts(vec![dims.tq, dims.dv], out);
    if !out.is_finite() {
        return Err(Error::Evaluation(
            "attention produced non-finite values".into(),
        ));
    }
    Ok(out)
}

/// Validates `q [.., tq, dq]`, `k [.., tk, dq]`, `v [.., tk, dv]` with a shared
/// leading batch extent (absent means batch 1).
pub(crate) fn check_attention_dims<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    mask: Option<&PairMask>,
) -> Result<AttnDims> {
    let split = |t: &Tensor<T>, name: &str| -> Result<(usize, usize, usize)> {
        match *t.shape() {
            [r, c] => Ok((1, r, c)),
            [b, r, c] => Ok((b, r, c)),
            _ => Err(Error::shape(format!(
                "attention {name} must be rank 2 or 3, got {:?}",
                t.shape()
            ))),
        }
    };
    let (bq, tq, dq) = split(q, "query")?;
    let (bk, tk, dk) = split(k, "key")?;
    let (bv, tv, dv) = split(v, "value")?;
    if bq != bk || bq != bv {
        return Err(Error::shape(format!(
            "attention batch mismatch {bq}/{bk}/{bv}"
        )));
    }
    if dq != dk {
        return Err(Error::shape(format!("query width {dq} != key width {dk}")));
    }
    if tk != tv {
        return Err(Error::shape(format!("{tk} keys but {tv} values")));
    }
    if heads == 0 || dq % heads != 0 || dv % heads != 0 {
        return Err(Error::shape(format!(
            "widths {dq}/{dv} not divisible by {heads} heads"
        )));
    }
    if let Some(m) = mask {
        if m.rows() != tq || m.cols() != tk {
            return Err(Error::shape(format!(
                "mask {}x{} does not match attention {tq}x{tk}",
                m.rows(),
                m.cols()
            )));
        }
    }
    Ok(AttnDims {
        batch: bq,
        tq,
        tk,
        dq,
        dv,
        heads,
    })
}

/// Align-corners source coordinate lookup for one axis: `(i0, frac)` such
/// that the sample lies at `i0 + frac`; exact grid hits get `frac == 0`.
pub(crate) fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, f64)> {
    (0..n_out)
        .map(|i| {
            if n_in == 1 || n_out == 1 {
                return (0, 0.0);
            }
            let src = (i * (n_in - 1)) as f64 / (n_out - 1) as f64;
            let i0 = (src.floor() as usize).min(n_in - 1);
            (i0, src - i0 as f64)
        })
        .collect()
}

fn volume_dims<T: Scalar>(vol: &Tensor<T>) -> Result<[usize; 3]> {
    match *vol.shape() {
        [f, h, w] => Ok([f, h, w]),
        _ => Err(Error::shape(format!(
            "trilinear resample needs a rank-3 volume, got {:?}",
            vol.shape()
        ))),
    }
}

/// Trilinear resampling of an `f × h × w` volume with align-corners sampling.
pub fn trilinear_resample<T: Scalar>(vol: &Tensor<T>, out_dims: [usize; 3]) -> Result<Tensor<T>> {
    let dims = volume_dims(vol)?;
    if out_dims.contains(&0) {
        return Err(Error::shape(format!("zero output extent {out_dims:?}")));
    }
    let out = trilinear_apply(vol.data(), dims, out_dims);
    Ok(Tensor::from_parts(out_dims.to_vec(), out))
}

pub(crate) fn trilinear_apply<T: Scalar>(src: &[T], dims: [usize; 3], out: [usize; 3]) -> Vec<T> {
    let [f, h, w] = dims;
    let tf = axis_taps(f, out[0]);
    let th = axis_taps(h, out[1]);
    let tw = axis_taps(w, out[2]);
    let at = |a: usize, b: usize, c: usize| src[(a * h + b) * w + c];
    let next = |i: usize, n: usize| (i + 1).min(n - 1);
    let mut res = Vec::with_capacity(out.iter().product());
    for &(f0, ff) in &tf {
        let f1 = next(f0, f);
        let ff = T::of(ff);
        for &(y0, fy) in &th {
            let y1 = next(y0, h);
            let fy = T::of(fy);
            for &(x0, fx) in &tw {
                let x1 = next(x0, w);
                let fx = T::of(fx);
                let lerp = |a: T, b: T, t: T| a + t * (b - a);
                let c00 = lerp(at(f0, y0, x0), at(f0, y0, x1), fx);
                let c01 = lerp(at(f0, y1, x0), at(f0, y1, x1), fx);
                let c10 = lerp(at(f1, y0, x0), at(f1, y0, x1), fx);
                let c11 = lerp(at(f1, y1, x0), at(f1, y1, x1), fx);
                let c0 = lerp(c00, c01, fy);
                let c1 = lerp(c10, c11, fy);
                res.push(lerp(c0, c1, ff));
            }
        }
    }
    res
}

/// Adjoint of [`trilinear_apply`]: scatters output gradients onto source samples.
pub(crate) fn trilinear_adjoint<T: Scalar>(
    gout: &[T],
    dims: [usize; 3],
    out: [usize; 3],
    gsrc: &mut [T],
) {
    let [f, h, w] = dims;
    let tf = axis_taps(f, out[0]);
    let th = axis_taps(h, out[1]);
    let tw = axis_taps(w, out[2]);
    let next = |i: usize, n: usize| (i + 1).min(n - 1);
    let mut o = 0;
    for &(f0, ff) in &tf {
        let f1 = next(f0, f);
        for &(y0, fy) in &th {
            let y1 = next(y0, h);
            for &(x0, fx) in &tw {
                let x1 = next(x0, w);
                let g = gout[o];
                o += 1;
                for (fi, wf) in [(f0, 1.0 - ff), (f1, ff)] {
                    for (yi, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                        for (xi, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                            let wgt = wf * wy * wx;
                            if wgt != 0.0 {
                                let idx = (fi * h + yi) * w + xi;
                                gsrc[idx] = gsrc[idx] + g * T::of(wgt);
                            }
                        }
                    }
                }
            }
        }
    }
}
