//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation eagerly: values are computed as nodes
//! are pushed, and [`Graph::backward`] walks the tape in reverse.

use std::sync::Arc;

use super::kernels::{
    attention_backward, attention_forward, check_attention_dims, trilinear_adjoint, AttnDims,
    PairMask,
};
use super::tensor::{gemm, Mat, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    Gelu(Var),
    Silu(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        dims: AttnDims,
        probs: Vec<T>,
    },
    Gather {
        x: Var,
        index: Arc<Vec<usize>>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Trilinear {
        x: Var,
        dims: [usize; 3],
    },
    Sum(Var),
    Mse(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, or `None` if `v` does not
    /// influence the loss through differentiable paths.
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    /// Like [`Gradients::get`] but yields zeros for unreached nodes.
    pub fn get_or_zero(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    /// A leaf that receives gradients.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Evaluation(format!(
                "{name} produced non-finite values"
            )));
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    fn row_operand(&self, x: Var, r: Var, what: &str) -> Result<usize> {
        let cols = *self.shape(x).last().unwrap_or(&0);
        if self.value(r).len() != cols {
            return Err(Error::shape(format!(
                "{what}: row of {} elements against last dim {cols}",
                self.value(r).len()
            )));
        }
        Ok(cols)
    }

    /// `x + r` with `r` broadcast over every row of `x`'s last dimension.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let cols = self.row_operand(x, r, "add_row")?;
        let row = self.value(r).data();
        let mut out = self.value(x).data().to_vec();
        for chunk in out.chunks_mut(cols) {
            for (o, &b) in chunk.iter_mut().zip(row) {
                *o = *o + b;
            }
        }
        let v = Tensor::from_parts(self.shape(x).to_vec(), out);
        self.push("add_row", v, Op::AddRow(x, r), &[x, r])
    }

    /// `x * r` with `r` broadcast over every row.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let cols = self.row_operand(x, r, "mul_row")?;
        let row = self.value(r).data();
        let mut out = self.value(x).data().to_vec();
        for chunk in out.chunks_mut(cols) {
            for (o, &b) in chunk.iter_mut().zip(row) {
                *o = *o * b;
            }
        }
        let v = Tensor::from_parts(self.shape(x).to_vec(), out);
        self.push("mul_row", v, Op::MulRow(x, r), &[x, r])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let v = self.value(x).map(|a| a * c);
        self.push("scale", v, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let v = self.value(x).map(|a| a + c);
        self.push("add_scalar", v, Op::AddScalar(x), &[x])
    }

    /// `a [.., k] · b [k, n] → [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).as_matrix_dims();
        let bs = self.shape(b);
        if bs.len() != 2 || bs[0] != k {
            return Err(Error::shape(format!(
                "matmul {:?} x {:?}",
                self.shape(a),
                bs
            )));
        }
        let n = bs[1];
        let mut out = vec![T::zero(); m * n];
        gemm(
            T::one(),
            self.value(a).data(),
            Mat::dense(0, m, k),
            self.value(b).data(),
            Mat::dense(0, k, n),
            T::zero(),
            &mut out,
            Mat::dense(0, m, n),
        );
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().expect("rank >= 1") = n;
        self.push(
            "matmul",
            Tensor::from_parts(shape, out),
            Op::MatMul(a, b),
            &[a, b],
        )
    }

    /// `x · w + b` over the last dimension.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let c = T::of(GELU_C);
        let k = T::of(0.044715);
        let half = T::of(0.5);
        let v = self
            .value(x)
            .map(|a| half * a * (T::one() + (c * (a + k * a * a * a)).tanh()));
        self.push("gelu", v, Op::Gelu(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| a / (T::one() + (-a).exp()));
        self.push("silu", v, Op::Silu(x), &[x])
    }

    /// Normalizes over the last dimension (no affine parameters).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).as_matrix_dims();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        let mut inv_std = Vec::with_capacity(rows);
        let n = T::of(cols as f64);
        let eps = T::of(LN_EPS);
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().fold(T::zero(), |a, b| a + b) / n;
            let var = row
                .iter()
                .fold(T::zero(), |a, &b| a + (b - mean) * (b - mean))
                / n;
            let is = T::one() / (var + eps).sqrt();
            for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let v = Tensor::from_parts(self.shape(x).to_vec(), out);
        self.push("layer_norm", v, Op::LayerNorm { x, inv_std }, &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = super::kernels::softmax_rows(self.value(x))?;
        self.push("softmax", v, Op::Softmax(x), &[x])
    }

    /// Multi-head scaled-dot-product attention over `q [B?, tq, dq]`,
    /// `k [B?, tk, dq]`, `v [B?, tk, dv]`, with an optional mask shared by
    /// every batch entry and head.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&PairMask>,
    ) -> Result<Var> {
        let dims = check_attention_dims(self.value(q), self.value(k), self.value(v), heads, mask)?;
        let (out, probs) = attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            dims,
            mask,
        );
        let mut shape = self.shape(q).to_vec();
        *shape.last_mut().expect("rank >= 2") = dims.dv;
        let value = Tensor::from_parts(shape, out);
        self.push(
            "attention",
            value,
            Op::Attention {
                q,
                k,
                v,
                dims,
                probs,
            },
            &[q, k, v],
        )
    }

    /// `out[i] = x[index[i]]` reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, shape: Vec<usize>) -> Result<Var> {
        let n = self.value(x).len();
        if index.iter().any(|&i| i >= n) {
            return Err(Error::shape("gather index out of range"));
        }
        if shape.iter().product::<usize>() != index.len() || shape.contains(&0) {
            return Err(Error::shape(format!(
                "gather shape {shape:?} does not hold {} elements",
                index.len()
            )));
        }
        let src = self.value(x).data();
        let out: Vec<T> = index.iter().map(|&i| src[i]).collect();
        self.push(
            "gather",
            Tensor::from_parts(shape, out),
            Op::Gather { x, index },
            &[x],
        )
    }

    /// Columns `[start, start + len)` of the last dimension.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).as_matrix_dims();
        if start + len > cols || len == 0 {
            return Err(Error::shape(format!(
                "slice [{start}, {}) of width {cols}",
                start + len
            )));
        }
        let index: Vec<usize> = (0..rows)
            .flat_map(|r| (start..start + len).map(move |c| r * cols + c))
            .collect();
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().expect("rank >= 1") = len;
        self.gather(x, Arc::new(index), shape)
    }

    /// Repeats `x` as a whole `times` times along a new leading axis.
    pub fn tile(&mut self, x: Var, times: usize) -> Result<Var> {
        let n = self.value(x).len();
        let index: Vec<usize> = (0..times).flat_map(|_| 0..n).collect();
        let mut shape = vec![times];
        shape.extend_from_slice(self.shape(x));
        self.gather(x, Arc::new(index), shape)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!(
                "concat axis {axis} for rank {}",
                base.len()
            )));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(format!(
                    "concat along {axis}: {:?} vs {:?}",
                    s, base
                )));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let width = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * width..(o + 1) * width]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            "concat",
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        self.push("reshape", v, Op::Reshape(x), &[x])
    }

    /// Align-corners trilinear resampling of a rank-3 volume.
    pub fn trilinear(&mut self, x: Var, out_dims: [usize; 3]) -> Result<Var> {
        let v = super::kernels::trilinear_resample(self.value(x), out_dims)?;
        let s = self.shape(x);
        let dims = [s[0], s[1], s[2]];
        self.push("trilinear", v, Op::Trilinear { x, dims }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self
            .value(x)
            .data()
            .iter()
            .copied()
            .fold(T::zero(), |a, b| a + b);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "mse")?;
        let n = T::of(self.value(pred).len() as f64);
        let s = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .fold(T::zero(), |acc, (&p, &t)| acc + (p - t) * (p - t));
        self.push(
            "mse",
            Tensor::scalar(s / n),
            Op::Mse(pred, target),
            &[pred, target],
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let shapes: Vec<Vec<usize>> = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.backprop_node(id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        // Only nodes that require gradients report them.
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        // Accumulate `f(i)` into the gradient buffer of `v`.
        fn acc<T: Scalar>(
            grads: &mut [Option<Vec<T>>],
            len: usize,
            v: Var,
            f: impl Fn(usize) -> T,
        ) {
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
            for (i, b) in buf.iter_mut().enumerate() {
                *b = *b + f(i);
            }
        }
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    acc(grads, len(*a), *a, |i| g[i]);
                }
                if wants(*b) {
                    acc(grads, len(*b), *b, |i| g[i]);
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc(grads, len(*a), *a, |i| g[i]);
                }
                if wants(*b) {
                    acc(grads, len(*b), *b, |i| -g[i]);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    acc(grads, len(*a), *a, |i| g[i] * bv[i]);
                }
                if wants(*b) {
                    acc(grads, len(*b), *b, |i| g[i] * av[i]);
                }
            }
            Op::AddRow(x, r) => {
                let cols = len(*r);
                if wants(*x) {
                    acc(grads, len(*x), *x, |i| g[i]);
                }
                if wants(*r) {
                    let mut col = vec![T::zero(); cols];
                    for chunk in g.chunks(cols) {
                        for (c, &v) in col.iter_mut().zip(chunk) {
                            *c = *c + v;
                        }
                    }
                    acc(grads, cols, *r, |i| col[i]);
                }
            }
            Op::MulRow(x, r) => {
                let cols = len(*r);
                let (xv, rv) = (val(*x), val(*r));
                if wants(*x) {
                    acc(grads, len(*x), *x, |i| g[i] * rv[i % cols]);
                }
                if wants(*r) {
                    let mut col = vec![T::zero(); cols];
                    for (i, (&gv, &xv)) in g.iter().zip(xv).enumerate() {
                        col[i % cols] = col[i % cols] + gv * xv;
                    }
                    acc(grads, cols, *r, |i| col[i]);
                }
            }
            Op::Scale(x, c) => acc(grads, len(*x), *x, |i| g[i] * *c),
            Op::AddScalar(x) | Op::Reshape(x) => acc(grads, len(*x), *x, |i| g[i]),
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.as_matrix_dims();
                let n = self.nodes[b.0].value.shape()[1];
                let gm = Mat::dense(0, m, n);
                if wants(*a) {
                    let buf = grads[a.0].get_or_insert_with(|| vec![T::zero(); m * k]);
                    gemm(
                        T::one(),
                        g,
                        gm,
                        val(*b),
                        Mat::dense(0, k, n).t(),
                        T::one(),
                        buf,
                        Mat::dense(0, m, k),
                    );
                }
                if wants(*b) {
                    let buf = grads[b.0].get_or_insert_with(|| vec![T::zero(); k * n]);
                    gemm(
                        T::one(),
                        val(*a),
                        Mat::dense(0, m, k).t(),
                        g,
                        gm,
                        T::one(),
                        buf,
                        Mat::dense(0, k, n),
                    );
                }
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                let c = T::of(GELU_C);
                let k = T::of(0.044715);
                let k3 = T::of(3.0 * 0.044715);
                let half = T::of(0.5);
                acc(grads, len(*x), *x, |i| {
                    let a = xv[i];
                    let th = (c * (a + k * a * a * a)).tanh();
                    let d = half * (T::one() + th)
                        + half * a * (T::one() - th * th) * c * (T::one() + k3 * a * a);
                    g[i] * d
                });
            }
            Op::Silu(x) => {
                let xv = val(*x);
                acc(grads, len(*x), *x, |i| {
                    let s = T::one() / (T::one() + (-xv[i]).exp());
                    g[i] * s * (T::one() + xv[i] * (T::one() - s))
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let y = node.value.data();
                let cols = *node.value.shape().last().expect("rank >= 1");
                let n = T::of(cols as f64);
                let mut dx = vec![T::zero(); y.len()];
                for (r, &is) in inv_std.iter().enumerate() {
                    let span = r * cols..(r + 1) * cols;
                    let (gy, yy) = (&g[span.clone()], &y[span.clone()]);
                    let mean_g = gy.iter().copied().fold(T::zero(), |a, b| a + b) / n;
                    let mean_gy = gy.iter().zip(yy).fold(T::zero(), |a, (&p, &q)| a + p * q) / n;
                    for ((d, &gv), &yv) in dx[span].iter_mut().zip(gy).zip(yy) {
                        *d = is * (gv - mean_g - yv * mean_gy);
                    }
                }
                acc(grads, len(*x), *x, |i| dx[i]);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let cols = *node.value.shape().last().expect("rank >= 1");
                let mut dx = vec![T::zero(); y.len()];
                for ((d, gy), yy) in dx.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                    let dot = gy.iter().zip(yy).fold(T::zero(), |a, (&p, &q)| a + p * q);
                    for ((o, &gv), &yv) in d.iter_mut().zip(gy).zip(yy) {
                        *o = yv * (gv - dot);
                    }
                }
                acc(grads, len(*x), *x, |i| dx[i]);
            }
            Op::Attention {
                q,
                k,
                v,
                dims,
                probs,
            } => {
                let mut take = |v: Var| -> Option<Vec<T>> {
                    wants(v).then(|| grads[v.0].take().unwrap_or_else(|| vec![T::zero(); len(v)]))
                };
                let mut gq = take(*q);
                let mut gk = take(*k);
                let mut gv = take(*v);
                attention_backward(
                    val(*q),
                    val(*k),
                    val(*v),
                    probs,
                    g,
                    *dims,
                    gq.as_deref_mut(),
                    gk.as_deref_mut(),
                    gv.as_deref_mut(),
                );
                for (var, buf) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if let Some(buf) = buf {
                        // The same node may appear twice (e.g. q == k); merge.
                        match grads[var.0].as_mut() {
                            Some(existing) => {
                                for (e, b) in existing.iter_mut().zip(buf) {
                                    *e = *e + b;
                                }
                            }
                            None => grads[var.0] = Some(buf),
                        }
                    }
                }
            }
            Op::Gather { x, index } => {
                let buf = grads[x.0].get_or_insert_with(|| vec![T::zero(); len(*x)]);
                for (&i, &gv) in index.iter().zip(g) {
                    buf[i] = buf[i] + gv;
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let width = self.nodes[v.0].value.shape()[*axis] * inner;
                    if wants(v) {
                        let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); len(v)]);
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + width];
                            for (b, &s) in buf[o * width..(o + 1) * width].iter_mut().zip(src) {
                                *b = *b + s;
                            }
                        }
                    }
                    offset += width;
                }
            }
            Op::Trilinear { x, dims } => {
                let out = node.value.shape();
                let buf = grads[x.0].get_or_insert_with(|| vec![T::zero(); len(*x)]);
                trilinear_adjoint(g, *dims, [out[0], out[1], out[2]], buf);
            }
            Op::Sum(x) => acc(grads, len(*x), *x, |_| g[0]),
            Op::Mse(p, t) => {
                let (pv, tv) = (val(*p), val(*t));
                let c = g[0] * T::of(2.0 / pv.len() as f64);
                if wants(*p) {
                    acc(grads, len(*p), *p, |i| c * (pv[i] - tv[i]));
                }
                if wants(*t) {
                    acc(grads, len(*t), *t, |i| -c * (pv[i] - tv[i]));
                }
            }
        }
    }
}
