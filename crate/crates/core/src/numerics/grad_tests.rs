//! Finite-difference checks for every differentiable graph operation.

use std::sync::Arc;

use super::*;
use crate::error::Result;
use crate::seed::{normal_tensor, rng, Stream};

fn rand_t(shape: &[usize], salt: u64) -> Tensor<f64> {
    normal_tensor(&mut rng(11, Stream::Test, salt), shape, 1.0)
}

/// Contracts `y` with a fixed random tensor so every output coordinate matters.
fn probe(g: &mut Graph<f64>, y: Var, salt: u64) -> Result<Var> {
    let w = g.constant(rand_t(g.shape(y), 1000 + salt));
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn check(x: &Tensor<f64>, f: impl Fn(&mut Graph<f64>, Var) -> Result<Var>) -> f64 {
    finite_diff_grad_check(f, x, DEFAULT_EPS).unwrap()
}

#[test]
fn sum_of_squares_is_exact() {
    let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
    let mut g = Graph::new();
    let v = g.input(x.clone());
    let sq = g.mul(v, v).unwrap();
    let s = g.sum(sq).unwrap();
    assert_eq!(g.backward(s).unwrap().get(v).unwrap().data(), &[2.0, 4.0]);
    let err = check(&x, |g, v| {
        let sq = g.mul(v, v)?;
        g.sum(sq)
    });
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn softmax_then_dot() {
    let x = rand_t(&[3, 5], 1);
    let err = check(&x, |g, v| {
        let s = g.softmax(v)?;
        probe(g, s, 1)
    });
    assert!(err <= 1e-5, "{err}");
}

#[test]
fn elementwise_ops() {
    let x = rand_t(&[4, 3], 2);
    let other = rand_t(&[4, 3], 3);
    let row = rand_t(&[3], 4);
    let err = check(&x, |g, v| {
        let o = g.constant(other.clone());
        let r = g.input(row.clone());
        let a = g.add(v, o)?;
        let b = g.sub(a, v)?;
        let c = g.mul(b, v)?;
        let d = g.add_row(c, r)?;
        let e = g.mul_row(d, r)?;
        let f = g.mul_row(v, r)?;
        let h = g.add(e, f)?;
        let i = g.scale(h, 0.7)?;
        let j = g.add_scalar(i, -0.3)?;
        probe(g, j, 2)
    });
    assert!(err <= 1e-4, "{err}");
    // Broadcast operand gradients.
    let err = check(&row, |g, r| {
        let xv = g.constant(x.clone());
        let a = g.mul_row(xv, r)?;
        let b = g.add_row(a, r)?;
        probe(g, b, 3)
    });
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn matmul_both_sides() {
    let a = rand_t(&[2, 3, 4], 5);
    let b = rand_t(&[4, 5], 6);
    let err = check(&a, |g, v| {
        let w = g.constant(b.clone());
        let y = g.matmul(v, w)?;
        probe(g, y, 4)
    });
    assert!(err <= 1e-4, "{err}");
    let err = check(&b, |g, w| {
        let v = g.constant(a.clone());
        let y = g.matmul(v, w)?;
        probe(g, y, 5)
    });
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn activations_and_norm() {
    let x = rand_t(&[3, 6], 7);
    for (salt, op) in [(6u64, 0u8), (7, 1), (8, 2)] {
        let err = check(&x, |g, v| {
            let y = match op {
                0 => g.gelu(v)?,
                1 => g.silu(v)?,
                _ => g.layer_norm(v)?,
            };
            probe(g, y, salt)
        });
        assert!(err <= 1e-4, "op {op}: {err}");
    }
}

#[test]
fn attention_all_inputs_with_mask() {
    let q = rand_t(&[2, 3, 4], 8);
    let k = rand_t(&[2, 5, 4], 9);
    let v = rand_t(&[2, 5, 6], 10);
    let mask = PairMask::from_fn(3, 5, |r, c| r != 2 && (r + c) % 3 != 0);
    for which in 0..3 {
        let x = [&q, &k, &v][which].clone();
        let err = check(&x, |g, x| {
            let mut vars = [
                g.constant(q.clone()),
                g.constant(k.clone()),
                g.constant(v.clone()),
            ];
            vars[which] = x;
            let y = g.attention(vars[0], vars[1], vars[2], 2, Some(&mask))?;
            probe(g, y, 9)
        });
        assert!(err <= 1e-4, "input {which}: {err}");
    }
}

#[test]
fn self_attention_shares_node() {
    let x = rand_t(&[4, 4], 11);
    let err = check(&x, |g, v| {
        let y = g.attention(v, v, v, 2, None)?;
        probe(g, y, 10)
    });
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn structural_ops() {
    let x = rand_t(&[2, 3, 4], 12);
    let err = check(&x, |g, v| {
        let idx: Vec<usize> = (0..24).rev().chain(0..5).collect();
        let a = g.gather(v, Arc::new(idx), vec![29])?;
        let b = g.slice_last(v, 1, 2)?;
        let c = g.concat(&[v, b], 2)?;
        let d = g.reshape(c, &[6, 6])?;
        let e = g.tile(v, 3)?;
        let s1 = probe(g, a, 11)?;
        let s2 = probe(g, d, 12)?;
        let s3 = probe(g, e, 13)?;
        let s = g.add(s1, s2)?;
        g.add(s, s3)
    });
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn trilinear_and_mse() {
    let x = rand_t(&[2, 3, 3], 13);
    let err = check(&x, |g, v| {
        let y = g.trilinear(v, [3, 5, 2])?;
        probe(g, y, 14)
    });
    assert!(err <= 1e-4, "{err}");
    let target = rand_t(&[2, 3, 3], 14);
    let err = check(&x, |g, v| {
        let t = g.constant(target.clone());
        g.mse(v, t)
    });
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn non_scalar_function_is_rejected() {
    let x = rand_t(&[2], 15);
    assert!(finite_diff_grad_check(|_g, v| Ok(v), &x, DEFAULT_EPS).is_err());
}
