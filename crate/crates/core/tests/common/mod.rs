//! Double-double reference implementations shared by the integration tests.
//!
//! These deliberately avoid the tape so that a finite-difference comparison
//! checks the differentiator against an independent computation.
#![allow(dead_code)]

use conform_core::metrics::{compare_gradients, finite_diff_grad};
use conform_core::numerics::{derived, Dd, Tensor};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-6;

pub fn lift(x: &[f64]) -> Vec<Dd> {
    x.iter().map(|&v| Dd::from(v)).collect()
}

/// `(m × k) · (k × n)`.
pub fn matmul(a: &[Dd], b: &[Dd], m: usize, k: usize, n: usize) -> Vec<Dd> {
    let mut out = vec![Dd::ZERO; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|r| a[i * k + r] * b[r * n + j]).sum();
        }
    }
    out
}

pub fn softmax_rows(a: &[Dd], m: usize, n: usize) -> Vec<Dd> {
    let mut out = Vec::with_capacity(m * n);
    for row in a.chunks(n).take(m) {
        let top = row.iter().copied().fold(row[0], Dd::max);
        let e: Vec<Dd> = row.iter().map(|&x| (x - top).exp()).collect();
        let s: Dd = e.iter().copied().sum();
        out.extend(e.into_iter().map(|x| x / s));
    }
    out
}

pub fn dot(u: &[Dd], v: &[Dd]) -> Dd {
    u.iter().zip(v).map(|(&a, &b)| a * b).sum()
}

pub fn cosine(u: &[Dd], v: &[Dd]) -> Dd {
    dot(u, v) / (dot(u, u).sqrt() * dot(v, v).sqrt())
}

pub fn logsumexp(x: &[Dd]) -> Dd {
    let top = x.iter().copied().fold(x[0], Dd::max);
    top + x.iter().map(|&v| (v - top).exp()).sum::<Dd>().ln()
}

/// Attention of an `(h·w) × c` latent against keys `l × d`.
pub fn attention(
    z: &[Dd],
    w_q: &[Dd],
    keys: &[Dd],
    pixels: usize,
    c: usize,
    d: usize,
    l: usize,
) -> Vec<Dd> {
    let q = matmul(z, w_q, pixels, c, d);
    let mut keys_t = vec![Dd::ZERO; d * l];
    for j in 0..l {
        for k in 0..d {
            keys_t[k * l + j] = keys[j * d + k];
        }
    }
    let inv = Dd::ONE / Dd::from(d as f64).sqrt();
    let s: Vec<Dd> = matmul(&q, &keys_t, pixels, d, l)
        .into_iter()
        .map(|x| x * inv)
        .collect();
    softmax_rows(&s, pixels, l)
}

/// Worst relative error between `autodiff` and central differences of the
/// double-double function `f`.
pub fn worst_error(autodiff: &Tensor, z: &Tensor, f: impl Fn(&[Dd]) -> Dd) -> f64 {
    let fd = finite_diff_grad(|x: &Tensor| Ok(f(&lift(x.data()))), z, H).unwrap();
    compare_gradients(autodiff, &fd).unwrap().max_rel_error
}

pub fn randn(shape: &[usize], seed: u64, stream: u64) -> Tensor {
    Tensor::randn(shape, &mut derived(seed, stream))
}
