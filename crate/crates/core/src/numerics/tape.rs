//! Tape-based reverse-mode differentiation over a closed set of primitives.
//!
//! Operations are appended to a [`Tape`] in evaluation order, so recording
//! order is already a topological order. [`Tape::backward`] walks the nodes
//! once in reverse and accumulates vector-Jacobian products into every node
//! that depends on a differentiable leaf.

use crate::error::{Error, Result};

use super::tensor::{finite, matmul_raw, softmax_rows_raw, transpose_raw, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    LogSumExp(Var),
    Reshape(Var),
    Column(Var, usize),
    Select(Var, usize),
    Stack(Vec<Var>),
    CosineSim(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of a computation. Single-threaded; build a fresh tape per
/// evaluation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Output of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    visited: usize,
}

impl Gradients {
    /// Gradient of the output with respect to `v`. Zero if `v` does not
    /// influence the output.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Number of nodes the backward sweep passed over.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Input marked for differentiation.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input treated as a constant; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), needs))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Transpose(a), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_with(self.value(b), "add", |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_with(self.value(b), "sub", |x, y| x - y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).scale(c)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Scale(a, c), needs))
    }

    /// Softmax along the last axis of a 2-D tensor, max-subtracted.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (m, n) = x.dims2("softmax_rows")?;
        let value = finite("softmax_rows", vec![m, n], softmax_rows_raw(x.data(), m, n))?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::SoftmaxRows(a), needs))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map("exp", f64::exp)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Exp(a), needs))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::NonFinite("log"));
        }
        let value = self.value(a).map("log", f64::ln)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Log(a), needs))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum())?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Sum(a), needs))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::Contract("mean of empty tensor".into()));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// `log Σ exp(x)` over all elements, computed with max subtraction.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::Contract("logsumexp of empty tensor".into()));
        }
        let value = Tensor::scalar(logsumexp_raw(x.data()))?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::LogSumExp(a), needs))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Reshape(a), needs))
    }

    /// Column `j` of a 2-D tensor.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let value = self.value(a).column(j)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Column(a, j), needs))
    }

    /// Element `i` of the flattened tensor.
    pub fn select(&mut self, a: Var, i: usize) -> Result<Var> {
        let x = self.value(a);
        let &v = x.data().get(i).ok_or(Error::Index {
            index: i,
            extent: x.len(),
        })?;
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::from_parts(vec![1], vec![v]),
            Op::Select(a, i),
            needs,
        ))
    }

    /// Stack one-element tensors into a vector.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::with_capacity(parts.len());
        for &p in parts {
            data.push(self.value(p).item()?);
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::from_parts(vec![parts.len()], data),
            Op::Stack(parts.to_vec()),
            needs,
        ))
    }

    /// Cosine similarity of two equally sized tensors, viewed as flat vectors.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        let (u, v) = (self.value(a), self.value(b));
        if u.len() != v.len() {
            return Err(Error::dim("cosine_sim", u.shape(), v.shape()));
        }
        let value = Tensor::scalar(cosine_raw(u.data(), v.data())?)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::CosineSim(a, b), needs))
    }

    /// Reverse sweep from a one-element `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if !out.is_scalar() {
            return Err(Error::Contract(format!(
                "backward from non-scalar output of shape {:?}",
                out.shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[output.0] = Some(vec![1.0]);
        let mut visited = 0;

        for idx in (0..n).rev() {
            visited += 1;
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        let mut out = Vec::with_capacity(n);
        for (node, g) in self.nodes.iter().zip(grads) {
            out.push(match g {
                Some(g) => Some(finite("backward", node.value.shape().to_vec(), g)?),
                None => None,
            });
        }
        Ok(Gradients {
            grads: out,
            shapes,
            visited,
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };

        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let nn = bv.shape()[1];
                // dA = G Bᵀ, dB = Aᵀ G
                if self.needs(*a) {
                    let bt = transpose_raw(bv.data(), k, nn);
                    acc(*a, matmul_raw(g, &bt, m, nn, k));
                }
                if self.needs(*b) {
                    let at = transpose_raw(av.data(), m, k);
                    acc(*b, matmul_raw(&at, g, k, m, nn));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                acc(*a, transpose_raw(g, m, n));
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|x| -x).collect());
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|x| c * x).collect()),
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let r = i * n..(i + 1) * n;
                    let dot: f64 = y[r.clone()]
                        .iter()
                        .zip(&g[r.clone()])
                        .map(|(a, b)| a * b)
                        .sum();
                    for p in r {
                        dx[p] = y[p] * (g[p] - dot);
                    }
                }
                acc(*a, dx);
            }
            Op::Exp(a) => acc(
                *a,
                g.iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * y)
                    .collect(),
            ),
            Op::Log(a) => acc(
                *a,
                g.iter()
                    .zip(self.value(*a).data())
                    .map(|(g, x)| g / x)
                    .collect(),
            ),
            Op::Sum(a) => acc(*a, vec![g[0]; self.value(*a).len()]),
            Op::LogSumExp(a) => {
                let x = self.value(*a).data();
                let lse = node.value.data()[0];
                acc(*a, x.iter().map(|xi| g[0] * (xi - lse).exp()).collect());
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Column(a, j) => {
                let (m, n) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    dx[i * n + j] = g[i];
                }
                acc(*a, dx);
            }
            Op::Select(a, i) => {
                let mut dx = vec![0.0; self.value(*a).len()];
                dx[*i] = g[0];
                acc(*a, dx);
            }
            Op::Stack(parts) => {
                for (p, gi) in parts.iter().zip(g) {
                    acc(*p, vec![*gi]);
                }
            }
            Op::CosineSim(a, b) => {
                let (u, v) = (self.value(*a).data(), self.value(*b).data());
                let s = node.value.data()[0];
                let nu = norm(u);
                let nv = norm(v);
                // ∂s/∂u = v/(|u||v|) − s·u/|u|²
                if self.needs(*a) {
                    acc(
                        *a,
                        u.iter()
                            .zip(v)
                            .map(|(ui, vi)| g[0] * (vi / (nu * nv) - s * ui / (nu * nu)))
                            .collect(),
                    );
                }
                if self.needs(*b) {
                    acc(
                        *b,
                        u.iter()
                            .zip(v)
                            .map(|(ui, vi)| g[0] * (ui / (nu * nv) - s * vi / (nv * nv)))
                            .collect(),
                    );
                }
            }
        }
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn cosine_raw(u: &[f64], v: &[f64]) -> Result<f64> {
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Degenerate(
            "cosine similarity of a zero vector".into(),
        ));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

pub(crate) fn logsumexp_raw(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
