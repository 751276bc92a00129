//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation as a node holding its forward value.
//! [`Tape::backward`] walks the nodes in reverse and accumulates gradients
//! for every node whose `requires_grad` flag is set. Leaves that do not
//! require gradients (frozen weights) still pass gradients through to the
//! other inputs of the ops that consume them.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    #[default]
    Tanh,
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Gelu => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "gelu" => Ok(Activation::Gelu),
            other => Err(Error::UnknownVariant {
                kind: "activation",
                value: other.to_string(),
            }),
        }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `x (.., m) + b (m)`
    AddBias(Var, Var),
    /// `x (.., m) * s (m)`
    MulBias(Var, Var),
    Scale(Var, f64),
    /// `x * s` with `s` a one-element tensor.
    ScaleBy(Var, Var),
    /// `x (.., k) @ w (k, m)`
    MatMul(Var, Var),
    /// `a (nb, p, k) @ b (nb, k, q)`, or `@ b^T` with `b (nb, q, k)`.
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Act(Var, Activation),
    Softmax(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
        eps: f64,
    },
    Gather(Var, Arc<Vec<usize>>),
    Reshape(Var),
    ConcatLast(Vec<Var>),
    /// Mean over the middle axis of an `(outer, n, inner)` view.
    MeanAxis {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        targets: Arc<Vec<Option<usize>>>,
        scale: f64,
        count: usize,
    },
    /// Scalar output with caller-supplied local gradients.
    CustomScalar {
        inputs: Vec<Var>,
        grads: Vec<Tensor>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::DimensionMismatch(format!("{what}: {a:?} vs {b:?}"))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch("add", va.shape(), vb.shape()));
        }
        let out = va.add(vb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch("sub", va.shape(), vb.shape()));
        }
        let out = va.sub(vb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch("mul", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Broadcast-add `b` over the trailing `b.numel()` elements of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        let m = vb.numel();
        if m == 0 || vx.numel() % m != 0 {
            return Err(mismatch("add_bias", vx.shape(), vb.shape()));
        }
        let bd = vb.data();
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[i % m])
            .collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddBias(x, b), rg))
    }

    /// Broadcast-multiply `s` over the trailing `s.numel()` elements of `x`.
    pub fn mul_bias(&mut self, x: Var, s: Var) -> Result<Var> {
        let (vx, vs) = (self.value(x), self.value(s));
        let m = vs.numel();
        if m == 0 || vx.numel() % m != 0 {
            return Err(mismatch("mul_bias", vx.shape(), vs.shape()));
        }
        let sd = vs.data();
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * sd[i % m])
            .collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, Op::MulBias(x, s), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).scale(c);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(mismatch("scale_by", self.shape(x), self.shape(s)));
        }
        let c = self.value(s).item();
        let out = self.value(x).scale(c);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, Op::ScaleBy(x, s), rg))
    }

    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let out = self.value(x).matmul(self.value(w))?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(out, Op::MatMul(x, w), rg))
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 3 || vb.rank() != 3 || va.shape()[0] != vb.shape()[0] {
            return Err(mismatch("bmm", va.shape(), vb.shape()));
        }
        let (nb, p, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let (kb, q) = if trans_b {
            (vb.shape()[2], vb.shape()[1])
        } else {
            (vb.shape()[1], vb.shape()[2])
        };
        if kb != k {
            return Err(mismatch("bmm inner", va.shape(), vb.shape()));
        }
        let mut out = vec![0.0; nb * p * q];
        for i in 0..nb {
            gemm(
                p,
                k,
                q,
                &va.data()[i * p * k..(i + 1) * p * k],
                false,
                &vb.data()[i * k * q..(i + 1) * k * q],
                trans_b,
                &mut out[i * p * q..(i + 1) * p * q],
                0.0,
            );
        }
        let out = Tensor::new(vec![nb, p, q], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Bmm { a, b, trans_b }, rg))
    }

    pub fn act(&mut self, x: Var, f: Activation) -> Var {
        if f == Activation::Identity {
            return x;
        }
        let out = self.value(x).map(|v| f.apply(v));
        let rg = self.rg(x);
        self.push(out, Op::Act(x, f), rg)
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let m = vx.last_dim();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(m) {
            softmax_in_place(row);
        }
        let out = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Softmax(x), rg)
    }

    /// Normalises the trailing axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let m = vx.last_dim();
        let mut data = vx.data().to_vec();
        let mut inv_std = Vec::with_capacity(data.len() / m);
        for row in data.chunks_mut(m) {
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let out = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::LayerNorm { x, inv_std }, rg)
    }

    /// L2-normalises the trailing axis, dividing by `max(|x|, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let m = vx.last_dim();
        let mut data = vx.data().to_vec();
        let mut norms = Vec::with_capacity(data.len() / m.max(1));
        for row in data.chunks_mut(m) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let out = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::L2Normalize { x, norms, eps }, rg)
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(Error::DimensionMismatch(format!(
                "gather: {} indices for shape {:?}",
                index.len(),
                shape
            )));
        }
        let src = vx.data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::DimensionMismatch(format!(
                "gather index {bad} out of range {}",
                src.len()
            )));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Gather(x, index), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Concatenates along the trailing axis; leading dims must agree.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if &s[..s.len() - 1] != lead {
                return Err(mismatch("concat_last", &first, s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(x).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let out = Tensor::new(shape, data)?;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(out, Op::ConcatLast(xs.to_vec()), rg))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::DimensionMismatch(format!(
                "mean_axis {axis} of {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        if n == 0 {
            return Err(Error::EmptyFeatureMap);
        }
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let base = (o * n + i) * inner;
                for j in 0..inner {
                    data[o * inner + j] += src[base + j];
                }
            }
        }
        for v in data.iter_mut() {
            *v /= n as f64;
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out = Tensor::new(out_shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::MeanAxis {
                x,
                outer,
                n,
                inner,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean softmax cross-entropy of `scale * logits` over rows whose target is `Some`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: Arc<Vec<Option<usize>>>,
        scale: f64,
    ) -> Result<Var> {
        let vl = self.value(logits);
        let k = vl.last_dim();
        let rows = vl.numel() / k.max(1);
        if targets.len() != rows {
            return Err(Error::DimensionMismatch(format!(
                "cross_entropy: {} targets for {} rows",
                targets.len(),
                rows
            )));
        }
        let mut probs = vec![0.0; vl.numel()];
        let mut total = 0.0;
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= k {
                return Err(Error::DimensionMismatch(format!(
                    "target class {t} out of range for {k} classes"
                )));
            }
            let row = &vl.data()[r * k..(r + 1) * k];
            let p = &mut probs[r * k..(r + 1) * k];
            for (pi, &l) in p.iter_mut().zip(row) {
                *pi = l * scale;
            }
            let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + p.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - p[t];
            for v in p.iter_mut() {
                *v = (*v - lse).exp();
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::AllIgnored);
        }
        let out = Tensor::scalar(total / count as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                scale,
                count,
            },
            rg,
        ))
    }

    /// Records a scalar computed outside the tape together with its local
    /// gradients with respect to `inputs`.
    pub fn custom_scalar(&mut self, inputs: &[Var], value: f64, grads: Vec<Tensor>) -> Result<Var> {
        if inputs.len() != grads.len() {
            return Err(Error::DimensionMismatch(
                "custom_scalar: one gradient per input".into(),
            ));
        }
        for (&v, g) in inputs.iter().zip(&grads) {
            if self.value(v).numel() != g.numel() {
                return Err(mismatch("custom_scalar grad", self.shape(v), g.shape()));
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::scalar(value),
            Op::CustomScalar {
                inputs: inputs.to_vec(),
                grads,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let shape = self.value(loss).shape().to_vec();
        grads[loss.0] = Some(Tensor::full(&shape, 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let acc = |grads: &mut [Option<Tensor>], v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let like = |v: Var, data: Vec<f64>| {
            Tensor::new(self.nodes[v.0].value.shape().to_vec(), data).expect("gradient shape")
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if rg(*a) {
                    acc(grads, *a, g.clone());
                }
                if rg(*b) {
                    acc(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    acc(grads, *a, g.clone());
                }
                if rg(*b) {
                    acc(grads, *b, g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let d = g.data().iter().zip(val(*b).data()).map(|(g, y)| g * y);
                    acc(grads, *a, like(*a, d.collect()));
                }
                if rg(*b) {
                    let d = g.data().iter().zip(val(*a).data()).map(|(g, x)| g * x);
                    acc(grads, *b, like(*b, d.collect()));
                }
            }
            Op::AddBias(x, b) => {
                if rg(*x) {
                    acc(grads, *x, like(*x, g.data().to_vec()));
                }
                if rg(*b) {
                    let m = val(*b).numel();
                    let mut gb = vec![0.0; m];
                    for (i, v) in g.data().iter().enumerate() {
                        gb[i % m] += v;
                    }
                    acc(grads, *b, like(*b, gb));
                }
            }
            Op::MulBias(x, s) => {
                let sd = val(*s).data();
                let m = sd.len();
                if rg(*x) {
                    let d = g.data().iter().enumerate().map(|(i, v)| v * sd[i % m]);
                    acc(grads, *x, like(*x, d.collect()));
                }
                if rg(*s) {
                    let mut gs = vec![0.0; m];
                    for (i, (gv, xv)) in g.data().iter().zip(val(*x).data()).enumerate() {
                        gs[i % m] += gv * xv;
                    }
                    acc(grads, *s, like(*s, gs));
                }
            }
            Op::Scale(x, c) => {
                if rg(*x) {
                    acc(grads, *x, like(*x, g.data().iter().map(|v| v * c).collect()));
                }
            }
            Op::ScaleBy(x, s) => {
                let c = val(*s).item();
                if rg(*x) {
                    acc(grads, *x, like(*x, g.data().iter().map(|v| v * c).collect()));
                }
                if rg(*s) {
                    let d: f64 = g.data().iter().zip(val(*x).data()).map(|(a, b)| a * b).sum();
                    acc(grads, *s, like(*s, vec![d]));
                }
            }
            Op::MatMul(x, w) => {
                let (vx, vw) = (val(*x), val(*w));
                let k = vw.shape()[0];
                let m = vw.shape()[1];
                let n = vx.numel() / k.max(1);
                if rg(*x) {
                    let mut gx = vec![0.0; n * k];
                    gemm(n, m, k, g.data(), false, vw.data(), true, &mut gx, 0.0);
                    acc(grads, *x, like(*x, gx));
                }
                if rg(*w) {
                    let mut gw = vec![0.0; k * m];
                    gemm(k, n, m, vx.data(), true, g.data(), false, &mut gw, 0.0);
                    acc(grads, *w, like(*w, gw));
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (va, vb) = (val(*a), val(*b));
                let (nb, p, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let q = g.shape()[2];
                let gd = g.data();
                if rg(*a) {
                    let mut ga = vec![0.0; nb * p * k];
                    for i in 0..nb {
                        gemm(
                            p,
                            q,
                            k,
                            &gd[i * p * q..(i + 1) * p * q],
                            false,
                            &vb.data()[i * k * q..(i + 1) * k * q],
                            !*trans_b,
                            &mut ga[i * p * k..(i + 1) * p * k],
                            0.0,
                        );
                    }
                    acc(grads, *a, like(*a, ga));
                }
                if rg(*b) {
                    let mut gb = vec![0.0; nb * k * q];
                    for i in 0..nb {
                        let gi = &gd[i * p * q..(i + 1) * p * q];
                        let ai = &va.data()[i * p * k..(i + 1) * p * k];
                        let out = &mut gb[i * k * q..(i + 1) * k * q];
                        if *trans_b {
                            gemm(q, p, k, gi, true, ai, false, out, 0.0);
                        } else {
                            gemm(k, p, q, ai, true, gi, false, out, 0.0);
                        }
                    }
                    acc(grads, *b, like(*b, gb));
                }
            }
            Op::Act(x, f) => {
                if rg(*x) {
                    let d = g
                        .data()
                        .iter()
                        .zip(val(*x).data())
                        .map(|(gv, xv)| gv * f.derivative(*xv));
                    acc(grads, *x, like(*x, d.collect()));
                }
            }
            Op::Softmax(x) => {
                if rg(*x) {
                    let y = node.value.data();
                    let m = node.value.last_dim();
                    let mut gx = vec![0.0; y.len()];
                    for ((yr, gr), out) in y
                        .chunks(m)
                        .zip(g.data().chunks(m))
                        .zip(gx.chunks_mut(m))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            out[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(grads, *x, like(*x, gx));
                }
            }
            Op::LayerNorm { x, inv_std } => {
                if rg(*x) {
                    let y = node.value.data();
                    let m = node.value.last_dim();
                    let mut gx = vec![0.0; y.len()];
                    for (r, ((yr, gr), out)) in y
                        .chunks(m)
                        .zip(g.data().chunks(m))
                        .zip(gx.chunks_mut(m))
                        .enumerate()
                    {
                        let mg = gr.iter().sum::<f64>() / m as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                        for j in 0..m {
                            out[j] = inv_std[r] * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                    acc(grads, *x, like(*x, gx));
                }
            }
            Op::L2Normalize { x, norms, eps } => {
                if rg(*x) {
                    let y = node.value.data();
                    let m = node.value.last_dim();
                    let mut gx = vec![0.0; y.len()];
                    for (r, ((yr, gr), out)) in y
                        .chunks(m)
                        .zip(g.data().chunks(m))
                        .zip(gx.chunks_mut(m))
                        .enumerate()
                    {
                        // A clamped norm is a constant divisor.
                        let dot: f64 = if norms[r] > *eps {
                            yr.iter().zip(gr).map(|(a, b)| a * b).sum()
                        } else {
                            0.0
                        };
                        for j in 0..m {
                            out[j] = (gr[j] - yr[j] * dot) / norms[r];
                        }
                    }
                    acc(grads, *x, like(*x, gx));
                }
            }
            Op::Gather(x, index) => {
                if rg(*x) {
                    let mut gx = vec![0.0; val(*x).numel()];
                    for (gv, &i) in g.data().iter().zip(index.iter()) {
                        gx[i] += gv;
                    }
                    acc(grads, *x, like(*x, gx));
                }
            }
            Op::Reshape(x) => {
                if rg(*x) {
                    acc(grads, *x, like(*x, g.data().to_vec()));
                }
            }
            Op::ConcatLast(xs) => {
                let widths: Vec<usize> = xs.iter().map(|&x| val(x).last_dim()).collect();
                let total: usize = widths.iter().sum();
                let rows = g.numel() / total.max(1);
                let mut offset = 0;
                for (&x, &w) in xs.iter().zip(&widths) {
                    if rg(x) {
                        let mut gx = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gx.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        acc(grads, x, like(x, gx));
                    }
                    offset += w;
                }
            }
            Op::MeanAxis {
                x,
                outer,
                n,
                inner,
            } => {
                if rg(*x) {
                    let mut gx = vec![0.0; outer * n * inner];
                    let inv = 1.0 / *n as f64;
                    for o in 0..*outer {
                        for i in 0..*n {
                            for j in 0..*inner {
                                gx[(o * n + i) * inner + j] = g.data()[o * inner + j] * inv;
                            }
                        }
                    }
                    acc(grads, *x, like(*x, gx));
                }
            }
            Op::Sum(x) => {
                if rg(*x) {
                    let n = val(*x).numel();
                    acc(grads, *x, like(*x, vec![g.item(); n]));
                }
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                scale,
                count,
            } => {
                if rg(*logits) {
                    let k = val(*logits).last_dim();
                    let coef = g.item() * scale / *count as f64;
                    let mut gl = vec![0.0; probs.len()];
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..k {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * k + j] = coef * (probs[r * k + j] - onehot);
                        }
                    }
                    acc(grads, *logits, like(*logits, gl));
                }
            }
            Op::CustomScalar { inputs, grads: local } => {
                let gs = g.item();
                for (&x, lg) in inputs.iter().zip(local) {
                    if rg(x) {
                        acc(grads, x, like(x, lg.data().iter().map(|v| v * gs).collect()));
                    }
                }
            }
        }
    }
}

/// Numerically stable softmax of a slice, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, GradCheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(shape, 1.0, &mut rng)
    }

    fn assert_grad(
        inputs: Vec<Tensor>,
        f: impl Fn(&mut Tape, &[Var]) -> Var,
    ) {
        for which in 0..inputs.len() {
            let report = check_gradient(&inputs, which, &f, GradCheck::default());
            assert!(
                report.max_rel_err <= 1e-5,
                "input {which}: rel err {}",
                report.max_rel_err
            );
        }
    }

    #[test]
    fn grad_linear_and_activations() {
        for act in [Activation::Tanh, Activation::Gelu, Activation::Identity] {
            assert_grad(
                vec![rand_t(&[3, 4], 1), rand_t(&[4, 2], 2), rand_t(&[2], 3)],
                |t, v| {
                    let y = t.linear(v[0], v[1], Some(v[2])).unwrap();
                    let y = t.act(y, act);
                    let y2 = t.mul(y, y).unwrap();
                    t.sum(y2)
                },
            );
        }
    }

    #[test]
    fn grad_bmm_both_layouts() {
        for trans in [false, true] {
            let b_shape = if trans { [2, 5, 4] } else { [2, 4, 5] };
            assert_grad(vec![rand_t(&[2, 3, 4], 4), rand_t(&b_shape, 5)], |t, v| {
                let y = t.bmm(v[0], v[1], trans).unwrap();
                let y = t.act(y, Activation::Tanh);
                t.sum(y)
            });
        }
    }

    #[test]
    fn grad_softmax_layernorm_l2() {
        let w = rand_t(&[3, 5], 9);
        assert_grad(vec![rand_t(&[3, 5], 6)], move |t, v| {
            let a = t.softmax(v[0]);
            let b = t.layer_norm(v[0], 1e-5);
            let c = t.l2_normalize(v[0], 1e-12);
            let s = t.add(a, b).unwrap();
            let s = t.add(s, c).unwrap();
            let wv = t.constant(w.clone());
            let s = t.mul(s, wv).unwrap();
            t.sum(s)
        });
    }

    #[test]
    fn grad_gather_concat_mean_bias() {
        let idx = Arc::new(vec![5, 0, 0, 3, 2, 1]);
        assert_grad(
            vec![rand_t(&[2, 3], 7), rand_t(&[3], 8), rand_t(&[1], 10)],
            move |t, v| {
                let g = t.gather(v[0], idx.clone(), &[2, 3]).unwrap();
                let g = t.mul_bias(g, v[1]).unwrap();
                let g = t.scale_by(g, v[2]).unwrap();
                let c = t.concat_last(&[g, v[0]]).unwrap();
                let c = t.act(c, Activation::Tanh);
                let m = t.mean_axis(c, 0).unwrap();
                let m = t.mul(m, m).unwrap();
                t.sum(m)
            },
        );
    }

    #[test]
    fn grad_cross_entropy_with_ignore() {
        let targets = Arc::new(vec![Some(1), None, Some(0), Some(2)]);
        assert_grad(vec![rand_t(&[4, 3], 11)], move |t, v| {
            t.cross_entropy(v[0], targets.clone(), 2.5).unwrap()
        });
    }

    #[test]
    fn cross_entropy_all_ignored_is_error() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[2, 3]), true);
        let err = t.cross_entropy(x, Arc::new(vec![None, None]), 1.0);
        assert!(matches!(err, Err(Error::AllIgnored)));
    }

    #[test]
    fn frozen_leaf_passes_gradient_to_other_input() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_fn(&[1, 2], |i| i as f64 + 1.0), true);
        let w = t.leaf(Tensor::identity(2), false);
        let y = t.matmul(x, w).unwrap();
        let s = t.sum(y);
        let g = t.backward(s);
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0]);
        assert!(g.get(w).is_none());
    }
}
