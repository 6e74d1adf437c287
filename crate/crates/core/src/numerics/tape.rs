//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value. Nodes are appended in
//! evaluation order, so walking the tape backwards from the loss visits them
//! in reverse topological order. A node requires a gradient iff one of its
//! inputs does; leaves take the flag from their tensor or parameter.

use std::collections::BTreeMap;

use super::kernels;
use super::tensor::{ParamSet, Parameter, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    Slab {
        x: Var,
        index: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        causal: bool,
        probs: Vec<f64>,
    },
    AvgPool {
        x: Var,
        kernel: usize,
    },
    ConcatRows(Var, Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        denom: f64,
        probs: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Scale(a, b)
            | Op::Mul(a, b)
            | Op::ConcatRows(a, b) => vec![*a, *b],
            Op::Sum(x) | Op::Gelu(x) | Op::Softmax(x) => vec![*x],
            Op::SliceCols { x, .. } | Op::Slab { x, .. } | Op::AvgPool { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::Gather { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<String>,
}

/// Records a forward computation for later differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let inputs = op.inputs();
        if cfg!(debug_assertions) && !value.is_finite() && inputs.iter().all(|i| self.nodes[i.0].value.is_finite()) {
            panic!("{op:?} produced a non-finite value from finite inputs");
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value: value.with_requires_grad(false),
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor.with_requires_grad(false),
            op: Op::Leaf,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Leaf bound to a parameter; gradients are reported under its name when trainable.
    pub fn param(&mut self, p: &Parameter) -> Var {
        let v = self.leaf(p.tensor().clone().with_requires_grad(p.trainable()));
        if p.trainable() {
            self.nodes[v.0].param = Some(p.name().to_string());
        }
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("add", a, b));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("mul", a, b));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b)))
    }

    /// Adds a length-`C` vector to every row of a `R×C` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, c) = self.value(x).dims2("add_row")?;
        if self.shape(row) != [c] {
            return Err(self.shape_err("add_row", x, row));
        }
        let r = self.value(row).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + r[i % c])
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRow(x, row)))
    }

    /// Multiplies every element of `x` by the one-element tensor `s`.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(self.shape_err("scale", x, s));
        }
        let sv = self.scalar(s);
        let data = self.value(x).data().iter().map(|v| sv * v).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Scale(x, s)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        let t = Tensor::new(shape, data).expect("same shape");
        self.push(t, Op::Gelu(x))
    }

    /// Per-row normalization to zero mean and unit variance, then `gain ⊙ · + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, d) = self.value(x).dims2("layer_norm")?;
        if d == 0 {
            return Err(Error::EmptyInput("layer_norm"));
        }
        if self.shape(gain) != [d] {
            return Err(self.shape_err("layer_norm", x, gain));
        }
        if self.shape(bias) != [d] {
            return Err(self.shape_err("layer_norm", x, bias));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let t = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if n == 0 {
            return Err(Error::EmptyInput("softmax"));
        }
        let xs = self.value(x).data();
        let mut out = vec![0.0; xs.len()];
        for (src, dst) in xs.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            kernels::softmax_row(src, dst);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(x)))
    }

    /// Columns `range` of a matrix.
    pub fn slice_cols(&mut self, x: Var, range: std::ops::Range<usize>) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2("slice_cols")?;
        if range.start > range.end || range.end > cols {
            return Err(Error::Index {
                what: "column slice",
                index: range.end,
                len: cols,
            });
        }
        let w = range.end - range.start;
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&xs[r * cols + range.start..r * cols + range.end]);
        }
        let t = Tensor::new(vec![rows, w], out)?;
        Ok(self.push(t, Op::SliceCols { x, start: range.start }))
    }

    /// Sub-tensor at `index` along the leading axis. A 1-D input yields a
    /// one-element tensor.
    pub fn slab(&mut self, x: Var, index: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let lead = *shape.first().ok_or(Error::EmptyInput("slab"))?;
        if index >= lead {
            return Err(Error::Index {
                what: "slab",
                index,
                len: lead,
            });
        }
        let rest: Vec<usize> = if shape.len() == 1 { vec![1] } else { shape[1..].to_vec() };
        let size: usize = rest.iter().product();
        let data = self.value(x).data()[index * size..(index + 1) * size].to_vec();
        Ok(self.push(Tensor::new(rest, data)?, Op::Slab { x, index }))
    }

    /// Multi-head scaled dot-product self-attention over already projected
    /// queries, keys and values (each `T×D`, heads split along columns).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let (t, d) = self.value(q).dims2("attention")?;
        if self.shape(k) != [t, d] {
            return Err(self.shape_err("attention", q, k));
        }
        if self.shape(v) != [t, d] {
            return Err(self.shape_err("attention", q, v));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Dimension {
                op: "attention",
                reason: format!("model dim {d} not divisible into {heads} heads"),
            });
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; heads * t * t];
        let mut out = vec![0.0; t * d];
        let mut scores = vec![0.0; t];
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..t {
                let visible = if causal { i + 1 } else { t };
                let qi = &qs[i * d + c0..i * d + c0 + dh];
                for j in 0..visible {
                    scores[j] = kernels::dot(qi, &ks[j * d + c0..j * d + c0 + dh]) * scale;
                }
                let p = &mut probs[(h * t + i) * t..(h * t + i) * t + visible];
                kernels::softmax_row(&scores[..visible], p);
                let o = &mut out[i * d + c0..i * d + c0 + dh];
                for (j, &pj) in p.iter().enumerate() {
                    for (ov, &vv) in o.iter_mut().zip(&vs[j * d + c0..j * d + c0 + dh]) {
                        *ov += pj * vv;
                    }
                }
            }
        }
        let t_out = Tensor::new(vec![t, d], out)?;
        Ok(self.push(
            t_out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                causal,
                probs,
            },
        ))
    }

    /// Mean over consecutive windows of `kernel` rows; the last window may be
    /// shorter and is averaged over the rows it actually has.
    pub fn avg_pool_time(&mut self, x: Var, kernel: usize) -> Result<Var> {
        let (t, d) = self.value(x).dims2("avg_pool_time")?;
        if t == 0 {
            return Err(Error::EmptyInput("avg_pool_time"));
        }
        if kernel == 0 {
            return Err(Error::Dimension {
                op: "avg_pool_time",
                reason: "kernel must be positive".into(),
            });
        }
        let rows = t.div_ceil(kernel);
        let xs = self.value(x).data();
        let mut out = vec![0.0; rows * d];
        for j in 0..rows {
            let lo = j * kernel;
            let hi = (lo + kernel).min(t);
            // Mean taken as an offset from the window's first row, so a
            // constant window returns its value exactly.
            let first = &xs[lo * d..(lo + 1) * d];
            let dst = &mut out[j * d..(j + 1) * d];
            for r in lo + 1..hi {
                for ((o, &v), &f) in dst.iter_mut().zip(&xs[r * d..(r + 1) * d]).zip(first) {
                    *o += v - f;
                }
            }
            let count = (hi - lo) as f64;
            for (o, &f) in dst.iter_mut().zip(first) {
                *o = f + *o / count;
            }
        }
        let t_out = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(t_out, Op::AvgPool { x, kernel }))
    }

    /// Stacks the rows of `b` under the rows of `a`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.value(a).dims2("concat_rows")?;
        let (rb, cb) = self.value(b).dims2("concat_rows")?;
        if ca != cb {
            return Err(self.shape_err("concat_rows", a, b));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        Ok(self.push(Tensor::new(vec![ra + rb, ca], data)?, Op::ConcatRows(a, b)))
    }

    /// Rows `ids` of `table`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.value(table).dims2("gather_rows")?;
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::Vocabulary { id, vocab });
        }
        let ts = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&ts[id * d..(id + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean negative log-likelihood of `targets` over the positions where
    /// `mask` is true.
    pub fn cross_entropy_masked(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        self.cross_entropy_masked_sum(logits, targets, mask, count as f64)
    }

    /// Sum of masked negative log-likelihoods divided by `denom`. Lets a batch
    /// split across several tapes share one denominator.
    pub fn cross_entropy_masked_sum(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
        denom: f64,
    ) -> Result<Var> {
        let (t, vocab) = self.value(logits).dims2("cross_entropy_masked")?;
        if targets.len() != t || mask.len() != t {
            return Err(Error::Shape {
                op: "cross_entropy_masked",
                lhs: vec![t, vocab],
                rhs: vec![targets.len(), mask.len()],
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::EmptyLoss);
        }
        if !(denom > 0.0) {
            return Err(Error::Contract(format!("loss denominator {denom} must be positive")));
        }
        let ls = self.value(logits).data();
        let mut probs = vec![0.0; t * vocab];
        let mut total = 0.0;
        for pos in 0..t {
            if !mask[pos] {
                continue;
            }
            let target = targets[pos];
            if target >= vocab {
                return Err(Error::Vocabulary { id: target, vocab });
            }
            let row = &ls[pos * vocab..(pos + 1) * vocab];
            total += kernels::log_sum_exp(row) - row[target];
            kernels::softmax_row(row, &mut probs[pos * vocab..(pos + 1) * vocab]);
        }
        let value = Tensor::scalar(total / denom);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                denom,
                probs,
            },
        ))
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            names: self.nodes.iter().map(|n| n.param.clone()).collect(),
        })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        // Lazily allocated accumulator for an input's gradient.
        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if needs(*a) {
                    let acc = slot(grads, *a, m * k);
                    kernels::matmul_grad_lhs(acc, g, self.value(*b).data(), m, k, n);
                }
                if needs(*b) {
                    let acc = slot(grads, *b, k * n);
                    kernels::matmul_grad_rhs(acc, self.value(*a).data(), g, m, k, n);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        add_into(slot(grads, v, g.len()), g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if needs(*a) {
                    let acc = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        acc[i] += g[i] * bv[i];
                    }
                }
                if needs(*b) {
                    let acc = slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        acc[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddRow(x, row) => {
                if needs(*x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
                if needs(*row) {
                    let c = self.shape(*row)[0];
                    let acc = slot(grads, *row, c);
                    for chunk in g.chunks_exact(c) {
                        add_into(acc, chunk);
                    }
                }
            }
            Op::Scale(x, s) => {
                let sv = self.scalar(*s);
                if needs(*x) {
                    let acc = slot(grads, *x, g.len());
                    for (a, gv) in acc.iter_mut().zip(g) {
                        *a += sv * gv;
                    }
                }
                if needs(*s) {
                    let total = kernels::dot(g, self.value(*x).data());
                    slot(grads, *s, 1)[0] += total;
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                for a in slot(grads, *x, n).iter_mut() {
                    *a += g[0];
                }
            }
            Op::Gelu(x) => {
                let xs = self.value(*x).data();
                let acc = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    acc[i] += g[i] * kernels::gelu_grad(xs[i]);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = self.shape(*gain)[0];
                let rows = inv_std.len();
                let gv = self.value(*gain).data();
                if needs(*gain) {
                    let acc = slot(grads, *gain, d);
                    for r in 0..rows {
                        for c in 0..d {
                            acc[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                }
                if needs(*bias) {
                    let acc = slot(grads, *bias, d);
                    for chunk in g.chunks_exact(d) {
                        add_into(acc, chunk);
                    }
                }
                if needs(*x) {
                    let acc = slot(grads, *x, rows * d);
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let h = &xhat[r * d..(r + 1) * d];
                        for c in 0..d {
                            dxhat[c] = g[r * d + c] * gv[c];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dh = kernels::dot(&dxhat, h) / d as f64;
                        for c in 0..d {
                            acc[r * d + c] += inv_std[r] * (dxhat[c] - mean_d - h[c] * mean_dh);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = *node.value.shape().last().expect("non-empty shape");
                let acc = slot(grads, *x, y.len());
                for ((ys, gs), a) in y.chunks_exact(n).zip(g.chunks_exact(n)).zip(acc.chunks_exact_mut(n)) {
                    let inner = kernels::dot(ys, gs);
                    for i in 0..n {
                        a[i] += ys[i] * (gs[i] - inner);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = (self.shape(*x)[0], self.shape(*x)[1]);
                let w = node.value.shape()[1];
                let acc = slot(grads, *x, rows * cols);
                for r in 0..rows {
                    add_into(&mut acc[r * cols + start..r * cols + start + w], &g[r * w..(r + 1) * w]);
                }
            }
            Op::Slab { x, index } => {
                let n = self.value(*x).numel();
                let size = g.len();
                let acc = slot(grads, *x, n);
                add_into(&mut acc[index * size..(index + 1) * size], g);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                causal,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, *causal, probs, g, grads),
            Op::AvgPool { x, kernel } => {
                let (t, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let acc = slot(grads, *x, t * d);
                for r in 0..t {
                    let j = r / kernel;
                    let hi = ((j + 1) * kernel).min(t);
                    let count = (hi - j * kernel) as f64;
                    for c in 0..d {
                        acc[r * d + c] += g[j * d + c] / count;
                    }
                }
            }
            Op::ConcatRows(a, b) => {
                let split = self.value(*a).numel();
                if needs(*a) {
                    add_into(slot(grads, *a, split), &g[..split]);
                }
                if needs(*b) {
                    add_into(slot(grads, *b, g.len() - split), &g[split..]);
                }
            }
            Op::Gather { table, ids } => {
                let n = self.value(*table).numel();
                let d = self.shape(*table)[1];
                let acc = slot(grads, *table, n);
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut acc[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                denom,
                probs,
            } => {
                let vocab = self.shape(*logits)[1];
                let acc = slot(grads, *logits, probs.len());
                let scale = g[0] / denom;
                for (pos, &m) in mask.iter().enumerate() {
                    if !m {
                        continue;
                    }
                    let row = &mut acc[pos * vocab..(pos + 1) * vocab];
                    for (c, a) in row.iter_mut().enumerate() {
                        *a += scale * probs[pos * vocab + c];
                    }
                    row[targets[pos]] -= scale;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        causal: bool,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (t, d) = (self.shape(q)[0], self.shape(q)[1]);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![0.0; t * d];
        let mut dk = vec![0.0; t * d];
        let mut dv = vec![0.0; t * d];
        let mut dp = vec![0.0; t];
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..t {
                let visible = if causal { i + 1 } else { t };
                let p = &probs[(h * t + i) * t..(h * t + i) * t + visible];
                let gi = &g[i * d + c0..i * d + c0 + dh];
                for j in 0..visible {
                    dp[j] = kernels::dot(gi, &vs[j * d + c0..j * d + c0 + dh]);
                    for (a, &gv) in dv[j * d + c0..j * d + c0 + dh].iter_mut().zip(gi) {
                        *a += p[j] * gv;
                    }
                }
                let inner = kernels::dot(&p[..visible], &dp[..visible]);
                let qi = &qs[i * d + c0..i * d + c0 + dh];
                for j in 0..visible {
                    let ds = p[j] * (dp[j] - inner) * scale;
                    let kj = &ks[j * d + c0..j * d + c0 + dh];
                    for c in 0..dh {
                        dq[i * d + c0 + c] += ds * kj[c];
                        dk[j * d + c0 + c] += ds * qi[c];
                    }
                }
            }
        }
        for (var, local) in [(q, dq), (k, dk), (v, dv)] {
            if self.nodes[var.0].requires_grad {
                add_into(grads[var.0].get_or_insert_with(|| vec![0.0; t * d]), &local);
            }
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, v) in acc.iter_mut().zip(g) {
        *a += v;
    }
}

/// Result of [`Tape::backward`]: gradients of every leaf that required one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    names: Vec<Option<String>>,
}

impl Gradients {
    /// Gradient with respect to a leaf, if it required one and was reached.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients keyed by parameter name, summed over repeated registrations.
    pub fn by_param(&self) -> BTreeMap<String, Vec<f64>> {
        let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (name, grad) in self.names.iter().zip(&self.grads) {
            if let (Some(name), Some(grad)) = (name, grad) {
                match out.get_mut(name) {
                    Some(acc) => add_into(acc, grad),
                    None => {
                        out.insert(name.clone(), grad.clone());
                    }
                }
            }
        }
        out
    }

    /// Adds these gradients into the matching parameters' buffers.
    pub fn accumulate_into<P: ParamSet + ?Sized>(&self, set: &mut P) -> Result<()> {
        let by_name = self.by_param();
        for p in set.params_mut() {
            if let Some(g) = by_name.get(p.name()) {
                p.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}
