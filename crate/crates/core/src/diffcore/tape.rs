//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive appends one node holding its output value plus whatever it
//! needs for the adjoint. Nodes are only ever appended, so inputs always
//! precede their consumers and a single reverse sweep visits each node once.

use std::collections::BTreeMap;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Fill value for masked attention logits. Finite so every primitive keeps
/// finite outputs; `exp` of it underflows to exactly zero.
pub const MASK_FILL: f64 = -1.0e9;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A packed sequence inside a row-stacked batch: rows `start..start + len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    AddRow { a: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, k: f64 },
    Embedding { table: Var, ids: Vec<usize> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu { x: Var },
    Softmax { x: Var },
    LogSoftmax { x: Var },
    Gather { x: Var, idx: Vec<usize> },
    Concat { parts: Vec<Var> },
    SelectRows { x: Var, rows: Vec<usize> },
    CausalMaskFill { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    SegmentSum { x: Var, segments: Vec<Segment> },
    Softplus { x: Var },
    Attention { q: Var, k: Var, v: Var, segments: Vec<Segment>, heads: usize, probs: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<String>,
    requires_grad: bool,
}

/// Ordered record of primitive applications.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient map keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn insert(&mut self, name: String, grad: Tensor) {
        self.map.insert(name, grad);
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.map
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(shape_err(op, format!("expected a matrix, got {s:?}"))),
    }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, param: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Records a named trainable leaf.
    pub fn param(&mut self, name: &str, t: Tensor) -> Var {
        let v = self.push(t, Op::Leaf, true);
        self.nodes[v.0].param = Some(name.to_string());
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, false, b, false)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, false, b, true)
    }

    /// `op(a) · op(b)` with optional transposition of either operand.
    pub fn matmul_ex(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (ar, ac) = check_rank2("matmul", self.value(a))?;
        let (br, bc) = check_rank2("matmul", self.value(b))?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("{:?}{} x {:?}{}", [ar, ac], if ta { "ᵀ" } else { "" }, [br, bc], if tb { "ᵀ" } else { "" }),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), ta, self.value(b).data(), tb, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, ta, tb }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape())));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub { a, b }, rg))
    }

    /// Adds a bias vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let c = self.value(a).cols();
        if self.value(bias).len() != c {
            return Err(shape_err("add_row", format!("{:?} + {:?}", self.value(a).shape(), self.value(bias).shape())));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(c) {
            for (x, y) in row.iter_mut().zip(&b) {
                *x += y;
            }
        }
        let rg = self.rg(&[a, bias]);
        Ok(self.push(out, Op::AddRow { a, bias }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a).map(|x| k * x);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale { a, k }, rg)
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = check_rank2("embedding", self.value(table))?;
        if ids.is_empty() {
            return Err(Error::EmptyAxis { op: "embedding" });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(shape_err("embedding", format!("id {bad} out of range for table {:?}", [v, d])));
        }
        let tab = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tab[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(t, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    /// Row-wise layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(shape_err(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}", self.value(x).shape(), self.value(gain).shape(), self.value(bias).shape()),
            ));
        }
        let xs = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xs.rows();
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = xs.row(r);
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..c {
                let h = (row[j] - mu) * inv;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(xs.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu_fwd);
        let rg = self.rg(&[x]);
        self.push(t, Op::Gelu { x }, rg)
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x);
        let c = xs.cols();
        let mut out = xs.data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let t = Tensor::new(xs.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax { x }, rg))
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x);
        let c = xs.cols();
        let mut out = xs.data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let t = Tensor::new(xs.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::LogSoftmax { x }, rg))
    }

    /// Picks `x[i, idx[i]]` for every row `i`, giving a vector.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xs = self.value(x);
        let (r, c) = (xs.rows(), xs.cols());
        if idx.len() != r {
            return Err(shape_err("gather", format!("{} indices for {:?}", idx.len(), xs.shape())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(shape_err("gather", format!("index {bad} out of range for {:?}", xs.shape())));
        }
        let out: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| xs.data()[i * c + j]).collect();
        let t = Tensor::vector(out);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Gather { x, idx: idx.to_vec() }, rg))
    }

    /// Stacks matrices with equal column counts along the row axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyAxis { op: "concat" })?;
        let c = self.value(first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.cols() != c {
                return Err(shape_err("concat", format!("{:?} vs {} columns", t.shape(), c)));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let t = Tensor::new(vec![rows, c], out)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::Concat { parts: parts.to_vec() }, rg))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xs = self.value(x);
        let (r, c) = check_rank2("select_rows", xs)?;
        if rows.is_empty() {
            return Err(Error::EmptyAxis { op: "select_rows" });
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(shape_err("select_rows", format!("row {bad} out of range for {:?}", xs.shape())));
        }
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(xs.row(i));
        }
        let t = Tensor::new(vec![rows.len(), c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SelectRows { x, rows: rows.to_vec() }, rg))
    }

    /// Replaces entries above the diagonal of each trailing square matrix
    /// with [`MASK_FILL`].
    pub fn causal_mask_fill(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x);
        let s = xs.shape();
        if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
            return Err(shape_err("causal_mask_fill", format!("trailing axes must be square, got {s:?}")));
        }
        let n = s[s.len() - 1];
        let mut out = xs.data().to_vec();
        for block in out.chunks_mut(n * n) {
            for i in 0..n {
                for j in (i + 1)..n {
                    block[i * n + j] = MASK_FILL;
                }
            }
        }
        let t = Tensor::new(s.to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::CausalMaskFill { x }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).data().iter().sum());
        let rg = self.rg(&[x]);
        self.push(t, Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let t = Tensor::scalar(xs.data().iter().sum::<f64>() / xs.len() as f64);
        let rg = self.rg(&[x]);
        self.push(t, Op::Mean { x }, rg)
    }

    /// Sums contiguous runs of a vector, one output per segment.
    pub fn segment_sum(&mut self, x: Var, segments: &[Segment]) -> Result<Var> {
        let xs = self.value(x);
        if segments.is_empty() {
            return Err(Error::EmptyAxis { op: "segment_sum" });
        }
        if let Some(s) = segments.iter().find(|s| s.len == 0 || s.start + s.len > xs.len()) {
            return Err(shape_err("segment_sum", format!("segment {s:?} outside {:?}", xs.shape())));
        }
        let out = segments.iter().map(|s| xs.data()[s.start..s.start + s.len].iter().sum()).collect();
        let t = Tensor::vector(out);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SegmentSum { x, segments: segments.to_vec() }, rg))
    }

    /// `ln(1 + eˣ)`, elementwise.
    pub fn softplus(&mut self, x: Var) -> Var {
        let t = self.value(x).map(softplus);
        let rg = self.rg(&[x]);
        self.push(t, Op::Softplus { x }, rg)
    }

    /// Multi-head causal self-attention over row-packed sequences.
    ///
    /// `q`, `k`, `v` are `rows × d`; each segment attends only within itself
    /// and only to positions at or before the query position.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, segments: &[Segment], heads: usize) -> Result<Var> {
        let (r, d) = check_rank2("attention", self.value(q))?;
        if self.value(k).shape() != [r, d] || self.value(v).shape() != [r, d] {
            return Err(shape_err(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", [r, d], self.value(k).shape(), self.value(v).shape()),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(shape_err("attention", format!("{d} columns not divisible into {heads} heads")));
        }
        if let Some(s) = segments.iter().find(|s| s.len == 0 || s.start + s.len > r) {
            return Err(shape_err("attention", format!("segment {s:?} outside {r} rows")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; r * d];
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for seg in segments {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seg.len {
                    let qi = &qd[(seg.start + i) * d + off..][..dh];
                    scores.clear();
                    let mut m = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = &kd[(seg.start + j) * d + off..][..dh];
                        let s = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                        m = m.max(s);
                        scores.push(s);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - m).exp();
                        z += *s;
                    }
                    let oi = &mut out[(seg.start + i) * d + off..][..dh];
                    for (j, s) in scores.iter().enumerate() {
                        let p = s / z;
                        probs.push(p);
                        let vj = &vd[(seg.start + j) * d + off..][..dh];
                        for (o, x) in oi.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![r, d], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(t, Op::Attention { q, k, v, segments: segments.to_vec(), heads, probs }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// The returned map has one entry per name in `trainable`; names whose
    /// parameter never appeared on the tape get an exact zero tensor.
    pub fn backward(&self, loss: Var, trainable: &[(&str, &[usize])]) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut found: BTreeMap<String, Vec<f64>> = BTreeMap::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            if let Some(name) = &node.param {
                match found.get_mut(name) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        found.insert(name.clone(), g);
                    }
                }
            }
        }

        let mut out = Gradients::default();
        for &(name, shape) in trainable {
            let t = match found.remove(name) {
                Some(g) => Tensor::new(shape.to_vec(), g)?,
                None => Tensor::zeros(shape),
            };
            out.insert(name.to_string(), t);
        }
        Ok(out)
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                let k = if *ta { av.shape()[0] } else { av.shape()[1] };
                let (ad, bd) = (av.data(), bv.data());
                if let Some(da) = self.acc(grads, *a) {
                    match (*ta, *tb) {
                        (false, false) => gemm(m, n, k, g, false, bd, true, da, 1.0),
                        (false, true) => gemm(m, n, k, g, false, bd, false, da, 1.0),
                        (true, false) => gemm(k, n, m, bd, false, g, true, da, 1.0),
                        (true, true) => gemm(k, n, m, bd, true, g, true, da, 1.0),
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    match (*ta, *tb) {
                        (false, false) => gemm(k, m, n, ad, true, g, false, db, 1.0),
                        (false, true) => gemm(n, m, k, g, true, ad, false, db, 1.0),
                        (true, false) => gemm(k, m, n, ad, false, g, false, db, 1.0),
                        (true, true) => gemm(n, m, k, g, true, ad, true, db, 1.0),
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(d) = self.acc(grads, v) {
                        d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub { a, b } => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(d) = self.acc(grads, *b) {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::AddRow { a, bias } => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                let c = node.value.cols();
                if let Some(d) = self.acc(grads, *bias) {
                    for row in g.chunks(c) {
                        d.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.acc(grads, *a) {
                    for ((x, gy), bv) in d.iter_mut().zip(g).zip(bd) {
                        *x += gy * bv;
                    }
                }
                if let Some(d) = self.acc(grads, *b) {
                    for ((x, gy), av) in d.iter_mut().zip(g).zip(ad) {
                        *x += gy * av;
                    }
                }
            }
            Op::Scale { a, k } => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += k * y);
                }
            }
            Op::Embedding { table, ids } => {
                let dcols = node.value.cols();
                if let Some(d) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut d[id * dcols..(id + 1) * dcols];
                        dst.iter_mut().zip(&g[r * dcols..(r + 1) * dcols]).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let c = node.value.cols();
                let gv = self.value(*gain).data().to_vec();
                if let Some(d) = self.acc(grads, *gain) {
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            d[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(d) = self.acc(grads, *bias) {
                    for gr in g.chunks(c) {
                        d.iter_mut().zip(gr).for_each(|(x, y)| *x += y);
                    }
                }
                if let Some(d) = self.acc(grads, *x) {
                    let nf = c as f64;
                    for (r, (gr, hr)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            let dh = gr[j] * gv[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        let inv = inv_std[r];
                        let dr = &mut d[r * c..(r + 1) * c];
                        for j in 0..c {
                            let dh = gr[j] * gv[j];
                            dr[j] += inv / nf * (nf * dh - s1 - hr[j] * s2);
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                let xd = self.value(*x).data();
                if let Some(d) = self.acc(grads, *x) {
                    for ((a, gy), xv) in d.iter_mut().zip(g).zip(xd) {
                        *a += gy * gelu_grad(*xv);
                    }
                }
            }
            Op::Softmax { x } => {
                let c = node.value.cols();
                let y = node.value.data();
                if let Some(d) = self.acc(grads, *x) {
                    for ((dr, gr), yr) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { x } => {
                let c = node.value.cols();
                let y = node.value.data();
                if let Some(d) = self.acc(grads, *x) {
                    for ((dr, gr), yr) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let s: f64 = gr.iter().sum();
                        for j in 0..c {
                            dr[j] += gr[j] - yr[j].exp() * s;
                        }
                    }
                }
            }
            Op::Gather { x, idx } => {
                let c = self.value(*x).cols();
                if let Some(d) = self.acc(grads, *x) {
                    for (i, &j) in idx.iter().enumerate() {
                        d[i * c + j] += g[i];
                    }
                }
            }
            Op::Concat { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(d) = self.acc(grads, p) {
                        d.iter_mut().zip(&g[off..off + n]).for_each(|(x, y)| *x += y);
                    }
                    off += n;
                }
            }
            Op::SelectRows { x, rows } => {
                let c = node.value.cols();
                if let Some(d) = self.acc(grads, *x) {
                    for (r, &src) in rows.iter().enumerate() {
                        let dst = &mut d[src * c..(src + 1) * c];
                        dst.iter_mut().zip(&g[r * c..(r + 1) * c]).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::CausalMaskFill { x } => {
                let n = node.value.cols();
                if let Some(d) = self.acc(grads, *x) {
                    for (db, gb) in d.chunks_mut(n * n).zip(g.chunks(n * n)) {
                        for i in 0..n {
                            for j in 0..=i {
                                db[i * n + j] += gb[i * n + j];
                            }
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(d) = self.acc(grads, *x) {
                    d.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Mean { x } => {
                let n = self.value(*x).len() as f64;
                if let Some(d) = self.acc(grads, *x) {
                    d.iter_mut().for_each(|a| *a += g[0] / n);
                }
            }
            Op::SegmentSum { x, segments } => {
                if let Some(d) = self.acc(grads, *x) {
                    for (s, gs) in segments.iter().zip(g) {
                        d[s.start..s.start + s.len].iter_mut().for_each(|a| *a += gs);
                    }
                }
            }
            Op::Softplus { x } => {
                let xd = self.value(*x).data();
                if let Some(d) = self.acc(grads, *x) {
                    for ((a, gy), xv) in d.iter_mut().zip(g).zip(xd) {
                        *a += gy * sigmoid(*xv);
                    }
                }
            }
            Op::Attention { q, k, v, segments, heads, probs } => {
                self.attention_backward(*q, *k, *v, segments, *heads, probs, g, grads);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let d = self.value(q).cols();
        let r = self.value(q).rows();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let (need_q, need_k, need_v) = (self.requires_grad(q), self.requires_grad(k), self.requires_grad(v));
        let mut dq = vec![0.0; if need_q { r * d } else { 0 }];
        let mut dk = vec![0.0; if need_k { r * d } else { 0 }];
        let mut dv = vec![0.0; if need_v { r * d } else { 0 }];
        let mut dp = Vec::new();
        let mut p_off = 0;
        for seg in segments {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seg.len {
                    let row_i = (seg.start + i) * d + off;
                    let gi = &g[row_i..row_i + dh];
                    let pi = &probs[p_off..p_off + i + 1];
                    p_off += i + 1;
                    dp.clear();
                    let mut dot = 0.0;
                    for (j, &p) in pi.iter().enumerate() {
                        let row_j = (seg.start + j) * d + off;
                        let vj = &vd[row_j..row_j + dh];
                        let dpij: f64 = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                        dot += p * dpij;
                        dp.push(dpij);
                        if need_v {
                            for (x, y) in dv[row_j..row_j + dh].iter_mut().zip(gi) {
                                *x += p * y;
                            }
                        }
                    }
                    if !(need_q || need_k) {
                        continue;
                    }
                    let qi = &qd[row_i..row_i + dh];
                    for (j, &p) in pi.iter().enumerate() {
                        let ds = p * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let row_j = (seg.start + j) * d + off;
                        if need_q {
                            let kj = &kd[row_j..row_j + dh];
                            for (x, y) in dq[row_i..row_i + dh].iter_mut().zip(kj) {
                                *x += ds * y;
                            }
                        }
                        if need_k {
                            for (x, y) in dk[row_j..row_j + dh].iter_mut().zip(qi) {
                                *x += ds * y;
                            }
                        }
                    }
                }
            }
        }
        for (var, buf, need) in [(q, dq, need_q), (k, dk, need_k), (v, dv, need_v)] {
            if !need {
                continue;
            }
            if let Some(dst) = self.acc(grads, var) {
                dst.iter_mut().zip(&buf).for_each(|(a, b)| *a += b);
            }
        }
    }
}
