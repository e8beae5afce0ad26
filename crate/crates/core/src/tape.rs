//! Recorded-operation reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and enough
//! structure to replay the chain rule. [`Tape::backward`] walks the nodes in
//! exact reverse order of recording, so a single forward pass yields the
//! gradient of a scalar loss with respect to every node that requires one.
//! A tape is meant to live for one forward/backward pass and then be dropped.

use std::collections::{BTreeMap, HashMap};

use crate::error::{DanError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Derivative of an elementwise map, given input `x` and output `y`.
pub type ElemDeriv = fn(x: f64, y: f64) -> f64;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Option<Var> },
    AffineRows { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulRowBroadcast { rows: Var, vec: Var },
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Map { x: Var, deriv: ElemDeriv },
    SoftmaxMasked { scores: Var, mask: Vec<bool> },
    WeightedSum { weights: Var, rows: Var },
    MeanRows { rows: Var, count: usize },
    Dot(Var, Var),
    Concat(Vec<Var>),
    GatherColumns { table: Var, ids: Vec<usize> },
    Row { src: Var, index: usize },
    StackRows(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    AddN(Vec<Var>),
    CrossEntropy { logits: Var, target: usize, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<(String, Var)>,
    by_name: HashMap<String, Var>,
}

fn shape_err(op: &'static str, left: &Tensor, right: &Tensor) -> DanError {
    DanError::Shape {
        op,
        left: left.shape().to_vec(),
        right: right.shape().to_vec(),
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

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Loads a named parameter as a differentiable leaf. Repeated calls with
    /// the same name return the same node, so gradients accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.by_name.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| DanError::UnknownParam(name.to_string()))?
            .clone();
        let v = self.variable(value);
        self.bindings.push((name.to_string(), v));
        self.by_name.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters bound on this tape, in binding order.
    pub fn bindings(&self) -> &[(String, Var)] {
        &self.bindings
    }

    /// `w · x + b` for a matrix `w` of shape `[m, n]` and vector `x` of length `n`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.rank() != 2 || xv.rank() != 1 || wv.shape()[1] != xv.len() {
            return Err(shape_err("affine", wv, xv));
        }
        let (m, n) = (wv.shape()[0], wv.shape()[1]);
        let mut out = match b {
            Some(b) => {
                let bv = self.value(b);
                if bv.shape() != [m] {
                    return Err(shape_err("affine bias", wv, bv));
                }
                bv.data().to_vec()
            }
            None => vec![0.0; m],
        };
        let (xd, wd) = (xv.data(), wv.data());
        for (i, o) in out.iter_mut().enumerate() {
            let row = &wd[i * n..(i + 1) * n];
            *o += row.iter().zip(xd).map(|(a, b)| a * b).sum::<f64>();
        }
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(Tensor::vector(out), Op::Affine { x, w, b }, rg))
    }

    /// Row-wise affine map: `x · wᵀ + b` for `x` of shape `[r, n]` and `w` of
    /// shape `[m, n]`, giving `[r, m]`.
    pub fn affine_rows(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.rank() != 2 || xv.rank() != 2 || wv.shape()[1] != xv.shape()[1] {
            return Err(shape_err("affine_rows", wv, xv));
        }
        let (r, m, n) = (xv.shape()[0], wv.shape()[0], wv.shape()[1]);
        let bias = match b {
            Some(b) => {
                let bv = self.value(b);
                if bv.shape() != [m] {
                    return Err(shape_err("affine_rows bias", wv, bv));
                }
                Some(bv.data())
            }
            None => None,
        };
        let (xd, wd) = (xv.data(), wv.data());
        let mut out = vec![0.0; r * m];
        for row in 0..r {
            let xr = &xd[row * n..(row + 1) * n];
            for i in 0..m {
                let wr = &wd[i * n..(i + 1) * n];
                let s: f64 = wr.iter().zip(xr).map(|(a, b)| a * b).sum();
                out[row * m + i] = s + bias.map_or(0.0, |b| b[i]);
            }
        }
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        let value = Tensor::new(vec![r, m], out)?;
        Ok(self.push(value, Op::AffineRows { x, w, b }, rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(op, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product of two tensors of identical shape.
    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "mul_elem", |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(av.shape().to_vec(), data).expect("same layout");
        let rg = self.requires_grad(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    /// Multiplies every row of a `[r, d]` matrix elementwise by a length-`d` vector.
    pub fn mul_row_broadcast(&mut self, rows: Var, vec: Var) -> Result<Var> {
        let (rv, vv) = (self.value(rows), self.value(vec));
        if rv.rank() != 2 || vv.rank() != 1 || rv.shape()[1] != vv.len() {
            return Err(shape_err("mul_row_broadcast", rv, vv));
        }
        let d = vv.len();
        let data = rv
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * vv.data()[i % d])
            .collect();
        let value = Tensor::new(rv.shape().to_vec(), data)?;
        let rg = self.any_grad(&[rows, vec]);
        Ok(self.push(value, Op::MulRowBroadcast { rows, vec }, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| f(*x)).collect();
        let value = Tensor::new(av.shape().to_vec(), data).expect("same layout");
        let rg = self.requires_grad(a);
        self.push(value, op, rg)
    }

    pub fn tanh_elem(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid_elem(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// `max(0, x)`; the reverse rule uses subgradient 0 at exactly 0.
    pub fn relu_elem(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Elementwise map with a caller-supplied derivative rule.
    pub fn map_elem(&mut self, a: Var, f: fn(f64) -> f64, deriv: ElemDeriv) -> Var {
        self.unary(a, f, Op::Map { x: a, deriv })
    }

    /// Softmax restricted to the entries where `mask` is true. Masked entries
    /// come out exactly zero.
    pub fn softmax_masked(&mut self, scores: Var, mask: &[bool]) -> Result<Var> {
        let sv = self.value(scores);
        if sv.rank() != 1 || sv.len() != mask.len() {
            return Err(DanError::Shape {
                op: "softmax_masked",
                left: sv.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let probs = masked_softmax(sv.data(), mask)?;
        let rg = self.requires_grad(scores);
        Ok(self.push(
            Tensor::vector(probs),
            Op::SoftmaxMasked {
                scores,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    /// `Σₙ weights[n] · rows[n]`.
    pub fn weighted_sum(&mut self, weights: Var, rows: Var) -> Result<Var> {
        let (wv, rv) = (self.value(weights), self.value(rows));
        if wv.rank() != 1 || rv.rank() != 2 || rv.shape()[0] != wv.len() {
            return Err(shape_err("weighted_sum", wv, rv));
        }
        let d = rv.shape()[1];
        let mut out = vec![0.0; d];
        for (n, &a) in wv.data().iter().enumerate() {
            for (o, x) in out.iter_mut().zip(rv.row(n)) {
                *o += a * x;
            }
        }
        let rg = self.any_grad(&[weights, rows]);
        Ok(self.push(Tensor::vector(out), Op::WeightedSum { weights, rows }, rg))
    }

    /// Mean of the first `count` rows of a matrix.
    pub fn mean_rows(&mut self, rows: Var, count: usize) -> Result<Var> {
        let rv = self.value(rows);
        if rv.rank() != 2 {
            return Err(DanError::Shape {
                op: "mean_rows",
                left: rv.shape().to_vec(),
                right: vec![count],
            });
        }
        if count == 0 {
            return Err(DanError::EmptyInput("mean_rows"));
        }
        if count > rv.shape()[0] {
            return Err(DanError::OutOfRange {
                what: "mean_rows count",
                index: count,
                limit: rv.shape()[0],
            });
        }
        let mut out = vec![0.0; rv.shape()[1]];
        for n in 0..count {
            for (o, x) in out.iter_mut().zip(rv.row(n)) {
                *o += x;
            }
        }
        let inv = count as f64;
        out.iter_mut().for_each(|o| *o /= inv);
        let rg = self.requires_grad(rows);
        Ok(self.push(Tensor::vector(out), Op::MeanRows { rows, count }, rg))
    }

    /// Inner product of two vectors; the result is a scalar node.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 1 || av.shape() != bv.shape() {
            return Err(shape_err("dot", av, bv));
        }
        let s = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).sum();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), rg))
    }

    /// Order-preserving concatenation of vectors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(DanError::EmptyInput("concat"));
        }
        let mut out = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.rank() != 1 {
                return Err(shape_err("concat", self.value(parts[0]), pv));
            }
            out.extend_from_slice(pv.data());
        }
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::vector(out), Op::Concat(parts.to_vec()), rg))
    }

    /// Selects columns of a `[d, V]` table, one per id, giving `[ids.len(), d]`.
    pub fn gather_columns(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(DanError::Shape {
                op: "gather_columns",
                left: tv.shape().to_vec(),
                right: vec![ids.len()],
            });
        }
        let (d, vocab) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(DanError::OutOfRange {
                    what: "token id",
                    index: id,
                    limit: vocab,
                });
            }
            out.extend((0..d).map(|i| tv.data()[i * vocab + id]));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.requires_grad(table);
        Ok(self.push(
            value,
            Op::GatherColumns {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn row(&mut self, src: Var, index: usize) -> Result<Var> {
        let sv = self.value(src);
        if sv.rank() != 2 {
            return Err(DanError::Shape {
                op: "row",
                left: sv.shape().to_vec(),
                right: vec![index],
            });
        }
        if index >= sv.shape()[0] {
            return Err(DanError::OutOfRange {
                what: "row",
                index,
                limit: sv.shape()[0],
            });
        }
        let value = Tensor::vector(sv.row(index).to_vec());
        let rg = self.requires_grad(src);
        Ok(self.push(value, Op::Row { src, index }, rg))
    }

    /// Stacks equal-length vectors into the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(DanError::EmptyInput("stack_rows"));
        }
        let d = self.value(rows[0]).len();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            let rv = self.value(r);
            if rv.rank() != 1 || rv.len() != d {
                return Err(shape_err("stack_rows", self.value(rows[0]), rv));
            }
            out.extend_from_slice(rv.data());
        }
        let value = Tensor::new(vec![rows.len(), d], out)?;
        let rg = self.any_grad(rows);
        Ok(self.push(value, Op::StackRows(rows.to_vec()), rg))
    }

    pub fn reshape(&mut self, src: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(src).clone().reshaped(shape)?;
        let rg = self.requires_grad(src);
        Ok(self.push(value, Op::Reshape(src), rg))
    }

    /// Sum of all entries, as a scalar node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Sum of several tensors of identical shape.
    pub fn add_n(&mut self, terms: &[Var]) -> Result<Var> {
        if terms.is_empty() {
            return Err(DanError::EmptyInput("add_n"));
        }
        let first = self.value(terms[0]);
        let shape = first.shape().to_vec();
        let mut out = vec![0.0; first.len()];
        for &t in terms {
            let tv = self.value(t);
            if tv.shape() != shape.as_slice() {
                return Err(shape_err("add_n", self.value(terms[0]), tv));
            }
            for (o, x) in out.iter_mut().zip(tv.data()) {
                *o += x;
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.any_grad(terms);
        Ok(self.push(value, Op::AddN(terms.to_vec()), rg))
    }

    /// `−log softmax(logits)[target]`, evaluated in log-sum-exp form.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 1 || lv.is_empty() {
            return Err(DanError::Shape {
                op: "cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![target],
            });
        }
        if target >= lv.len() {
            return Err(DanError::OutOfRange {
                what: "target class",
                index: target,
                limit: lv.len(),
            });
        }
        let max = lv.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = lv.data().iter().map(|x| (x - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        let loss = log_z - lv.data()[target];
        let probs = lv.data().iter().map(|x| (x - log_z).exp()).collect();
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar loss. Nodes are visited in exact reverse
    /// order of recording.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(DanError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        // Accumulates into the gradient buffer of `v`, if it needs one.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let n = xv.len();
                acc(*w, &mut |gw| {
                    for (r, gi) in g.iter().enumerate() {
                        for (gwj, xj) in gw[r * n..(r + 1) * n].iter_mut().zip(xv.data()) {
                            *gwj += gi * xj;
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    for (r, gi) in g.iter().enumerate() {
                        for (gxj, wj) in gx.iter_mut().zip(&wv.data()[r * n..(r + 1) * n]) {
                            *gxj += gi * wj;
                        }
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |gb| add_into(gb, g));
                }
            }
            Op::AffineRows { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (r, m, n) = (xv.shape()[0], wv.shape()[0], wv.shape()[1]);
                acc(*w, &mut |gw| {
                    for row in 0..r {
                        let xr = xv.row(row);
                        for i in 0..m {
                            let gi = g[row * m + i];
                            for (gwj, xj) in gw[i * n..(i + 1) * n].iter_mut().zip(xr) {
                                *gwj += gi * xj;
                            }
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    for row in 0..r {
                        let gxr = &mut gx[row * n..(row + 1) * n];
                        for i in 0..m {
                            let gi = g[row * m + i];
                            for (gxj, wj) in gxr.iter_mut().zip(wv.row(i)) {
                                *gxj += gi * wj;
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |gb| {
                        for row in 0..r {
                            add_into(gb, &g[row * m..(row + 1) * m]);
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, gi)| *o -= gi));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| {
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(bv.data()) {
                        *o += gi * bi;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(av.data()) {
                        *o += gi * ai;
                    }
                });
            }
            Op::Scale(a, factor) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, gi)| *o += gi * factor));
            }
            Op::MulRowBroadcast { rows, vec } => {
                let (rv, vv) = (self.value(*rows), self.value(*vec));
                let d = vv.len();
                acc(*rows, &mut |gr| {
                    for (k, (o, gi)) in gr.iter_mut().zip(g).enumerate() {
                        *o += gi * vv.data()[k % d];
                    }
                });
                acc(*vec, &mut |gv| {
                    for (k, (gi, x)) in g.iter().zip(rv.data()).enumerate() {
                        gv[k % d] += gi * x;
                    }
                });
            }
            Op::Tanh(a) => {
                acc(*a, &mut |ga| {
                    for ((o, gi), y) in ga.iter_mut().zip(g).zip(out.data()) {
                        *o += gi * (1.0 - y * y);
                    }
                });
            }
            Op::Sigmoid(a) => {
                acc(*a, &mut |ga| {
                    for ((o, gi), y) in ga.iter_mut().zip(g).zip(out.data()) {
                        *o += gi * y * (1.0 - y);
                    }
                });
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                acc(*a, &mut |ga| {
                    for ((o, gi), x) in ga.iter_mut().zip(g).zip(av.data()) {
                        if *x > 0.0 {
                            *o += gi;
                        }
                    }
                });
            }
            Op::Map { x, deriv } => {
                let xv = self.value(*x);
                acc(*x, &mut |gx| {
                    for (((o, gi), xi), yi) in gx.iter_mut().zip(g).zip(xv.data()).zip(out.data()) {
                        *o += gi * deriv(*xi, *yi);
                    }
                });
            }
            Op::SoftmaxMasked { scores, mask } => {
                let y = out.data();
                let inner: f64 = y.iter().zip(g).map(|(yi, gi)| yi * gi).sum();
                acc(*scores, &mut |gs| {
                    for (k, o) in gs.iter_mut().enumerate() {
                        if mask[k] {
                            *o += y[k] * (g[k] - inner);
                        }
                    }
                });
            }
            Op::WeightedSum { weights, rows } => {
                let (wv, rv) = (self.value(*weights), self.value(*rows));
                let d = rv.shape()[1];
                acc(*weights, &mut |gw| {
                    for (n, o) in gw.iter_mut().enumerate() {
                        *o += rv.row(n).iter().zip(g).map(|(x, gi)| x * gi).sum::<f64>();
                    }
                });
                acc(*rows, &mut |gr| {
                    for (n, a) in wv.data().iter().enumerate() {
                        for (o, gi) in gr[n * d..(n + 1) * d].iter_mut().zip(g) {
                            *o += a * gi;
                        }
                    }
                });
            }
            Op::MeanRows { rows, count } => {
                let d = out.len();
                let inv = *count as f64;
                acc(*rows, &mut |gr| {
                    for n in 0..*count {
                        for (o, gi) in gr[n * d..(n + 1) * d].iter_mut().zip(g) {
                            *o += gi / inv;
                        }
                    }
                });
            }
            Op::Dot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let gi = g[0];
                acc(*a, &mut |ga| ga.iter_mut().zip(bv.data()).for_each(|(o, x)| *o += gi * x));
                acc(*b, &mut |gb| gb.iter_mut().zip(av.data()).for_each(|(o, x)| *o += gi * x));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(p, &mut |gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::GatherColumns { table, ids } => {
                let vocab = self.value(*table).shape()[1];
                let d = out.cols();
                acc(*table, &mut |gt| {
                    for (t, &id) in ids.iter().enumerate() {
                        for i in 0..d {
                            gt[i * vocab + id] += g[t * d + i];
                        }
                    }
                });
            }
            Op::Row { src, index } => {
                let d = out.len();
                acc(*src, &mut |gs| add_into(&mut gs[index * d..(index + 1) * d], g));
            }
            Op::StackRows(rows) => {
                let d = out.cols();
                for (n, &r) in rows.iter().enumerate() {
                    acc(r, &mut |gr| add_into(gr, &g[n * d..(n + 1) * d]));
                }
            }
            Op::Reshape(src) => acc(*src, &mut |gs| add_into(gs, g)),
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0])),
            Op::AddN(terms) => {
                for &t in terms {
                    acc(t, &mut |gt| add_into(gt, g));
                }
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                acc(*logits, &mut |gl| {
                    for (k, (o, p)) in gl.iter_mut().zip(probs).enumerate() {
                        let onehot = if k == *target { 1.0 } else { 0.0 };
                        *o += g[0] * (p - onehot);
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax over the unmasked entries; masked entries are 0.
/// Non-finite scores propagate as NaN rather than failing.
pub fn masked_softmax(scores: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if !mask.iter().any(|&m| m) {
        return Err(DanError::EmptySupport);
    }
    let max = scores
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(s, _)| *s)
        .fold(f64::NEG_INFINITY, |a, b| if a.is_nan() || b.is_nan() { f64::NAN } else { a.max(b) });
    let mut out: Vec<f64> = scores
        .iter()
        .zip(mask)
        .map(|(s, &m)| if m { (s - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    Ok(out)
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, with zeros substituted when unreachable.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        let value = tape.value(v);
        match self.get(v) {
            Some(g) => Tensor::new(value.shape().to_vec(), g.to_vec()).expect("same layout"),
            None => Tensor::zeros(value.shape()),
        }
    }

    /// Gradients of every parameter bound on `tape`, keyed by name.
    pub fn params(&self, tape: &Tape) -> BTreeMap<String, Tensor> {
        tape.bindings()
            .iter()
            .map(|(name, v)| (name.clone(), self.get_or_zeros(tape, *v)))
            .collect()
    }
}
