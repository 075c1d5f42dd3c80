//! Dense f64 tensors and a reverse-mode gradient tape.
//!
//! Operations execute eagerly: every call on [`Tape`] computes its value
//! immediately and appends a node that remembers its parents. Calling
//! [`Tape::backward`] walks the nodes in reverse insertion order, which is a
//! valid reverse topological order because a node can only reference nodes
//! that already exist.
//!
//! Tensors are at most two dimensional in practice. Row-wise operations treat
//! the last axis as columns and fold every leading axis into rows.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!(
                "dimensions must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor shape is never empty")
    }

    /// Product of every axis but the last.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Named parameter collection. Ordered so that iteration (and therefore
/// serialization and optimizer updates) is deterministic.
pub type TensorMap = BTreeMap<String, Tensor>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Binary, Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Unary(Unary, Var),
    Concat(Vec<Var>),
    Slice { input: Var, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    Sum(Var),
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    SigmoidBce {
        logits: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
    SmoothL1 {
        input: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], keyed by leaf handle.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    /// A tape that rejects non-finite op outputs.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: true,
        }
    }

    /// A tape that skips the per-op finiteness scan.
    pub fn unchecked() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: false,
        }
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

    /// Trainable input.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "matmul needs 2-D operands, got {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (k2, n) = (tb.shape()[0], tb.shape()[1]);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions differ: {m}x{k} · {k2}x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::matrix(m, n, out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "{kind:?} operands differ in shape: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
            })
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        self.push(name, value, Op::Binary(kind, a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// Adds a bias vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.shape().len() != 1 || tb.len() != tx.cols() {
            return Err(Error::Shape(format!(
                "bias {:?} does not match last axis of {:?}",
                tb.shape(),
                tx.shape()
            )));
        }
        let c = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tb.data()[i % c])
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("add_bias", value, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("scale", value, Op::Scale(x, factor), &[x])
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx
            .data()
            .iter()
            .map(|&v| match kind {
                Unary::Sigmoid => sigmoid(v),
                Unary::Tanh => v.tanh(),
                Unary::Relu => v.max(0.0),
            })
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let name = match kind {
            Unary::Sigmoid => "sigmoid",
            Unary::Tanh => "tanh",
            Unary::Relu => "relu",
        };
        self.push(name, value, Op::Unary(kind, x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    /// Concatenates along the last axis. Leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let lead = self.value(*first).shape()[..self.value(*first).shape().len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::Shape(format!(
                    "concat leading axes differ: {lead:?} vs {:?}",
                    &s[..s.len() - 1]
                )));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, data)?;
        self.push("concat", value, Op::Concat(parts.to_vec()), parts)
    }

    /// Columns `start..end` of the last axis.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        if start >= end || end > c {
            return Err(Error::Shape(format!(
                "slice {start}..{end} out of range for last axis {c}"
            )));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(tx.rows() * w);
        for r in 0..tx.rows() {
            data.extend_from_slice(&tx.row(r)[start..end]);
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = w;
        let value = Tensor::new(shape, data)?;
        self.push("slice", value, Op::Slice { input: x, start }, &[x])
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "gather needs a 2-D table, got {:?}",
                tt.shape()
            )));
        }
        if ids.is_empty() {
            return Err(Error::Shape("gather with no ids".into()));
        }
        let (n, c) = (tt.shape()[0], tt.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= n {
                return Err(Error::Index(format!("row {id} out of range for table of {n}")));
            }
            data.extend_from_slice(tt.row(id));
        }
        let value = Tensor::matrix(ids.len(), c, data)?;
        self.push(
            "gather",
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// `−log softmax(logits)[target]` for a single logit vector.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        self.softmax_cross_entropy_rows(logits, &[target], &[1.0])
    }

    /// Weighted sum over rows of `−log softmax(row)[target]`. Rows with weight
    /// zero contribute nothing (used for padding).
    pub fn softmax_cross_entropy_rows(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let tl = self.value(logits);
        let (rows, n) = (tl.rows(), tl.cols());
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::Shape(format!(
                "{rows} logit rows but {} targets and {} weights",
                targets.len(),
                weights.len()
            )));
        }
        let mut probs = Vec::with_capacity(rows * n);
        let mut loss = 0.0;
        for r in 0..rows {
            let t = targets[r];
            if t >= n {
                return Err(Error::Index(format!("target {t} out of range for {n} classes")));
            }
            let row = tl.row(r);
            let lse = log_sum_exp(row);
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
            if weights[r] != 0.0 {
                loss += weights[r] * (lse - row[t]);
            }
        }
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Weighted binary logistic loss on raw logits, labels in {0, 1}.
    pub fn sigmoid_bce(&mut self, logits: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
        let tl = self.value(logits);
        if targets.len() != tl.len() || weights.len() != tl.len() {
            return Err(Error::Shape(format!(
                "{} logits but {} targets and {} weights",
                tl.len(),
                targets.len(),
                weights.len()
            )));
        }
        let loss = tl
            .data()
            .iter()
            .zip(targets)
            .zip(weights)
            .map(|((&x, &y), &w)| w * (softplus(x) - y * x))
            .sum();
        self.push(
            "sigmoid_bce",
            Tensor::scalar(loss),
            Op::SigmoidBce {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            &[logits],
        )
    }

    /// Weighted smooth-L1 (transition at 1) between `input` and fixed targets.
    pub fn smooth_l1(&mut self, input: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
        let ti = self.value(input);
        if targets.len() != ti.len() || weights.len() != ti.len() {
            return Err(Error::Shape(format!(
                "{} inputs but {} targets and {} weights",
                ti.len(),
                targets.len(),
                weights.len()
            )));
        }
        let loss = ti
            .data()
            .iter()
            .zip(targets)
            .zip(weights)
            .map(|((&x, &t), &w)| w * smooth_l1(x - t))
            .sum();
        self.push(
            "smooth_l1",
            Tensor::scalar(loss),
            Op::SmoothL1 {
                input,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            &[input],
        )
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for every leaf
    /// created with `requires_grad` that the loss depends on, then clears the
    /// tape; all outstanding [`Var`] handles become invalid.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract(format!("loss {loss:?} is not on this tape")));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = self.nodes[i].op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }

        let mut out = Gradients::default();
        for (i, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[i];
            if let (Some(g), Op::Leaf, true) = (g, &node.op, node.requires_grad) {
                out.grads
                    .insert(Var(i), Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        self.nodes.clear();
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let acc = |v: Var, grads: &mut [Option<Vec<f64>>], f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                acc(*a, grads, &mut |ga| gemm_nt(g, tb.data(), ga, m, n, k));
                acc(*b, grads, &mut |gb| gemm_tn(ta.data(), g, gb, m, k, n));
            }
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                match kind {
                    Binary::Add => {
                        acc(*a, grads, &mut |ga| add_into(ga, g));
                        acc(*b, grads, &mut |gb| add_into(gb, g));
                    }
                    Binary::Sub => {
                        acc(*a, grads, &mut |ga| add_into(ga, g));
                        acc(*b, grads, &mut |gb| {
                            gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y)
                        });
                    }
                    Binary::Mul => {
                        acc(*a, grads, &mut |ga| {
                            for ((x, &y), &w) in ga.iter_mut().zip(g).zip(tb.data()) {
                                *x += y * w;
                            }
                        });
                        acc(*b, grads, &mut |gb| {
                            for ((x, &y), &w) in gb.iter_mut().zip(g).zip(ta.data()) {
                                *x += y * w;
                            }
                        });
                    }
                }
            }
            Op::AddBias(x, bias) => {
                acc(*x, grads, &mut |gx| add_into(gx, g));
                acc(*bias, grads, &mut |gb| {
                    let c = gb.len();
                    for (j, &v) in g.iter().enumerate() {
                        gb[j % c] += v;
                    }
                });
            }
            Op::Scale(x, f) => {
                acc(*x, grads, &mut |gx| {
                    gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b * f)
                });
            }
            Op::Unary(kind, x) => {
                let out = node.value.data();
                let input = self.value(*x).data();
                acc(*x, grads, &mut |gx| {
                    for j in 0..gx.len() {
                        let d = match kind {
                            Unary::Sigmoid => out[j] * (1.0 - out[j]),
                            Unary::Tanh => 1.0 - out[j] * out[j],
                            Unary::Relu => {
                                if input[j] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        gx[j] += g[j] * d;
                    }
                });
            }
            Op::Concat(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc(p, grads, &mut |gp| {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            add_into(&mut gp[r * w..(r + 1) * w], src);
                        }
                    });
                    offset += w;
                }
            }
            Op::Slice { input, start } => {
                let c = self.value(*input).cols();
                let w = node.value.cols();
                let rows = node.value.rows();
                acc(*input, grads, &mut |gx| {
                    for r in 0..rows {
                        add_into(
                            &mut gx[r * c + start..r * c + start + w],
                            &g[r * w..(r + 1) * w],
                        );
                    }
                });
            }
            Op::Gather { table, ids } => {
                let c = node.value.cols();
                acc(*table, grads, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * c..(id + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, grads, &mut |gx| gx.iter_mut().for_each(|v| *v += g[0]));
            }
            Op::SoftmaxXent {
                logits,
                targets,
                weights,
                probs,
            } => {
                let n = self.value(*logits).cols();
                acc(*logits, grads, &mut |gl| {
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let scale = g[0] * w;
                        for j in 0..n {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * n + j] += scale * (probs[r * n + j] - onehot);
                        }
                    }
                });
            }
            Op::SigmoidBce {
                logits,
                targets,
                weights,
            } => {
                let x = self.value(*logits).data();
                acc(*logits, grads, &mut |gl| {
                    for j in 0..gl.len() {
                        gl[j] += g[0] * weights[j] * (sigmoid(x[j]) - targets[j]);
                    }
                });
            }
            Op::SmoothL1 {
                input,
                targets,
                weights,
            } => {
                let x = self.value(*input).data();
                acc(*input, grads, &mut |gx| {
                    for j in 0..gx.len() {
                        let d = (x[j] - targets[j]).clamp(-1.0, 1.0);
                        gx[j] += g[0] * weights[j] * d;
                    }
                });
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn smooth_l1(d: f64) -> f64 {
    let a = d.abs();
    if a < 1.0 {
        0.5 * d * d
    } else {
        a - 0.5
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|&v| v - lse).collect()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    log_softmax(xs).into_iter().map(f64::exp).collect()
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
}

/// out[m×n] = a[m×k] · b[k×n]
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m×k] += g[m×n] · b[k×n]ᵀ
fn gemm_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// out[k×n] += a[m×k]ᵀ · g[m×n]
fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// Moment buffers and hyperparameters for the adaptive-moment optimizer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: TensorMap,
    second: TensorMap,
}

impl Default for OptimizerState {
    fn default() -> Self {
        OptimizerState::new(1e-3)
    }
}

impl OptimizerState {
    pub fn new(lr: f64) -> Self {
        OptimizerState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: TensorMap::new(),
            second: TensorMap::new(),
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.first.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.second.get(name)
    }
}

/// One bias-corrected adaptive-moment update. Parameters with no entry in
/// `grads` are treated as having a zero gradient.
pub fn optimizer_step(
    params: &mut TensorMap,
    grads: &TensorMap,
    state: &mut OptimizerState,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::Shape(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "gradient for {name} has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let m = state
            .first
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state
            .second
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        if m.shape() != p.shape() {
            return Err(Error::Shape(format!("moment buffer for {name} has the wrong shape")));
        }
        let g = grads.get(name).map(Tensor::data);
        for j in 0..p.len() {
            let gj = g.map_or(0.0, |g| g[j]);
            let mj = state.beta1 * m.data[j] + (1.0 - state.beta1) * gj;
            let vj = state.beta2 * v.data[j] + (1.0 - state.beta2) * gj * gj;
            m.data[j] = mj;
            v.data[j] = vj;
            let mhat = mj / bc1;
            let vhat = vj / bc2;
            p.data[j] -= state.lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let ii = tape.matmul(i, i).unwrap();
        assert_eq!(tape.value(ii).data(), &[1.0, 0.0, 0.0, 1.0]);

        let a = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 1]);
        assert_eq!(tape.value(c).data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn elementwise_basics() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(z).unwrap();
        let t = tape.tanh(z).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5]);
        assert_eq!(tape.value(t).data(), &[0.0]);

        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::vector(vec![3.0]).unwrap());
        let c = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);
        let sl = tape.slice(c, 1, 3).unwrap();
        assert_eq!(tape.value(sl).data(), &[2.0, 3.0]);
        assert!(tape.add(a, b).is_err());
        assert!(tape.slice(c, 2, 4).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[4]));
        let ce = tape.softmax_cross_entropy(l, 2).unwrap();
        assert!(close(tape.value(ce).data()[0], 4f64.ln(), 1e-12));

        let mut v = vec![0.0; 4];
        v[1] = 1e9;
        let l = tape.constant(Tensor::vector(v).unwrap());
        let ce = tape.softmax_cross_entropy(l, 1).unwrap();
        assert!(tape.value(ce).data()[0].abs() < 1e-9);

        assert!(matches!(
            tape.softmax_cross_entropy(l, 4),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut tape = Tape::new();
        let logits = vec![0.3, -1.2, 2.0];
        let l = tape.param(Tensor::vector(logits.clone()).unwrap());
        let ce = tape.softmax_cross_entropy(l, 0).unwrap();
        let g = tape.backward(ce).unwrap();
        let p = softmax(&logits);
        let gl = g.get(l).unwrap().data();
        assert!(close(gl[0], p[0] - 1.0, 1e-15));
        assert!(close(gl[1], p[1], 1e-15));
        assert!(close(gl[2], p[2], 1e-15));
    }

    #[test]
    fn backward_simple_cases() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, -2.0, 5.0]).unwrap());
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert!(tape.is_empty());

        let x = tape.param(Tensor::scalar(3.0));
        let xx = tape.mul(x, x).unwrap();
        let g = tape.backward(xx).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(4.0));
        let y = tape.mul(x, c).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn non_finite_is_reported() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(f64::MAX));
        assert!(matches!(
            tape.scale(x, 10.0),
            Err(Error::NonFinite { op: "scale" })
        ));
        let mut loose = Tape::unchecked();
        let x = loose.constant(Tensor::scalar(f64::MAX));
        assert!(loose.scale(x, 10.0).is_ok());
    }

    #[test]
    fn detection_style_losses() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[3]));
        let bce = tape.sigmoid_bce(l, &[1.0, 0.0, 1.0], &[1.0, 1.0, 1.0]).unwrap();
        assert!(close(tape.value(bce).data()[0], 3.0 * 2f64.ln(), 1e-12));

        let x = tape.constant(Tensor::vector(vec![0.5, 3.0]).unwrap());
        let sl = tape.smooth_l1(x, &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!(close(tape.value(sl).data()[0], 0.125 + 2.5, 1e-12));
    }

    #[test]
    fn optimizer_zero_gradient_leaves_params() {
        let mut params = TensorMap::new();
        params.insert("w".into(), Tensor::vector(vec![1.0, -2.0]).unwrap());
        let before = params.clone();
        let mut grads = TensorMap::new();
        grads.insert("w".into(), Tensor::zeros(&[2]));
        let mut state = OptimizerState::default();
        optimizer_step(&mut params, &grads, &mut state).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step, 1);
        assert_eq!(state.first_moment("w").unwrap().shape(), &[2]);
    }

    #[test]
    fn optimizer_first_step_moves_by_lr() {
        let mut params = TensorMap::new();
        params.insert("w".into(), Tensor::vector(vec![1.0, 1.0]).unwrap());
        let mut grads = TensorMap::new();
        grads.insert("w".into(), Tensor::vector(vec![0.7, -3.0]).unwrap());
        let mut state = OptimizerState::new(0.01);
        optimizer_step(&mut params, &grads, &mut state).unwrap();
        let w = params["w"].data();
        assert!(close(w[0], 1.0 - 0.01, 1e-9));
        assert!(close(w[1], 1.0 + 0.01, 1e-9));
    }

    #[test]
    fn optimizer_shape_mismatch() {
        let mut params = TensorMap::new();
        params.insert("w".into(), Tensor::zeros(&[2]));
        let mut grads = TensorMap::new();
        grads.insert("w".into(), Tensor::zeros(&[3]));
        let mut state = OptimizerState::default();
        assert!(optimizer_step(&mut params, &grads, &mut state).is_err());
        assert_eq!(state.step, 0);
    }

    #[test]
    fn optimizer_converges_on_quadratic() {
        let mut params = TensorMap::new();
        params.insert("w".into(), Tensor::vector(vec![0.8, -0.5, 0.3]).unwrap());
        let mut state = OptimizerState::new(0.05);
        for _ in 0..200 {
            let mut tape = Tape::new();
            let w = tape.param(params["w"].clone());
            let ww = tape.mul(w, w).unwrap();
            let loss = tape.sum(ww).unwrap();
            let mut g = tape.backward(loss).unwrap();
            let mut grads = TensorMap::new();
            grads.insert("w".into(), g.take(w).unwrap());
            optimizer_step(&mut params, &grads, &mut state).unwrap();
        }
        let norm = params["w"].data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-2, "norm {norm}");
    }

    #[test]
    fn argmax_prefers_lower_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }
}
