use std::borrow::Cow;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `x + 1ᵀb` where `b` is a single row.
    AddRow(Var, Var),
    Relu(Var),
    LogSoftmax(Var),
    Exp(Var),
    ConcatCols(Var, Var),
    SliceRows(Var, usize),
    Frobenius(Var),
    /// Mean negative log-likelihood of the selected entries.
    Nll(Var, Vec<usize>),
    Scale(Var, f64),
    Add(Var, Var),
    Sub(Var, Var),
    Sum(Var),
    MulConst(Var, Tensor),
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Record of primitive operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every operand precedes its
/// result and reverse index order is a reverse topological order. A tape
/// and the tensors it borrows stay on one thread.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the variable does not require a gradient or the root does
    /// not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an owned leaf.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records a borrowed leaf; the tensor is not copied.
    pub fn borrowed(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a `1 × 1` variable.
    pub fn item(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.record(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Adds the `1 × n` row `bias` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::Shape {
                op: "add_row",
                lhs: xv.shape(),
                rhs: bv.shape(),
            });
        }
        let mut out = xv.clone();
        let cols = out.cols();
        for row in out.data_mut().chunks_mut(cols) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.record(out, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.record(out, Op::Relu(x), &[x])
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let cols = out.cols();
        if cols > 0 {
            for row in out.data_mut().chunks_mut(cols) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                let log_z = max + sum.ln();
                for v in row.iter_mut() {
                    *v -= log_z;
                }
            }
        }
        self.record(out, Op::LogSoftmax(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        self.record(out, Op::Exp(x), &[x])
    }

    /// Columns of `a` followed by columns of `b`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(Error::Shape {
                op: "concat_cols",
                lhs: av.shape(),
                rhs: bv.shape(),
            });
        }
        let (rows, p, q) = (av.rows(), av.cols(), bv.cols());
        let mut data = Vec::with_capacity(rows * (p + q));
        for r in 0..rows {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let out = Tensor::new(rows, p + q, data)?;
        Ok(self.record(out, Op::ConcatCols(a, b), &[a, b]))
    }

    /// Rows `start..start + count` of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + count > xv.rows() {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: xv.shape(),
                rhs: (start + count, xv.cols()),
            });
        }
        let cols = xv.cols();
        let data = xv.data()[start * cols..(start + count) * cols].to_vec();
        let out = Tensor::new(count, cols, data)?;
        Ok(self.record(out, Op::SliceRows(x, start), &[x]))
    }

    /// `‖x‖_F` as a `1 × 1` value.
    pub fn frobenius_norm(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).frobenius_norm());
        self.record(out, Op::Frobenius(x), &[x])
    }

    /// `-(1/B) Σᵢ x[i, targets[i]]` for a `B × K` matrix of log-probabilities.
    pub fn nll(&mut self, log_probs: Var, targets: &[usize]) -> Result<Var> {
        let xv = self.value(log_probs);
        if targets.len() != xv.rows() || xv.rows() == 0 {
            return Err(Error::Shape {
                op: "nll",
                lhs: xv.shape(),
                rhs: (targets.len(), 1),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= xv.cols()) {
            return Err(Error::Index {
                what: "nll target",
                index: bad,
                limit: xv.cols(),
            });
        }
        let total: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| xv.get(i, t))
            .sum();
        let out = Tensor::scalar(-total / targets.len() as f64);
        Ok(self.record(out, Op::Nll(log_probs, targets.to_vec()), &[log_probs]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.record(out, Op::Scale(x, factor), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.record(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "sub", |x, y| x - y)?;
        Ok(self.record(out, Op::Sub(a, b), &[a, b]))
    }

    /// Sum of all entries as a `1 × 1` value.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.record(out, Op::Sum(x), &[x])
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, x: Var, factor: Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != factor.shape() {
            return Err(Error::Shape {
                op: "mul_const",
                lhs: xv.shape(),
                rhs: factor.shape(),
            });
        }
        let data = xv.data().iter().zip(factor.data()).map(|(a, b)| a * b).collect();
        let out = Tensor::new(xv.rows(), xv.cols(), data)?;
        Ok(self.record(out, Op::MulConst(x, factor), &[x]))
    }

    fn zip(&self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape {
                op,
                lhs: av.shape(),
                rhs: bv.shape(),
            });
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.rows(), av.cols(), data)
    }

    /// Reverse pass from a `1 × 1` root.
    ///
    /// Each recorded operation is visited once, newest first. A variable
    /// consumed by several operations receives the sum of their
    /// contributions.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.shape() != (1, 1) {
            return Err(Error::Shape {
                op: "backward root",
                lhs: root_value.shape(),
                rhs: (1, 1),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.requires_grad(*a) {
                        let da = g.matmul_nt(self.value(*b))?;
                        accumulate(&mut grads, *a, da);
                    }
                    if self.requires_grad(*b) {
                        let db = self.value(*a).matmul_tn(&g)?;
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::AddRow(x, bias) => {
                    if self.requires_grad(*bias) {
                        let mut db = Tensor::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (d, v) in db.data_mut().iter_mut().zip(g.row(r)) {
                                *d += v;
                            }
                        }
                        accumulate(&mut grads, *bias, db);
                    }
                    if self.requires_grad(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let data = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&d, &v)| if v > 0.0 { d } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(g.rows(), g.cols(), data)?);
                }
                Op::LogSoftmax(x) => {
                    let y = &node.value;
                    let mut dx = g.clone();
                    let cols = dx.cols();
                    for r in 0..dx.rows() {
                        let row_sum: f64 = g.row(r).iter().sum();
                        let out_row = &mut dx.data_mut()[r * cols..(r + 1) * cols];
                        for (o, &yv) in out_row.iter_mut().zip(y.row(r)) {
                            *o -= yv.exp() * row_sum;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Exp(x) => {
                    let data = g
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(d, y)| d * y)
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(g.rows(), g.cols(), data)?);
                }
                Op::ConcatCols(a, b) => {
                    let p = self.value(*a).cols();
                    let q = self.value(*b).cols();
                    if self.requires_grad(*a) {
                        let rows: Vec<&[f64]> = (0..g.rows()).map(|r| &g.row(r)[..p]).collect();
                        accumulate(&mut grads, *a, Tensor::from_rows(&rows)?);
                    }
                    if self.requires_grad(*b) {
                        let rows: Vec<&[f64]> = (0..g.rows()).map(|r| &g.row(r)[p..p + q]).collect();
                        accumulate(&mut grads, *b, Tensor::from_rows(&rows)?);
                    }
                }
                Op::SliceRows(x, start) => {
                    let xv = self.value(*x);
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    let cols = xv.cols();
                    dx.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                    accumulate(&mut grads, *x, dx);
                }
                Op::Frobenius(x) => {
                    let norm = node.value.data()[0];
                    if norm == 0.0 {
                        return Err(Error::SingularGradient(
                            "Frobenius norm is not differentiable at the zero matrix".into(),
                        ));
                    }
                    let scale = g.data()[0] / norm;
                    accumulate(&mut grads, *x, self.value(*x).map(|v| v * scale));
                }
                Op::Nll(x, targets) => {
                    let xv = self.value(*x);
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    let coeff = -g.data()[0] / targets.len() as f64;
                    for (i, &t) in targets.iter().enumerate() {
                        dx.set(i, t, coeff);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Scale(x, factor) => {
                    accumulate(&mut grads, *x, g.map(|v| v * factor));
                }
                Op::Add(a, b) => {
                    if self.requires_grad(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.requires_grad(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.requires_grad(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.requires_grad(*b) {
                        accumulate(&mut grads, *b, g.map(|v| -v));
                    }
                }
                Op::Sum(x) => {
                    let xv = self.value(*x);
                    accumulate(&mut grads, *x, Tensor::filled(xv.rows(), xv.cols(), g.data()[0]));
                }
                Op::MulConst(x, factor) => {
                    let data = g.data().iter().zip(factor.data()).map(|(d, f)| d * f).collect();
                    accumulate(&mut grads, *x, Tensor::new(g.rows(), g.cols(), data)?);
                }
            }
        }

        // Only leaves keep their gradients.
        for (node, grad) in self.nodes.iter().zip(grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                *grad = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, contribution: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&contribution),
        slot @ None => *slot = Some(contribution),
    }
}
