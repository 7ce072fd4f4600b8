//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] borrows a [`ParamStore`] immutably, records every operation of a
//! forward pass and can then run the backward pass into a [`Gradients`]
//! table. Stop-gradient is the [`Tape::detach`] operation. A tape created with
//! [`Tape::replay`] substitutes previously recorded detached values, which
//! lets a finite-difference check evaluate the exact surrogate function whose
//! gradient the backward pass computes.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tensor::{dot, log_sum_exp, matmul, matmul_at, matmul_bt, sigmoid, softplus, Matrix};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Hex SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, value) in self.names.iter().zip(&self.values) {
            hasher.update(name.as_bytes());
            hasher.update((value.rows() as u64).to_le_bytes());
            hasher.update((value.cols() as u64).to_le_bytes());
            for v in value.data() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Detach,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Log(Var),
    ClampMin(Var, f64),
    RowNormalize(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        rstd: Vec<f64>,
    },
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SqDist(Var, Var),
    MeanRows(Var),
    SumRows(Var),
    SumAll(Var),
    LogSigmoid(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
    },
}

#[derive(Debug)]
enum Value {
    Owned(Matrix),
    Param(crate::autograd::ParamId),
}

#[derive(Debug)]
struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    detached: Vec<Matrix>,
    replay: Option<Vec<Matrix>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            detached: Vec::new(),
            replay: None,
        }
    }

    /// A tape whose `detach` calls return `frozen[i]` for the i-th call.
    pub fn replay(params: &'p ParamStore, frozen: Vec<Matrix>) -> Self {
        let mut tape = Tape::new(params);
        tape.replay = Some(frozen);
        tape
    }

    /// Values produced by `detach`, in call order.
    pub fn detached_values(&self) -> &[Matrix] {
        &self.detached
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(id) => self.params.get(*id),
        }
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.len(), 1);
        m.data()[0]
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input that receives a gradient (retrievable with [`Gradients::wrt`]).
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// A parameter inserted as a constant: same value, no gradient.
    pub fn frozen_param(&mut self, id: ParamId) -> Var {
        let value = self.params.get(id).clone();
        self.constant(value)
    }

    pub fn detach(&mut self, x: Var) -> Var {
        let value = match &self.replay {
            Some(frozen) => frozen[self.detached.len()].clone(),
            None => self.value(x).clone(),
        };
        self.detached.push(value.clone());
        self.push(value, Op::Detach, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = matmul(self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = matmul_bt(self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulBt(a, b), rg)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        Matrix::from_vec(
            x.rows(),
            x.cols(),
            x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |p, q| p + q);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |p, q| p - q);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |p, q| p * q);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// Adds a 1×n row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!(r.rows(), 1, "add_row expects a row vector");
        assert_eq!(x.cols(), r.cols(), "add_row width mismatch");
        let mut value = x.clone();
        for i in 0..value.rows() {
            for (o, b) in value.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scaled(s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push(value, Op::Log(a), rg)
    }

    /// `max(x, floor)`; the gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).map(|x| x.max(floor));
        let rg = self.rg(a);
        self.push(value, Op::ClampMin(a, floor), rg)
    }

    /// Divides each row by its sum.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= total);
        }
        let rg = self.rg(a);
        self.push(value, Op::RowNormalize(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.softmax_impl(a, false)
    }

    /// Row softmax where row `i` only attends to columns `j <= i`.
    pub fn causal_softmax_rows(&mut self, a: Var) -> Var {
        self.softmax_impl(a, true)
    }

    fn softmax_impl(&mut self, a: Var, causal: bool) -> Var {
        let x = self.value(a);
        let mut value = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            let width = if causal { (i + 1).min(x.cols()) } else { x.cols() };
            let src = &x.row(i)[..width];
            let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut value.row_mut(i)[..width];
            let mut total = 0.0;
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - max).exp();
                total += *d;
            }
            dst.iter_mut().for_each(|d| *d /= total);
        }
        let rg = self.rg(a);
        self.push(value, Op::Softmax(a), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let input = self.value(x);
        let (rows, cols) = input.shape();
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = Matrix::zeros(rows, cols);
        let mut value = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = input.row(i);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(r);
            for j in 0..cols {
                let h = (row[j] - mean) * r;
                xhat.set(i, j, h);
                value.set(i, j, h * g.data()[j] + b.data()[j]);
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let t = self.value(table);
        let cols = t.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let value = Matrix::from_vec(idx.len(), cols, data);
        let rg = self.rg(table);
        self.push(
            value,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let m = self.value(x);
        let mut data = Vec::with_capacity(m.rows() * len);
        for i in 0..m.rows() {
            data.extend_from_slice(&m.row(i)[start..start + len]);
        }
        let value = Matrix::from_vec(m.rows(), len, data);
        let rg = self.rg(x);
        self.push(value, Op::SliceCols { x, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let src = self.value(p).row(i);
                value.row_mut(i)[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Pairwise squared Euclidean distances: `out[b][k] = ‖a_b − c_k‖²`.
    pub fn sq_dist(&mut self, a: Var, c: Var) -> Var {
        let (x, y) = (self.value(a), self.value(c));
        assert_eq!(x.cols(), y.cols(), "sq_dist width mismatch");
        let mut value = Matrix::zeros(x.rows(), y.rows());
        for i in 0..x.rows() {
            for k in 0..y.rows() {
                value.set(i, k, crate::tensor::squared_distance(x.row(i), y.row(k)));
            }
        }
        let rg = self.rg(a) || self.rg(c);
        self.push(value, Op::SqDist(a, c), rg)
    }

    /// Column means, producing a 1×n row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = Matrix::zeros(1, x.cols());
        for i in 0..x.rows() {
            for (o, v) in value.data_mut().iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        let n = x.rows() as f64;
        value.data_mut().iter_mut().for_each(|v| *v /= n);
        let rg = self.rg(a);
        self.push(value, Op::MeanRows(a), rg)
    }

    /// Row sums, producing an m×1 column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Matrix::from_vec(
            x.rows(),
            1,
            (0..x.rows()).map(|i| x.row(i).iter().sum()).collect(),
        );
        let rg = self.rg(a);
        self.push(value, Op::SumRows(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Matrix::from_vec(1, 1, vec![self.value(a).sum()]);
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg)
    }

    /// `ln σ(x)`, elementwise.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| -softplus(-x));
        let rg = self.rg(a);
        self.push(value, Op::LogSigmoid(a), rg)
    }

    /// Sum over rows of `logsumexp(row) − row[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let z = self.value(logits);
        assert_eq!(z.rows(), targets.len(), "one target per logits row");
        let total: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| log_sum_exp(z.row(i)) - z.get(i, t))
            .sum();
        let rg = self.rg(logits);
        self.push(
            Matrix::from_vec(1, 1, vec![total]),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        )
    }

    /// Backward pass seeded with ones at `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let (r, c) = self.value(root).shape();
        self.backward_from(&[(root, Matrix::filled(r, c, 1.0))])
    }

    /// Backward pass with explicit upstream gradients for one or more nodes.
    pub fn backward_from(&self, seeds: &[(Var, Matrix)]) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            assert_eq!(self.value(*v).shape(), g.shape(), "seed shape mismatch");
            accumulate(&mut grads, &self.nodes, *v, g.clone());
            last = last.max(v.0);
        }
        for i in (0..=last).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .param_vars
            .iter()
            .map(|v| v.and_then(|v| grads[v.0].clone()))
            .collect();
        Gradients {
            nodes: grads,
            params,
        }
    }

    fn backprop_node(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let nodes = &self.nodes;
        let out = self.value(Var(i));
        match &nodes[i].op {
            Op::Leaf | Op::Param | Op::Detach => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, nodes, *a, matmul_bt(g, self.value(*b)));
                }
                if self.rg(*b) {
                    accumulate(grads, nodes, *b, matmul_at(self.value(*a), g));
                }
            }
            Op::MatMulBt(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, nodes, *a, matmul(g, self.value(*b)));
                }
                if self.rg(*b) {
                    accumulate(grads, nodes, *b, matmul_at(g, self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                accumulate(grads, nodes, *a, g.clone());
                accumulate(grads, nodes, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, nodes, *a, g.clone());
                accumulate(grads, nodes, *b, g.scaled(-1.0));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, nodes, *a, hadamard(g, self.value(*b)));
                }
                if self.rg(*b) {
                    accumulate(grads, nodes, *b, hadamard(g, self.value(*a)));
                }
            }
            Op::AddRow(a, row) => {
                accumulate(grads, nodes, *a, g.clone());
                if self.rg(*row) {
                    let mut gr = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(grads, nodes, *row, gr);
                }
            }
            Op::Scale(a, s) => accumulate(grads, nodes, *a, g.scaled(*s)),
            Op::Gelu(a) => {
                let x = self.value(*a);
                let dx = Matrix::from_vec(
                    x.rows(),
                    x.cols(),
                    x.data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &gv)| {
                            let inner = GELU_C * (x + 0.044715 * x * x * x);
                            let t = inner.tanh();
                            let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                            gv * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)
                        })
                        .collect(),
                );
                accumulate(grads, nodes, *a, dx);
            }
            Op::Log(a) => {
                let x = self.value(*a);
                let dx = Matrix::from_vec(
                    x.rows(),
                    x.cols(),
                    x.data().iter().zip(g.data()).map(|(x, gv)| gv / x).collect(),
                );
                accumulate(grads, nodes, *a, dx);
            }
            Op::ClampMin(a, floor) => {
                let x = self.value(*a);
                let dx = Matrix::from_vec(
                    x.rows(),
                    x.cols(),
                    x.data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &gv)| if x > *floor { gv } else { 0.0 })
                        .collect(),
                );
                accumulate(grads, nodes, *a, dx);
            }
            Op::RowNormalize(a) => {
                let x = self.value(*a);
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let total: f64 = x.row(r).iter().sum();
                    let gy = dot(g.row(r), out.row(r));
                    for (d, gv) in dx.row_mut(r).iter_mut().zip(g.row(r)) {
                        *d = (gv - gy) / total;
                    }
                }
                accumulate(grads, nodes, *a, dx);
            }
            Op::Softmax(a) => {
                let mut dx = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let gy = dot(g.row(r), out.row(r));
                    for ((d, gv), y) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(out.row(r)) {
                        *d = y * (gv - gy);
                    }
                }
                accumulate(grads, nodes, *a, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (rows, cols) = xhat.shape();
                let gam = self.value(*gamma);
                if self.rg(*x) {
                    let mut dx = Matrix::zeros(rows, cols);
                    let n = cols as f64;
                    for r in 0..rows {
                        let dxhat: Vec<f64> =
                            g.row(r).iter().zip(gam.data()).map(|(a, b)| a * b).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dot(&dxhat, xhat.row(r));
                        for j in 0..cols {
                            let v = rstd[r] / n * (n * dxhat[j] - sum_d - xhat.get(r, j) * sum_dx);
                            dx.set(r, j, v);
                        }
                    }
                    accumulate(grads, nodes, *x, dx);
                }
                if self.rg(*gamma) {
                    let mut dg = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        for j in 0..cols {
                            dg.data_mut()[j] += g.get(r, j) * xhat.get(r, j);
                        }
                    }
                    accumulate(grads, nodes, *gamma, dg);
                }
                if self.rg(*beta) {
                    let mut db = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        for (o, v) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(grads, nodes, *beta, db);
                }
            }
            Op::GatherRows { table, idx } => {
                let t = self.value(*table);
                let mut dt = Matrix::zeros(t.rows(), t.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, v) in dt.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                accumulate(grads, nodes, *table, dt);
            }
            Op::SliceCols { x, start } => {
                let src = self.value(*x);
                let mut dx = Matrix::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                accumulate(grads, nodes, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let mut dp = Matrix::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        accumulate(grads, nodes, p, dp);
                    }
                    offset += w;
                }
            }
            Op::SqDist(a, c) => {
                let (x, y) = (self.value(*a), self.value(*c));
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                let mut dy = Matrix::zeros(y.rows(), y.cols());
                for i in 0..x.rows() {
                    for k in 0..y.rows() {
                        let gv = g.get(i, k);
                        if gv == 0.0 {
                            continue;
                        }
                        for j in 0..x.cols() {
                            let d = 2.0 * gv * (x.get(i, j) - y.get(k, j));
                            dx.data_mut()[i * x.cols() + j] += d;
                            dy.data_mut()[k * y.cols() + j] -= d;
                        }
                    }
                }
                if self.rg(*a) {
                    accumulate(grads, nodes, *a, dx);
                }
                if self.rg(*c) {
                    accumulate(grads, nodes, *c, dy);
                }
            }
            Op::MeanRows(a) => {
                let x = self.value(*a);
                let n = x.rows() as f64;
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    for (d, gv) in dx.row_mut(r).iter_mut().zip(g.data()) {
                        *d = gv / n;
                    }
                }
                accumulate(grads, nodes, *a, dx);
            }
            Op::SumRows(a) => {
                let x = self.value(*a);
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let gv = g.data()[r];
                    dx.row_mut(r).iter_mut().for_each(|d| *d = gv);
                }
                accumulate(grads, nodes, *a, dx);
            }
            Op::SumAll(a) => {
                let x = self.value(*a);
                accumulate(grads, nodes, *a, Matrix::filled(x.rows(), x.cols(), g.data()[0]));
            }
            Op::LogSigmoid(a) => {
                let x = self.value(*a);
                let dx = Matrix::from_vec(
                    x.rows(),
                    x.cols(),
                    x.data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, gv)| gv * sigmoid(-x))
                        .collect(),
                );
                accumulate(grads, nodes, *a, dx);
            }
            Op::CrossEntropy { logits, targets } => {
                let z = self.value(*logits);
                let gv = g.data()[0];
                let mut dz = Matrix::zeros(z.rows(), z.cols());
                for (r, &t) in targets.iter().enumerate() {
                    let lse = log_sum_exp(z.row(r));
                    for (d, &zv) in dz.row_mut(r).iter_mut().zip(z.row(r)) {
                        *d = gv * (zv - lse).exp();
                    }
                    dz.data_mut()[r * z.cols() + t] -= gv;
                }
                accumulate(grads, nodes, *logits, dz);
            }
        }
    }
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_vec(
        a.rows(),
        a.cols(),
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect(),
    )
}

fn accumulate(grads: &mut [Option<Matrix>], nodes: &[Node], v: Var, g: Matrix) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Matrix>>,
    params: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params[id.0].as_ref()
    }

    pub fn into_params(self) -> Vec<Option<Matrix>> {
        self.params
    }
}

/// Accumulates parameter gradients across independent backward passes.
#[derive(Debug, Clone)]
pub struct GradAccumulator {
    grads: Vec<Option<Matrix>>,
}

impl GradAccumulator {
    pub fn new(num_params: usize) -> Self {
        GradAccumulator {
            grads: vec![None; num_params],
        }
    }

    pub fn add(&mut self, grads: Gradients) {
        for (slot, g) in self.grads.iter_mut().zip(grads.into_params()) {
            if let Some(g) = g {
                match slot {
                    Some(existing) => existing.add_assign(&g),
                    None => *slot = Some(g),
                }
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads[id.0].as_ref()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Matrix::is_finite)
    }

    pub fn into_vec(self) -> Vec<Option<Matrix>> {
        self.grads
    }
}
