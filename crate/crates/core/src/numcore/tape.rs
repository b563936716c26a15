//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Values live on
//! the tape and are addressed by [`Var`] handles; [`Tape::backward`] walks the
//! record in reverse and returns the gradient of a scalar with respect to
//! every node that requires one. Nodes built only from constants never
//! require a gradient and are skipped during the backward sweep.

use super::params::{ParamGrads, ParamId, Parameters};
use super::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    MeanRows(Var),
    RepeatRows(Var),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    WeightedCe { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Variables bound to a [`Parameters`] store on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    poisoned: Option<String>,
}

/// Result of a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads[var.0].as_deref()
    }

    /// Gradient for every parameter of `bound`; untouched parameters get zeros.
    pub fn for_params(&self, bound: &Bound) -> ParamGrads {
        ParamGrads::from_vec(
            bound
                .vars
                .iter()
                .map(|v| {
                    let shape = self.shapes[v.0].clone();
                    match &self.grads[v.0] {
                        Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
                        None => Tensor::zeros(&shape),
                    }
                })
                .collect(),
        )
    }
}

fn as_matrix(shape: &[usize]) -> (usize, usize) {
    match shape {
        [c] => (1, *c),
        [r, c] => (*r, *c),
        _ => panic!("tape ops are 2-D, got shape {shape:?}"),
    }
}

fn acc(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
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
        if self.poisoned.is_none() && !value.is_finite() {
            self.poisoned = Some(format!("non-finite value produced by {}", op_name(&op)));
        }
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        as_matrix(self.nodes[v.0].value.shape())
    }

    /// Error if any recorded op produced a NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match &self.poisoned {
            Some(msg) => Err(Error::Numeric(msg.clone())),
            None => Ok(()),
        }
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value.with_grad(false), Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        let rg = value.requires_grad();
        self.push(value, Op::Leaf, rg)
    }

    /// Record every parameter as a leaf. Frozen stores are bound as constants.
    pub fn bind(&mut self, params: &Parameters, trainable: bool) -> Bound {
        let vars = params
            .iter()
            .map(|(_, _, t)| {
                if trainable {
                    self.leaf(t.clone().with_grad(true))
                } else {
                    self.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dims");
        let mut out = vec![0.0; n * m];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::matrix(n, m, out).unwrap(), Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (n, m) = self.shape(a);
        let (k, m2) = self.shape(b);
        assert_eq!(m, m2, "matmul_bt inner dims");
        let mut out = vec![0.0; n * k];
        matmul_bt_acc(self.value(a).data(), self.value(b).data(), &mut out, n, m, k);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::matrix(n, k, out).unwrap(), Op::MatMulBt(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (n, m) = self.shape(a);
        let src = self.value(a).data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = src[i * m + j];
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::matrix(m, n, out).unwrap(), Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (n, m) = self.shape(a);
        assert_eq!((n, m), self.shape(b), "add shapes");
        let out: Vec<f64> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::matrix(n, m, out).unwrap(), Op::Add(a, b), rg)
    }

    /// Broadcast-add a single row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (n, m) = self.shape(a);
        assert_eq!(self.value(b).len(), m, "add_row width");
        let row = self.value(b).data();
        let out: Vec<f64> =
            self.value(a).data().iter().enumerate().map(|(i, x)| x + row[i % m]).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::matrix(n, m, out).unwrap(), Op::AddRow(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (n, m) = self.shape(a);
        assert_eq!((n, m), self.shape(b), "mul shapes");
        let out: Vec<f64> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::matrix(n, m, out).unwrap(), Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let (n, m) = self.shape(a);
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x * c).collect();
        let rg = self.rg(a);
        self.push(Tensor::matrix(n, m, out).unwrap(), Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (n, m) = self.shape(a);
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x.max(0.0)).collect();
        let rg = self.rg(a);
        self.push(Tensor::matrix(n, m, out).unwrap(), Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let (n, m) = self.shape(a);
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x.tanh()).collect();
        let rg = self.rg(a);
        self.push(Tensor::matrix(n, m, out).unwrap(), Op::Tanh(a), rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (n, m) = self.shape(a);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(n * m);
        for r in 0..n {
            out.extend(super::tensor::softmax(&src[r * m..(r + 1) * m]));
        }
        let rg = self.rg(a);
        self.push(Tensor::matrix(n, m, out).unwrap(), Op::SoftmaxRows(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let n = self.shape(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = self.shape(p);
                assert_eq!(r, n, "concat_cols row mismatch");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::matrix(n, total, out).unwrap(), Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (n, m) = self.shape(a);
        assert!(start + len <= m, "slice_cols out of range");
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&src[r * m + start..r * m + start + len]);
        }
        let rg = self.rg(a);
        self.push(Tensor::matrix(n, len, out).unwrap(), Op::SliceCols(a, start), rg)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (n, m) = self.shape(a);
        let src = self.value(a).data();
        let mut out = vec![0.0; m];
        for r in 0..n {
            for (o, v) in out.iter_mut().zip(&src[r * m..(r + 1) * m]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let rg = self.rg(a);
        self.push(Tensor::matrix(1, m, out).unwrap(), Op::MeanRows(a), rg)
    }

    /// Tile a single row `n` times.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Var {
        let (r, m) = self.shape(a);
        assert_eq!(r, 1, "repeat_rows expects a single row");
        let row = self.value(a).data().to_vec();
        let out: Vec<f64> = (0..n).flat_map(|_| row.iter().copied()).collect();
        let rg = self.rg(a);
        self.push(Tensor::matrix(n, m, out).unwrap(), Op::RepeatRows(a), rg)
    }

    /// Embedding lookup: rows of `table` selected by `indices`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (rows, m) = self.shape(table);
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * m);
        for &i in indices {
            if i >= rows {
                return Err(Error::Index { index: i, len: rows });
            }
            out.extend_from_slice(&src[i * m..(i + 1) * m]);
        }
        let rg = self.rg(table);
        let value = Tensor::matrix(indices.len(), m, out)?;
        Ok(self.push(value, Op::GatherRows(table, indices.to_vec()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(total), Op::Sum(a), rg)
    }

    /// `Σ_i weights[i] · CE(logits[i], targets[i])`, log-sum-exp stabilized.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let (n, c) = self.shape(logits);
        if targets.len() != n || weights.len() != n {
            return Err(Error::Structural(format!(
                "cross-entropy over {n} rows got {} targets and {} weights",
                targets.len(),
                weights.len()
            )));
        }
        if c < 2 {
            return Err(Error::Structural("cross-entropy needs at least 2 classes".into()));
        }
        let src = self.value(logits).data();
        let mut probs = Vec::with_capacity(n * c);
        let mut total = 0.0;
        for r in 0..n {
            let row = &src[r * c..(r + 1) * c];
            let t = targets[r];
            if t >= c {
                return Err(Error::Index { index: t, len: c });
            }
            if weights[r] != 0.0 {
                total += weights[r] * (super::tensor::log_sum_exp(row) - row[t]);
            }
            probs.extend(super::tensor::softmax(row));
        }
        let rg = self.rg(logits);
        let op = Op::WeightedCe {
            logits,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(total), op, rg))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check_finite()?;
        if self.value(loss).len() != 1 {
            return Err(Error::Structural("backward needs a scalar output".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (n, m) = as_matrix(node.value.shape());
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (_, k) = self.shape(*a);
                if self.rg(*a) {
                    let ga = acc(&mut grads[a.0], n * k);
                    // dA = G · Bᵀ
                    matmul_bt_acc(g, self.value(*b).data(), ga, n, m, k);
                }
                if self.rg(*b) {
                    let gb = acc(&mut grads[b.0], k * m);
                    // dB = Aᵀ · G
                    matmul_at_acc(self.value(*a).data(), g, gb, n, k, m);
                }
            }
            Op::MatMulBt(a, b) => {
                // C[n×k] = A[n×d] · B[k×d]ᵀ
                let (_, d) = self.shape(*a);
                let k = m;
                if self.rg(*a) {
                    let ga = acc(&mut grads[a.0], n * d);
                    matmul_acc(g, self.value(*b).data(), ga, n, k, d);
                }
                if self.rg(*b) {
                    let gb = acc(&mut grads[b.0], k * d);
                    matmul_at_acc(g, self.value(*a).data(), gb, n, k, d);
                }
            }
            Op::Transpose(a) => {
                if self.rg(*a) {
                    let ga = acc(&mut grads[a.0], n * m);
                    // node is n×m, source is m×n
                    for i in 0..n {
                        for j in 0..m {
                            ga[j * n + i] += g[i * m + j];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.rg(*v) {
                        let gv = acc(&mut grads[v.0], n * m);
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::AddRow(a, b) => {
                if self.rg(*a) {
                    let ga = acc(&mut grads[a.0], n * m);
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if self.rg(*b) {
                    let gb = acc(&mut grads[b.0], m);
                    for (i, y) in g.iter().enumerate() {
                        gb[i % m] += y;
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(a, b), (b, a)] {
                    if self.rg(*v) {
                        let od = self.value(*other).data();
                        let gv = acc(&mut grads[v.0], n * m);
                        for ((x, y), o) in gv.iter_mut().zip(g).zip(od) {
                            *x += y * o;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.rg(*a) {
                    let ga = acc(&mut grads[a.0], n * m);
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * c);
                }
            }
            Op::Relu(a) => {
                if self.rg(*a) {
                    let src = self.value(*a).data();
                    let ga = acc(&mut grads[a.0], n * m);
                    for ((x, y), s) in ga.iter_mut().zip(g).zip(src) {
                        if *s > 0.0 {
                            *x += y;
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                if self.rg(*a) {
                    let out = node.value.data();
                    let ga = acc(&mut grads[a.0], n * m);
                    for ((x, y), o) in ga.iter_mut().zip(g).zip(out) {
                        *x += y * (1.0 - o * o);
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if self.rg(*a) {
                    let out = node.value.data();
                    let ga = acc(&mut grads[a.0], n * m);
                    for r in 0..n {
                        let p = &out[r * m..(r + 1) * m];
                        let gr = &g[r * m..(r + 1) * m];
                        let dot: f64 = p.iter().zip(gr).map(|(x, y)| x * y).sum();
                        for j in 0..m {
                            ga[r * m + j] += p[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (_, w) = self.shape(*p);
                    if self.rg(*p) {
                        let gp = acc(&mut grads[p.0], n * w);
                        for r in 0..n {
                            for j in 0..w {
                                gp[r * w + j] += g[r * m + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                if self.rg(*a) {
                    let (_, full) = self.shape(*a);
                    let ga = acc(&mut grads[a.0], n * full);
                    for r in 0..n {
                        for j in 0..m {
                            ga[r * full + start + j] += g[r * m + j];
                        }
                    }
                }
            }
            Op::MeanRows(a) => {
                if self.rg(*a) {
                    let (rows, _) = self.shape(*a);
                    let ga = acc(&mut grads[a.0], rows * m);
                    let inv = 1.0 / rows as f64;
                    for r in 0..rows {
                        for j in 0..m {
                            ga[r * m + j] += g[j] * inv;
                        }
                    }
                }
            }
            Op::RepeatRows(a) => {
                if self.rg(*a) {
                    let ga = acc(&mut grads[a.0], m);
                    for r in 0..n {
                        for j in 0..m {
                            ga[j] += g[r * m + j];
                        }
                    }
                }
            }
            Op::GatherRows(table, indices) => {
                if self.rg(*table) {
                    let (rows, _) = self.shape(*table);
                    let gt = acc(&mut grads[table.0], rows * m);
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..m {
                            gt[i * m + j] += g[r * m + j];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if self.rg(*a) {
                    let len = self.value(*a).len();
                    let ga = acc(&mut grads[a.0], len);
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::WeightedCe { logits, targets, weights, probs } => {
                if self.rg(*logits) {
                    let (rows, c) = self.shape(*logits);
                    let gl = acc(&mut grads[logits.0], rows * c);
                    for r in 0..rows {
                        let w = weights[r] * g[0];
                        if w == 0.0 {
                            continue;
                        }
                        for j in 0..c {
                            let indicator = if j == targets[r] { 1.0 } else { 0.0 };
                            gl[r * c + j] += w * (probs[r * c + j] - indicator);
                        }
                    }
                }
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::MatMulBt(..) => "matmul_bt",
        Op::Transpose(..) => "transpose",
        Op::Add(..) => "add",
        Op::AddRow(..) => "add_row",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Relu(..) => "relu",
        Op::Tanh(..) => "tanh",
        Op::SoftmaxRows(..) => "softmax_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::SliceCols(..) => "slice_cols",
        Op::MeanRows(..) => "mean_rows",
        Op::RepeatRows(..) => "repeat_rows",
        Op::GatherRows(..) => "gather_rows",
        Op::Sum(..) => "sum",
        Op::WeightedCe { .. } => "weighted_cross_entropy",
    }
}
