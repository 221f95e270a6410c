//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass (define-by-run);
//! [`Tape::backward`] replays it in reverse and accumulates gradients into
//! every node with `requires_grad`. Tapes are rebuilt per forward pass, which
//! keeps data-dependent control flow (the hop loop) trivially correct. A tape
//! is confined to one thread; independent tapes may run in parallel.

mod matrix;

pub mod adam;
pub mod checkpoint;

use std::rc::Rc;

pub use adam::{Adam, AdamState, Param, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("target index {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("empty axis: {0}")]
    EmptyAxis(String),
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
const NLL_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    /// [m,n] + row vector [n], broadcast over rows.
    AddRow(TensorId, TensorId),
    Matmul(TensorId, TensorId),
    Transpose(TensorId),
    Relu(TensorId),
    Sigmoid(TensorId),
    /// ln(x + eps)
    Ln(TensorId, f64),
    /// Row-wise softmax. Masked-out entries are exactly 0 in the output, so
    /// the backward pass needs no mask: zero outputs already zero their grads.
    Softmax(TensorId),
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
    },
    GatherRows(TensorId, Rc<Vec<usize>>),
    /// View as a single row; gradient passes through unchanged.
    Flatten(TensorId),
    SliceCols(TensorId, usize, usize),
    ConcatCols(Vec<TensorId>),
    Sum(TensorId),
    /// Scalar dot product of the flattened input with a constant vector.
    DotConst(TensorId, Rc<Vec<f64>>),
    CrossEntropyLogits(TensorId, usize),
    /// -ln(p[target] + eps) on an already-normalized likelihood vector.
    NllProb(TensorId, usize),
    /// Mean absolute difference.
    L1Loss(TensorId, TensorId),
    /// Elementwise multiply by a sampled keep mask (already scaled by 1/keep).
    Dropout(TensorId, Rc<Vec<f64>>),
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [m, n] => (*m, *n),
        other => panic!("tensors are at most 2-D, got {other:?}"),
    }
}

/// Operation record of one forward pass, in topological order.
#[derive(Default)]
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

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires: bool, op: Op) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            requires_grad: requires,
            grad: None,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(&mut self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> TensorId {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "leaf data length must equal the product of shape extents"
        );
        self.push(shape.to_vec(), data, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> TensorId {
        self.leaf(shape, data, false)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.leaf(&[], vec![v], false)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    /// Gradient of the last backward pass, if this node required one.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn same_shape(&self, a: TensorId, b: TensorId, what: &str) -> Result<(), TensorError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.same_shape(a, b, "add")?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, req, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.same_shape(a, b, "sub")?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, req, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.same_shape(a, b, "mul")?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, req, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let data = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        let req = self.requires(a);
        self.push(self.nodes[a.0].shape.clone(), data, req, Op::Scale(a, c))
    }

    /// Broadcast-add a row vector to every row of a matrix.
    pub fn add_row(&mut self, a: TensorId, row: TensorId) -> Result<TensorId, TensorError> {
        let (m, n) = dims2(&self.nodes[a.0].shape);
        let (rm, rn) = dims2(&self.nodes[row.0].shape);
        if rm != 1 || rn != n {
            return Err(TensorError::ShapeMismatch(format!(
                "add_row: matrix has {n} columns, row has shape {:?}",
                self.nodes[row.0].shape
            )));
        }
        let mut data = self.nodes[a.0].data.clone();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += self.nodes[row.0].data[j];
            }
        }
        let req = self.requires(a) || self.requires(row);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, req, Op::AddRow(a, row)))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (m, ka) = dims2(&self.nodes[a.0].shape);
        let (kb, n) = dims2(&self.nodes[b.0].shape);
        if ka != kb {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul: inner extents {ka} vs {kb}"
            )));
        }
        let mut data = vec![0.0; m * n];
        matrix::gemm_acc(&mut data, &self.nodes[a.0].data, &self.nodes[b.0].data, m, ka, n);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(vec![m, n], data, req, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let (m, n) = dims2(&self.nodes[a.0].shape);
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let req = self.requires(a);
        self.push(vec![n, m], data, req, Op::Transpose(a))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let data = self.nodes[a.0].data.iter().map(|x| x.max(0.0)).collect();
        let req = self.requires(a);
        self.push(self.nodes[a.0].shape.clone(), data, req, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let data = self.nodes[a.0]
            .data
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let req = self.requires(a);
        self.push(self.nodes[a.0].shape.clone(), data, req, Op::Sigmoid(a))
    }

    pub fn ln(&mut self, a: TensorId, eps: f64) -> TensorId {
        let data = self.nodes[a.0].data.iter().map(|x| (x + eps).ln()).collect();
        let req = self.requires(a);
        self.push(self.nodes[a.0].shape.clone(), data, req, Op::Ln(a, eps))
    }

    /// Row-wise softmax, numerically stabilized by max subtraction.
    pub fn softmax(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        self.softmax_masked(a, None)
    }

    /// Row-wise softmax restricted to `allowed` columns. Disallowed entries
    /// are exactly 0 in the output (equivalent to -inf logits) and receive no
    /// gradient. A row with no allowed entries is all zeros.
    pub fn softmax_masked(
        &mut self,
        a: TensorId,
        allowed: Option<Rc<Vec<bool>>>,
    ) -> Result<TensorId, TensorError> {
        let (m, n) = dims2(&self.nodes[a.0].shape);
        if n == 0 {
            return Err(TensorError::EmptyAxis("softmax over empty axis".into()));
        }
        if let Some(mask) = &allowed {
            if mask.len() != n {
                return Err(TensorError::ShapeMismatch(format!(
                    "softmax mask length {} vs axis {n}",
                    mask.len()
                )));
            }
        }
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let out = &mut data[i * n..(i + 1) * n];
            softmax_row(row, allowed.as_deref().map(|v| v.as_slice()), out);
        }
        let req = self.requires(a);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, req, Op::Softmax(a)))
    }

    /// LayerNorm over the last axis: zero mean, unit variance, then affine.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
    ) -> Result<TensorId, TensorError> {
        let (m, n) = dims2(&self.nodes[x.0].shape);
        if n < 2 {
            return Err(TensorError::EmptyAxis(format!(
                "layer_norm needs last axis >= 2, got {n}"
            )));
        }
        let (_, gn) = dims2(&self.nodes[gain.0].shape);
        let (_, bn) = dims2(&self.nodes[bias.0].shape);
        if gn != n || bn != n {
            return Err(TensorError::ShapeMismatch(format!(
                "layer_norm affine params must have {n} entries, got {gn} and {bn}"
            )));
        }
        let src = &self.nodes[x.0].data;
        let g = &self.nodes[gain.0].data;
        let b = &self.nodes[bias.0].data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..n {
                data[i * n + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let req = self.requires(x) || self.requires(gain) || self.requires(bias);
        Ok(self.push(
            self.nodes[x.0].shape.clone(),
            data,
            req,
            Op::LayerNorm { x, gain, bias },
        ))
    }

    /// Select rows by index; gradients scatter-add back. Also serves as the
    /// embedding lookup over a parameter table.
    pub fn gather_rows(&mut self, a: TensorId, idx: Rc<Vec<usize>>) -> Result<TensorId, TensorError> {
        let (m, n) = dims2(&self.nodes[a.0].shape);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(TensorError::TargetOutOfRange { target: bad, classes: m });
        }
        let src = &self.nodes[a.0].data;
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx.iter() {
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let req = self.requires(a);
        Ok(self.push(vec![idx.len(), n], data, req, Op::GatherRows(a, idx)))
    }

    pub fn embedding_lookup(
        &mut self,
        table: TensorId,
        ids: &[usize],
    ) -> Result<TensorId, TensorError> {
        self.gather_rows(table, Rc::new(ids.to_vec()))
    }

    pub fn slice_cols(
        &mut self,
        a: TensorId,
        start: usize,
        len: usize,
    ) -> Result<TensorId, TensorError> {
        let (m, n) = dims2(&self.nodes[a.0].shape);
        if start + len > n {
            return Err(TensorError::ShapeMismatch(format!(
                "slice_cols [{start}, {}) out of {n} columns",
                start + len
            )));
        }
        let src = &self.nodes[a.0].data;
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let req = self.requires(a);
        Ok(self.push(vec![m, len], data, req, Op::SliceCols(a, start, len)))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        assert!(!parts.is_empty());
        let (m, _) = dims2(&self.nodes[parts[0].0].shape);
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = dims2(&self.nodes[p.0].shape);
            if pm != m {
                return Err(TensorError::ShapeMismatch(
                    "concat_cols: row counts differ".into(),
                ));
            }
            total += pn;
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                let (_, pn) = dims2(&self.nodes[p.0].shape);
                let src = &self.nodes[p.0].data;
                data.extend_from_slice(&src[i * pn..(i + 1) * pn]);
            }
        }
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(vec![m, total], data, req, Op::ConcatCols(parts.to_vec())))
    }

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s = self.nodes[a.0].data.iter().sum();
        let req = self.requires(a);
        self.push(vec![], vec![s], req, Op::Sum(a))
    }

    pub fn dot_const(&mut self, a: TensorId, v: Rc<Vec<f64>>) -> Result<TensorId, TensorError> {
        if v.len() != self.nodes[a.0].data.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "dot_const: {} vs {}",
                self.nodes[a.0].data.len(),
                v.len()
            )));
        }
        let s = self.nodes[a.0]
            .data
            .iter()
            .zip(v.iter())
            .map(|(x, y)| x * y)
            .sum();
        let req = self.requires(a);
        Ok(self.push(vec![], vec![s], req, Op::DotConst(a, v)))
    }

    /// Cross-entropy of a single logit vector against a class index.
    pub fn cross_entropy(&mut self, logits: TensorId, target: usize) -> Result<TensorId, TensorError> {
        let n = self.nodes[logits.0].data.len();
        if target >= n {
            return Err(TensorError::TargetOutOfRange { target, classes: n });
        }
        let x = &self.nodes[logits.0].data;
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - x[target];
        let req = self.requires(logits);
        Ok(self.push(vec![], vec![loss], req, Op::CrossEntropyLogits(logits, target)))
    }

    /// Negative log-likelihood on an already-normalized probability vector.
    pub fn nll_prob(&mut self, probs: TensorId, target: usize) -> Result<TensorId, TensorError> {
        let n = self.nodes[probs.0].data.len();
        if target >= n {
            return Err(TensorError::TargetOutOfRange { target, classes: n });
        }
        let p = self.nodes[probs.0].data[target];
        let req = self.requires(probs);
        Ok(self.push(vec![], vec![-(p + NLL_EPS).ln()], req, Op::NllProb(probs, target)))
    }

    /// Mean absolute difference between two same-shape tensors.
    pub fn l1_loss(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.same_shape(a, b, "l1_loss")?;
        let n = self.nodes[a.0].data.len() as f64;
        let s: f64 = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| (x - y).abs())
            .sum();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(vec![], vec![s / n], req, Op::L1Loss(a, b)))
    }

    /// Inverted dropout; identity when `train` is false or rate is 0.
    pub fn dropout(&mut self, a: TensorId, rate: f64, train: bool, rng: &mut impl rand::Rng) -> TensorId {
        if !train || rate <= 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = Rc::new(mask);
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(mask.iter())
            .map(|(x, m)| x * m)
            .collect();
        let req = self.requires(a);
        self.push(self.nodes[a.0].shape.clone(), data, req, Op::Dropout(a, mask))
    }

    /// Differentiable argmax surrogate: sum_i softmax(beta * x)_i * w_i where
    /// `weights` defaults to the position index. With `allowed` unset,
    /// exactly-zero entries are excluded: they are masked-out attention
    /// weights, and only then is a one-hot input recovered exactly for any
    /// beta > 0.
    pub fn softargmax(
        &mut self,
        a: TensorId,
        beta: f64,
        allowed: Option<Rc<Vec<bool>>>,
        weights: Option<Rc<Vec<f64>>>,
    ) -> Result<TensorId, TensorError> {
        let n = self.nodes[a.0].data.len();
        if n == 0 {
            return Err(TensorError::EmptyAxis("softargmax of empty tensor".into()));
        }
        let allowed = allowed.or_else(|| {
            let d = &self.nodes[a.0].data;
            if d.iter().any(|&v| v == 0.0) && d.iter().any(|&v| v != 0.0) {
                Some(Rc::new(d.iter().map(|&v| v != 0.0).collect()))
            } else {
                None
            }
        });
        let scaled = self.scale(a, beta);
        let flat = {
            let data = self.nodes[scaled.0].data.clone();
            let req = self.requires(scaled);
            self.push(vec![n], data, req, Op::Flatten(scaled))
        };
        let sm = self.softmax_masked(flat, allowed)?;
        let w = weights.unwrap_or_else(|| Rc::new((0..n).map(|i| i as f64).collect()));
        self.dot_const(sm, w)
    }

    /// Populate gradients of a scalar loss w.r.t. every `requires_grad` node.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyAxis("backward on empty tape".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, g) in grads.into_iter().enumerate() {
            if self.nodes[i].requires_grad {
                self.nodes[i].grad =
                    Some(g.unwrap_or_else(|| vec![0.0; self.nodes[i].data.len()]));
            }
        }
        Ok(())
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], node_len: usize, id: TensorId, add: impl FnOnce(&mut [f64])) {
        let slot = grads[id.0].get_or_insert_with(|| vec![0.0; node_len]);
        add(slot);
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let op = self.nodes[i].op.clone();
        let len_of = |id: TensorId| self.nodes[id.0].data.len();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.requires(a) {
                    Self::accumulate(grads, len_of(a), a, |ga| {
                        for (x, y) in ga.iter_mut().zip(g) {
                            *x += y;
                        }
                    });
                }
                if self.requires(b) {
                    Self::accumulate(grads, len_of(b), b, |gb| {
                        for (x, y) in gb.iter_mut().zip(g) {
                            *x += y;
                        }
                    });
                }
            }
            Op::Sub(a, b) => {
                if self.requires(a) {
                    Self::accumulate(grads, len_of(a), a, |ga| {
                        for (x, y) in ga.iter_mut().zip(g) {
                            *x += y;
                        }
                    });
                }
                if self.requires(b) {
                    Self::accumulate(grads, len_of(b), b, |gb| {
                        for (x, y) in gb.iter_mut().zip(g) {
                            *x -= y;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                if self.requires(a) {
                    let bd = &self.nodes[b.0].data;
                    Self::accumulate(grads, len_of(a), a, |ga| {
                        for k in 0..ga.len() {
                            ga[k] += g[k] * bd[k];
                        }
                    });
                }
                if self.requires(b) {
                    let ad = &self.nodes[a.0].data;
                    Self::accumulate(grads, len_of(b), b, |gb| {
                        for k in 0..gb.len() {
                            gb[k] += g[k] * ad[k];
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                if self.requires(a) {
                    Self::accumulate(grads, len_of(a), a, |ga| {
                        for (x, y) in ga.iter_mut().zip(g) {
                            *x += y * c;
                        }
                    });
                }
            }
            Op::AddRow(a, row) => {
                let (m, n) = dims2(&self.nodes[a.0].shape);
                if self.requires(a) {
                    Self::accumulate(grads, len_of(a), a, |ga| {
                        for (x, y) in ga.iter_mut().zip(g) {
                            *x += y;
                        }
                    });
                }
                if self.requires(row) {
                    Self::accumulate(grads, len_of(row), row, |gr| {
                        for i in 0..m {
                            for j in 0..n {
                                gr[j] += g[i * n + j];
                            }
                        }
                    });
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = dims2(&self.nodes[a.0].shape);
                let (_, n) = dims2(&self.nodes[b.0].shape);
                if self.requires(a) {
                    let bd = &self.nodes[b.0].data;
                    Self::accumulate(grads, len_of(a), a, |ga| {
                        matrix::gemm_a_bt(ga, g, bd, m, n, k);
                    });
                }
                if self.requires(b) {
                    let ad = &self.nodes[a.0].data;
                    Self::accumulate(grads, len_of(b), b, |gb| {
                        matrix::gemm_at_b(gb, ad, g, k, m, n);
                    });
                }
            }
            Op::Transpose(a) => {
                if self.requires(a) {
                    let (m, n) = dims2(&self.nodes[a.0].shape);
                    Self::accumulate(grads, len_of(a), a, |ga| {
                        for i in 0..m {
                            for j in 0..n {
                                ga[i * n + j] += g[j * m + i];
                            }
                        }
                    });
                }
            }
            Op::Relu(a) => {
                if self.requires(a) {
                    let ad = &self.nodes[a.0].data;
                    Self::accumulate(grads, len_of(a), a, |ga| {
                        for k in 0..ga.len() {
                            if ad[k] > 0.0 {
                                ga[k] += g[k];
                            }
                        }
                    });
                }
            }
            Op::Sigmoid(a) => {
                if self.requires(a) {
                    let yd = &self.nodes[i].data;
                    Self::accumulate(grads, len_of(a), a, |ga| {
                        for k in 0..ga.len() {
                            ga[k] += g[k] * yd[k] * (1.0 - yd[k]);
                        }
                    });
                }
            }
            Op::Ln(a, eps) => {
                if self.requires(a) {
                    let ad = &self.nodes[a.0].data;
                    Self::accumulate(grads, len_of(a), a, |ga| {
                        for k in 0..ga.len() {
                            ga[k] += g[k] / (ad[k] + eps);
                        }
                    });
                }
            }
            Op::Softmax(a) => {
                if self.requires(a) {
                    let (m, n) = dims2(&self.nodes[a.0].shape);
                    let yd = &self.nodes[i].data;
                    Self::accumulate(grads, len_of(a), a, |ga| {
                        for r in 0..m {
                            let y = &yd[r * n..(r + 1) * n];
                            let gr = &g[r * n..(r + 1) * n];
                            let dot: f64 = y.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                            for j in 0..n {
                                ga[r * n + j] += y[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let (m, n) = dims2(&self.nodes[x.0].shape);
                let xd = &self.nodes[x.0].data;
                let gd = &self.nodes[gain.0].data;
                for r in 0..m {
                    let row = &xd[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    if self.requires(gain) {
                        Self::accumulate(grads, len_of(gain), gain, |gg| {
                            for j in 0..n {
                                gg[j] += gr[j] * xhat[j];
                            }
                        });
                    }
                    if self.requires(bias) {
                        Self::accumulate(grads, len_of(bias), bias, |gb| {
                            for j in 0..n {
                                gb[j] += gr[j];
                            }
                        });
                    }
                    if self.requires(x) {
                        let gh: Vec<f64> = (0..n).map(|j| gr[j] * gd[j]).collect();
                        let mean_gh = gh.iter().sum::<f64>() / n as f64;
                        let mean_ghx =
                            gh.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        Self::accumulate(grads, len_of(x), x, |gx| {
                            for j in 0..n {
                                gx[r * n + j] += (gh[j] - mean_gh - xhat[j] * mean_ghx) * inv;
                            }
                        });
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                if self.requires(a) {
                    let (_, n) = dims2(&self.nodes[a.0].shape);
                    Self::accumulate(grads, len_of(a), a, |ga| {
                        for (out_r, &src_r) in idx.iter().enumerate() {
                            for j in 0..n {
                                ga[src_r * n + j] += g[out_r * n + j];
                            }
                        }
                    });
                }
            }
            Op::Flatten(a) => {
                if self.requires(a) {
                    Self::accumulate(grads, len_of(a), a, |ga| {
                        for (x, y) in ga.iter_mut().zip(g) {
                            *x += y;
                        }
                    });
                }
            }
            Op::SliceCols(a, start, len) => {
                if self.requires(a) {
                    let (m, n) = dims2(&self.nodes[a.0].shape);
                    Self::accumulate(grads, len_of(a), a, |ga| {
                        for r in 0..m {
                            for j in 0..len {
                                ga[r * n + start + j] += g[r * len + j];
                            }
                        }
                    });
                }
            }
            Op::ConcatCols(parts) => {
                let m = dims2(&self.nodes[i].shape).0;
                let total = dims2(&self.nodes[i].shape).1;
                let mut offset = 0;
                for p in parts {
                    let (_, pn) = dims2(&self.nodes[p.0].shape);
                    if self.requires(p) {
                        let off = offset;
                        Self::accumulate(grads, len_of(p), p, |gp| {
                            for r in 0..m {
                                for j in 0..pn {
                                    gp[r * pn + j] += g[r * total + off + j];
                                }
                            }
                        });
                    }
                    offset += pn;
                }
            }
            Op::Sum(a) => {
                if self.requires(a) {
                    Self::accumulate(grads, len_of(a), a, |ga| {
                        for x in ga.iter_mut() {
                            *x += g[0];
                        }
                    });
                }
            }
            Op::DotConst(a, v) => {
                if self.requires(a) {
                    Self::accumulate(grads, len_of(a), a, |ga| {
                        for k in 0..ga.len() {
                            ga[k] += g[0] * v[k];
                        }
                    });
                }
            }
            Op::CrossEntropyLogits(a, target) => {
                if self.requires(a) {
                    let x = &self.nodes[a.0].data;
                    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = x.iter().map(|v| (v - max).exp()).sum();
                    Self::accumulate(grads, len_of(a), a, |ga| {
                        for k in 0..ga.len() {
                            let p = (x[k] - max).exp() / z;
                            ga[k] += g[0] * (p - if k == target { 1.0 } else { 0.0 });
                        }
                    });
                }
            }
            Op::NllProb(a, target) => {
                if self.requires(a) {
                    let p = self.nodes[a.0].data[target];
                    Self::accumulate(grads, len_of(a), a, |ga| {
                        ga[target] += -g[0] / (p + NLL_EPS);
                    });
                }
            }
            Op::L1Loss(a, b) => {
                let n = self.nodes[a.0].data.len() as f64;
                let ad = &self.nodes[a.0].data;
                let bd = &self.nodes[b.0].data;
                if self.requires(a) {
                    Self::accumulate(grads, len_of(a), a, |ga| {
                        for k in 0..ga.len() {
                            ga[k] += g[0] * (ad[k] - bd[k]).signum_or_zero() / n;
                        }
                    });
                }
                if self.requires(b) {
                    Self::accumulate(grads, len_of(b), b, |gb| {
                        for k in 0..gb.len() {
                            gb[k] -= g[0] * (ad[k] - bd[k]).signum_or_zero() / n;
                        }
                    });
                }
            }
            Op::Dropout(a, mask) => {
                if self.requires(a) {
                    Self::accumulate(grads, len_of(a), a, |ga| {
                        for k in 0..ga.len() {
                            ga[k] += g[k] * mask[k];
                        }
                    });
                }
            }
        }
    }
}

fn softmax_row(row: &[f64], allowed: Option<&[bool]>, out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if allowed.map_or(true, |a| a[j]) && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        // nothing allowed in this row
        out.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut z = 0.0;
    for (j, &v) in row.iter().enumerate() {
        if allowed.map_or(true, |a| a[j]) {
            let e = (v - max).exp();
            out[j] = e;
            z += e;
        } else {
            out[j] = 0.0;
        }
    }
    for v in out.iter_mut() {
        *v /= z;
    }
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self == 0.0 {
            0.0
        } else {
            self.signum()
        }
    }
}
