//! Flat autodiff tape over rank-2 tensors.
//!
//! Nodes are appended in topological order; the backward pass walks the tape
//! once in reverse. Values are `f64` throughout.

use std::collections::BTreeMap;
use std::rc::Rc;

use thiserror::Error;

use super::params::ParamStore;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("{op}: shape mismatch, lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: [usize; 2], rhs: [usize; 2] },
    #[error("{op}: invalid argument: {message}")]
    Invalid { op: &'static str, message: String },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("checkpoint i/o: {0}")]
    Checkpoint(String),
}

/// Dense row-major rank-2 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Array {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Array { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "array data length");
        Array { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Array { rows: r, cols: c, data }
    }

    pub fn scalar(v: f64) -> Self {
        Array { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn matmul(&self, other: &Array) -> Array {
        let mut out = Array::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        out
    }

    fn transpose(&self) -> Array {
        let mut out = Array::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }
}

/// Boolean key-validity mask for attention: `valid[q][k]` says query row `q`
/// may attend to key row `k`. Queries with no valid key produce a zero
/// attention output.
#[derive(Debug, Clone)]
pub struct AttentionMask {
    pub valid: Vec<Vec<bool>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct TensorId(usize);

enum Op {
    Leaf { trainable: bool },
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    AddScalar(TensorId, f64),
    AddBias(TensorId, TensorId),
    Matmul(TensorId, TensorId),
    Transpose(TensorId),
    Gelu(TensorId),
    Exp(TensorId),
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, eps: f64 },
    Softmax { x: TensorId, mask: Option<Rc<AttentionMask>> },
    SliceCols { x: TensorId, start: usize, len: usize },
    ConcatCols(Vec<TensorId>),
    ConcatRows(Vec<TensorId>),
    GatherRows { table: TensorId, indices: Rc<Vec<usize>> },
    SumAll(TensorId),
    MeanAll(TensorId),
    CrossEntropy { logits: TensorId, targets: Rc<Vec<usize>> },
}

struct Node {
    value: Array,
    grad: Option<Array>,
    op: Op,
}

/// Append-only computation tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array, op: Op) -> TensorId {
        self.nodes.push(Node { value, grad: None, op });
        TensorId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: TensorId) -> &Array {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: TensorId) -> Option<&Array> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn shape(&self, id: TensorId) -> [usize; 2] {
        self.nodes[id.0].value.shape()
    }

    pub fn leaf(&mut self, value: Array, trainable: bool) -> TensorId {
        self.push(value, Op::Leaf { trainable })
    }

    pub fn constant(&mut self, value: Array) -> TensorId {
        self.leaf(value, false)
    }

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<(), NnError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(NnError::ShapeMismatch { op, lhs: sa, rhs: sb });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NnError> {
        self.same_shape("add", a, b)?;
        let v = Array {
            rows: self.shape(a)[0],
            cols: self.shape(a)[1],
            data: self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x + y).collect(),
        };
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NnError> {
        self.same_shape("sub", a, b)?;
        let v = Array {
            rows: self.shape(a)[0],
            cols: self.shape(a)[1],
            data: self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x - y).collect(),
        };
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NnError> {
        self.same_shape("mul", a, b)?;
        let v = Array {
            rows: self.shape(a)[0],
            cols: self.shape(a)[1],
            data: self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x * y).collect(),
        };
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: TensorId, k: f64) -> TensorId {
        let v = Array {
            rows: self.shape(a)[0],
            cols: self.shape(a)[1],
            data: self.value(a).data.iter().map(|x| x * k).collect(),
        };
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: TensorId, k: f64) -> TensorId {
        let v = Array {
            rows: self.shape(a)[0],
            cols: self.shape(a)[1],
            data: self.value(a).data.iter().map(|x| x + k).collect(),
        };
        self.push(v, Op::AddScalar(a, k))
    }

    /// Broadcast-add a `[1, c]` bias row to every row of `x`.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId, NnError> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb[0] != 1 || sb[1] != sx[1] {
            return Err(NnError::ShapeMismatch { op: "add_bias", lhs: sx, rhs: sb });
        }
        let mut v = self.value(x).clone();
        let b = &self.value(bias).data;
        for r in 0..v.rows {
            for c in 0..v.cols {
                v.data[r * v.cols + c] += b[c];
            }
        }
        Ok(self.push(v, Op::AddBias(x, bias)))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NnError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[0] {
            return Err(NnError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let v = self.value(a).matmul(self.value(b));
        Ok(self.push(v, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let v = Array {
            rows: self.shape(a)[0],
            cols: self.shape(a)[1],
            data: self.value(a).data.iter().map(|&x| gelu(x)).collect(),
        };
        self.push(v, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        let v = Array {
            rows: self.shape(a)[0],
            cols: self.shape(a)[1],
            data: self.value(a).data.iter().map(|x| x.exp()).collect(),
        };
        self.push(v, Op::Exp(a))
    }

    /// Row-wise layer normalization with affine parameters of shape `[1, c]`.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId) -> Result<TensorId, NnError> {
        let eps = 1e-5;
        let sx = self.shape(x);
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            let sp = self.shape(p);
            if sp != [1, sx[1]] {
                return Err(NnError::Invalid {
                    op: "layer_norm",
                    message: format!("{name} has shape {sp:?}, expected [1, {}]", sx[1]),
                });
            }
        }
        let xv = self.value(x);
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let mut v = Array::zeros(sx[0], sx[1]);
        let c = sx[1] as f64;
        for r in 0..sx[0] {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, &x) in row.iter().enumerate() {
                v.data[r * sx[1] + j] = g[j] * (x - mean) * inv + b[j];
            }
        }
        Ok(self.push(v, Op::LayerNorm { x, gamma, beta, eps }))
    }

    /// Row-wise softmax with an optional key-validity mask. Rows with no
    /// valid key yield an all-zero probability row.
    pub fn softmax_rows(&mut self, x: TensorId, mask: Option<Rc<AttentionMask>>) -> Result<TensorId, NnError> {
        let s = self.shape(x);
        if let Some(m) = &mask {
            if m.valid.len() != s[0] || m.valid.iter().any(|r| r.len() != s[1]) {
                return Err(NnError::Invalid { op: "softmax", message: format!("mask does not cover {s:?}") });
            }
        }
        let xv = self.value(x);
        let mut v = Array::zeros(s[0], s[1]);
        for r in 0..s[0] {
            let row = xv.row(r);
            let valid = |j: usize| mask.as_ref().map(|m| m.valid[r][j]).unwrap_or(true);
            let mut hi = f64::NEG_INFINITY;
            for (j, &x) in row.iter().enumerate() {
                if valid(j) {
                    hi = hi.max(x);
                }
            }
            if hi == f64::NEG_INFINITY {
                continue; // fully masked row stays zero
            }
            let mut z = 0.0;
            for (j, &x) in row.iter().enumerate() {
                if valid(j) {
                    let e = (x - hi).exp();
                    v.data[r * s[1] + j] = e;
                    z += e;
                }
            }
            for j in 0..s[1] {
                v.data[r * s[1] + j] /= z;
            }
        }
        Ok(self.push(v, Op::Softmax { x, mask }))
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId, NnError> {
        let s = self.shape(x);
        if start + len > s[1] {
            return Err(NnError::Invalid { op: "slice_cols", message: format!("{start}+{len} > {}", s[1]) });
        }
        let xv = self.value(x);
        let mut v = Array::zeros(s[0], len);
        for r in 0..s[0] {
            v.data[r * len..(r + 1) * len].copy_from_slice(&xv.row(r)[start..start + len]);
        }
        Ok(self.push(v, Op::SliceCols { x, start, len }))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId, NnError> {
        let rows = self.shape(parts[0])[0];
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[0] != rows {
                return Err(NnError::ShapeMismatch { op: "concat_cols", lhs: [rows, 0], rhs: s });
            }
            cols += s[1];
        }
        let mut v = Array::zeros(rows, cols);
        for r in 0..rows {
            let mut at = 0;
            for &p in parts {
                let pv = self.value(p);
                v.data[r * cols + at..r * cols + at + pv.cols].copy_from_slice(pv.row(r));
                at += pv.cols;
            }
        }
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId, NnError> {
        let cols = self.shape(parts[0])[1];
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[1] != cols {
                return Err(NnError::ShapeMismatch { op: "concat_rows", lhs: [0, cols], rhs: s });
            }
            rows += s[0];
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(&self.value(p).data);
        }
        Ok(self.push(Array { rows, cols, data }, Op::ConcatRows(parts.to_vec())))
    }

    /// Embedding lookup: rows of `table` selected by `indices`.
    pub fn gather_rows(&mut self, table: TensorId, indices: &[usize]) -> Result<TensorId, NnError> {
        let s = self.shape(table);
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[0]) {
            return Err(NnError::Invalid { op: "gather_rows", message: format!("index {bad} out of {}", s[0]) });
        }
        let tv = self.value(table);
        let mut v = Array::zeros(indices.len(), s[1]);
        for (r, &i) in indices.iter().enumerate() {
            v.data[r * s[1]..(r + 1) * s[1]].copy_from_slice(tv.row(i));
        }
        Ok(self.push(v, Op::GatherRows { table, indices: Rc::new(indices.to_vec()) }))
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let v = Array::scalar(self.value(x).data.iter().sum());
        self.push(v, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.value(x).data.len() as f64;
        let v = Array::scalar(self.value(x).data.iter().sum::<f64>() / n);
        self.push(v, Op::MeanAll(x))
    }

    /// Mean cross-entropy of row-wise logits against integer targets,
    /// computed with the log-sum-exp trick.
    pub fn cross_entropy(&mut self, logits: TensorId, targets: &[usize]) -> Result<TensorId, NnError> {
        let s = self.shape(logits);
        if targets.len() != s[0] {
            return Err(NnError::Invalid {
                op: "cross_entropy",
                message: format!("{} targets for {} rows", targets.len(), s[0]),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= s[1]) {
            return Err(NnError::Invalid { op: "cross_entropy", message: format!("target {bad} out of {}", s[1]) });
        }
        let lv = self.value(logits);
        let mut acc = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = hi + row.iter().map(|x| (x - hi).exp()).sum::<f64>().ln();
            acc += lse - row[t];
        }
        let v = Array::scalar(acc / targets.len() as f64);
        Ok(self.push(v, Op::CrossEntropy { logits, targets: Rc::new(targets.to_vec()) }))
    }

    /// Mean squared error over entries selected by `mask` (1.0 = counted).
    /// The denominator is the number of selected entries.
    pub fn masked_mse(&mut self, pred: TensorId, target: TensorId, mask: &Array) -> Result<TensorId, NnError> {
        self.same_shape("masked_mse", pred, target)?;
        let count = mask.data.iter().filter(|&&m| m != 0.0).count().max(1) as f64;
        let m = self.constant(mask.clone());
        let d = self.sub(pred, target)?;
        let dm = self.mul(d, m)?;
        let sq = self.mul(dm, dm)?;
        let s = self.sum_all(sq);
        Ok(self.scale(s, 1.0 / count))
    }

    fn accumulate(&mut self, id: TensorId, delta: Array) {
        let node = &mut self.nodes[id.0];
        match node.grad.as_mut() {
            Some(g) => {
                for (a, b) in g.data.iter_mut().zip(&delta.data) {
                    *a += b;
                }
            }
            None => node.grad = Some(delta),
        }
    }

    /// Reverse pass seeding `d(loss)/d(loss) = 1`. The loss must be a
    /// `[1, 1]` scalar.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), NnError> {
        let s = self.shape(loss);
        if s != [1, 1] {
            return Err(NnError::Invalid { op: "backward", message: format!("loss has shape {s:?}") });
        }
        if !self.value(loss).is_finite() {
            return Err(NnError::NonFinite("loss"));
        }
        for node in self.nodes.iter_mut() {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(Array::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(go) = self.nodes[i].grad.clone() else { continue };
            // reborrow per-arm to keep the borrow checker happy
            match &self.nodes[i].op {
                Op::Leaf { .. } => {}
                &Op::Add(a, b) => {
                    self.accumulate(a, go.clone());
                    self.accumulate(b, go);
                }
                &Op::Sub(a, b) => {
                    let neg = Array { rows: go.rows, cols: go.cols, data: go.data.iter().map(|x| -x).collect() };
                    self.accumulate(a, go);
                    self.accumulate(b, neg);
                }
                &Op::Mul(a, b) => {
                    let av = self.value(a).clone();
                    let bv = self.value(b).clone();
                    let ga = Array {
                        rows: go.rows,
                        cols: go.cols,
                        data: go.data.iter().zip(&bv.data).map(|(g, y)| g * y).collect(),
                    };
                    let gb = Array {
                        rows: go.rows,
                        cols: go.cols,
                        data: go.data.iter().zip(&av.data).map(|(g, x)| g * x).collect(),
                    };
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                &Op::Scale(a, k) => {
                    let g = Array { rows: go.rows, cols: go.cols, data: go.data.iter().map(|x| x * k).collect() };
                    self.accumulate(a, g);
                }
                &Op::AddScalar(a, _) => self.accumulate(a, go),
                &Op::AddBias(x, bias) => {
                    let cols = go.cols;
                    let mut gb = Array::zeros(1, cols);
                    for r in 0..go.rows {
                        for c in 0..cols {
                            gb.data[c] += go.data[r * cols + c];
                        }
                    }
                    self.accumulate(x, go);
                    self.accumulate(bias, gb);
                }
                &Op::Matmul(a, b) => {
                    let av = self.value(a).clone();
                    let bv = self.value(b).clone();
                    let ga = go.matmul(&bv.transpose());
                    let gb = av.transpose().matmul(&go);
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                &Op::Transpose(a) => self.accumulate(a, go.transpose()),
                &Op::Gelu(a) => {
                    let av = self.value(a).clone();
                    let g = Array {
                        rows: go.rows,
                        cols: go.cols,
                        data: go.data.iter().zip(&av.data).map(|(g, &x)| g * gelu_grad(x)).collect(),
                    };
                    self.accumulate(a, g);
                }
                &Op::Exp(a) => {
                    let yv = self.nodes[i].value.clone();
                    let g = Array {
                        rows: go.rows,
                        cols: go.cols,
                        data: go.data.iter().zip(&yv.data).map(|(g, y)| g * y).collect(),
                    };
                    self.accumulate(a, g);
                }
                &Op::LayerNorm { x, gamma, beta, eps } => {
                    let xv = self.value(x).clone();
                    let gv = self.value(gamma).clone();
                    let cols = xv.cols;
                    let cf = cols as f64;
                    let mut gx = Array::zeros(xv.rows, cols);
                    let mut gg = Array::zeros(1, cols);
                    let mut gb = Array::zeros(1, cols);
                    for r in 0..xv.rows {
                        let row = xv.row(r);
                        let mean = row.iter().sum::<f64>() / cf;
                        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cf;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|x| (x - mean) * inv).collect();
                        let gorow = &go.data[r * cols..(r + 1) * cols];
                        let dxhat: Vec<f64> = gorow.iter().zip(&gv.data).map(|(g, w)| g * w).collect();
                        let mean_dxhat = dxhat.iter().sum::<f64>() / cf;
                        let mean_dxhat_xhat = dxhat.iter().zip(&xhat).map(|(d, h)| d * h).sum::<f64>() / cf;
                        for j in 0..cols {
                            gx.data[r * cols + j] = inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                            gg.data[j] += gorow[j] * xhat[j];
                            gb.data[j] += gorow[j];
                        }
                    }
                    self.accumulate(x, gx);
                    self.accumulate(gamma, gg);
                    self.accumulate(beta, gb);
                }
                Op::Softmax { x, .. } => {
                    let x = *x;
                    let p = self.nodes[i].value.clone();
                    let mut gx = Array::zeros(p.rows, p.cols);
                    for r in 0..p.rows {
                        let prow = p.row(r);
                        let grow = &go.data[r * p.cols..(r + 1) * p.cols];
                        let dot: f64 = prow.iter().zip(grow).map(|(p, g)| p * g).sum();
                        for j in 0..p.cols {
                            gx.data[r * p.cols + j] = prow[j] * (grow[j] - dot);
                        }
                    }
                    self.accumulate(x, gx);
                }
                &Op::SliceCols { x, start, len } => {
                    let s = self.shape(x);
                    let mut gx = Array::zeros(s[0], s[1]);
                    for r in 0..s[0] {
                        for j in 0..len {
                            gx.data[r * s[1] + start + j] = go.data[r * len + j];
                        }
                    }
                    self.accumulate(x, gx);
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let mut at = 0;
                    for p in parts {
                        let s = self.shape(p);
                        let mut gp = Array::zeros(s[0], s[1]);
                        for r in 0..s[0] {
                            gp.data[r * s[1]..(r + 1) * s[1]]
                                .copy_from_slice(&go.data[r * go.cols + at..r * go.cols + at + s[1]]);
                        }
                        at += s[1];
                        self.accumulate(p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let parts = parts.clone();
                    let mut at = 0;
                    for p in parts {
                        let s = self.shape(p);
                        let gp = Array {
                            rows: s[0],
                            cols: s[1],
                            data: go.data[at * go.cols..(at + s[0]) * go.cols].to_vec(),
                        };
                        at += s[0];
                        self.accumulate(p, gp);
                    }
                }
                Op::GatherRows { table, indices } => {
                    let table = *table;
                    let indices = indices.clone();
                    let s = self.shape(table);
                    let mut gt = Array::zeros(s[0], s[1]);
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..s[1] {
                            gt.data[i * s[1] + j] += go.data[r * s[1] + j];
                        }
                    }
                    self.accumulate(table, gt);
                }
                &Op::SumAll(x) => {
                    let s = self.shape(x);
                    let g = go.data[0];
                    self.accumulate(x, Array { rows: s[0], cols: s[1], data: vec![g; s[0] * s[1]] });
                }
                &Op::MeanAll(x) => {
                    let s = self.shape(x);
                    let n = (s[0] * s[1]) as f64;
                    let g = go.data[0] / n;
                    self.accumulate(x, Array { rows: s[0], cols: s[1], data: vec![g; s[0] * s[1]] });
                }
                Op::CrossEntropy { logits, targets } => {
                    let logits = *logits;
                    let targets = targets.clone();
                    let lv = self.value(logits).clone();
                    let g = go.data[0] / targets.len() as f64;
                    let mut gl = Array::zeros(lv.rows, lv.cols);
                    for (r, &t) in targets.iter().enumerate() {
                        let row = lv.row(r);
                        let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|x| (x - hi).exp()).sum();
                        for j in 0..lv.cols {
                            let p = (row[j] - hi).exp() / z;
                            gl.data[r * lv.cols + j] = g * (p - if j == t { 1.0 } else { 0.0 });
                        }
                    }
                    self.accumulate(logits, gl);
                }
            }
        }
        Ok(())
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// A tape together with the parameter bindings of one forward/backward pass.
/// Parameters are cloned onto the tape on first use and memoized by name, so
/// repeated uses share one node and gradients accumulate. Joint training
/// passes bind several stores on one tape; parameter names must then be
/// disjoint across stores.
pub struct Ctx<'s> {
    pub tape: Tape,
    stores: Vec<&'s ParamStore>,
    bound: BTreeMap<String, TensorId>,
}

impl<'s> Ctx<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Ctx { tape: Tape::new(), stores: vec![store], bound: BTreeMap::new() }
    }

    pub fn with_stores(stores: &[&'s ParamStore]) -> Self {
        Ctx { tape: Tape::new(), stores: stores.to_vec(), bound: BTreeMap::new() }
    }

    pub fn param(&mut self, name: &str) -> Result<TensorId, NnError> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let value = self
            .stores
            .iter()
            .find_map(|s| s.get(name))
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))?
            .clone();
        let id = self.tape.leaf(value, true);
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn backward(&mut self, loss: TensorId) -> Result<(), NnError> {
        self.tape.backward(loss)
    }

    /// Parameter gradients of the last backward pass. Unused parameters are
    /// absent.
    pub fn grads(&self) -> BTreeMap<String, Array> {
        let mut out = BTreeMap::new();
        for (name, &id) in &self.bound {
            if let Some(g) = self.tape.grad(id) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}
