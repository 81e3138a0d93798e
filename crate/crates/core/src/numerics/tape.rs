//! Dynamic tape for reverse-mode differentiation.
//!
//! Each forward evaluation records matrix-level operations into a fresh
//! `Tape`; `backward` replays them in reverse and accumulates gradients for
//! every registered parameter. Node ids are topologically ordered by
//! construction, so the reverse sweep is a single indexed loop.
//!
//! All kernels use fixed summation order, which keeps outputs bit-identical
//! across runs and makes identities like the per-token attention
//! decomposition hold exactly.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Handle to a value recorded on a tape.
pub type VarId = usize;

/// Named parameter collection; `BTreeMap` keeps iteration deterministic.
pub type ParamSet = BTreeMap<String, Tensor>;

/// Gradients keyed by parameter identifier. Every parameter registered on
/// the tape has exactly one entry; parameters the loss never touched hold
/// zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMap(BTreeMap<String, Tensor>);

impl GradientMap {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn from_map(map: BTreeMap<String, Tensor>) -> Self {
        GradientMap(map)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// a[m,k] @ b[k,n]
    Matmul(VarId, VarId),
    /// a[m,k] @ b[n,k]^T
    MatmulNT(VarId, VarId),
    Add(VarId, VarId),
    Sub(VarId, VarId),
    /// Elementwise product.
    Mul(VarId, VarId),
    Scale(VarId, f64),
    /// Matrix plus a row vector added to every row.
    AddRowBroadcast(VarId, VarId),
    /// Matrix with a vector added to one row only.
    AddToRow(VarId, usize, VarId),
    /// Rows (each `[1,d]`) stacked into `[n,d]`; ids may repeat.
    StackRows(Vec<VarId>),
    Reshape(VarId),
    Silu(VarId),
    SoftmaxRows(VarId),
    Sum(VarId),
    Mean(VarId),
    /// Sum of squared entries.
    SumSquares(VarId),
}

struct Node {
    value: Tensor,
    op: Op,
    /// Parameter identifier when this leaf is tracked for gradients.
    param: Option<String>,
}

/// Recording tape. Build one per forward evaluation and drop it afterwards.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> VarId {
        self.nodes.push(Node { value, op, param: None });
        self.nodes.len() - 1
    }

    /// Untracked input value.
    pub fn input(&mut self, value: Tensor) -> VarId {
        self.push(value, Op::Leaf)
    }

    /// Tracked parameter; the tape snapshots the current value.
    pub fn param(&mut self, name: &str, value: &Tensor) -> VarId {
        let id = self.push(value.clone(), Op::Leaf);
        self.nodes[id].param = Some(name.to_string());
        id
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── Recorded operations ─────────────────────────────────────────

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = kernel::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Matmul(a, b)))
    }

    /// `a @ b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = kernel::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatmulNT(a, b)))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = kernel::zip(self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = kernel::zip(self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = kernel::zip(self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let v = kernel::map(self.value(a), |x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    /// Add a `[1,n]` row vector to every row of a `[m,n]` matrix.
    pub fn add_row_broadcast(&mut self, m: VarId, row: VarId) -> Result<VarId> {
        let v = kernel::add_row_broadcast(self.value(m), self.value(row))?;
        Ok(self.push(v, Op::AddRowBroadcast(m, row)))
    }

    /// Add a `[1,n]` vector to row `row` of a `[m,n]` matrix, other rows
    /// bit-identical to the input.
    pub fn add_to_row(&mut self, m: VarId, row: usize, vec: VarId) -> Result<VarId> {
        let v = kernel::add_to_row(self.value(m), row, self.value(vec))?;
        Ok(self.push(v, Op::AddToRow(m, row, vec)))
    }

    /// Stack `[1,d]` rows into an `[n,d]` matrix. The same id may appear
    /// multiple times; its gradient accumulates over occurrences.
    pub fn stack_rows(&mut self, rows: &[VarId]) -> Result<VarId> {
        if rows.is_empty() {
            return Err(Error::shape("stack_rows: no rows"));
        }
        let d = self.value(rows[0]).numel();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            let t = self.value(r);
            if t.numel() != d || t.rows() != 1 {
                return Err(Error::shape("stack_rows: rows must be [1,d] with equal d"));
            }
            data.extend_from_slice(t.data());
        }
        let v = Tensor::new(vec![rows.len(), d], data)?;
        Ok(self.push(v, Op::StackRows(rows.to_vec())))
    }

    pub fn reshape(&mut self, a: VarId, shape: Vec<usize>) -> Result<VarId> {
        let v = self.value(a).reshaped(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn silu(&mut self, a: VarId) -> VarId {
        let v = kernel::map(self.value(a), kernel::silu);
        self.push(v, Op::Silu(a))
    }

    pub fn softmax_rows(&mut self, a: VarId) -> Result<VarId> {
        let v = kernel::softmax_rows(self.value(a))?;
        Ok(self.push(v, Op::SoftmaxRows(a)))
    }

    pub fn sum(&mut self, a: VarId) -> VarId {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: VarId) -> VarId {
        let t = self.value(a);
        let v = Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64);
        self.push(v, Op::Mean(a))
    }

    pub fn sum_squares(&mut self, a: VarId) -> VarId {
        let v = Tensor::scalar(self.value(a).data().iter().map(|x| x * x).sum());
        self.push(v, Op::SumSquares(a))
    }

    /// Mean squared error between two same-shape tensors: `sum((a-b)^2)/n`.
    pub fn mse(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let n = self.value(a).numel() as f64;
        let diff = self.sub(a, b)?;
        let ss = self.sum_squares(diff);
        Ok(self.scale(ss, 1.0 / n))
    }

    // ── Reverse sweep ────────────────────────────────────────────────

    /// Reverse-mode gradients of a scalar loss for every parameter
    /// registered on this tape. Parameters unreachable from the loss get
    /// zero gradients.
    pub fn backward(&self, loss: VarId) -> Result<GradientMap> {
        if !self.nodes[loss].value.is_scalar() {
            return Err(Error::shape(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }

        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Some(name) = &node.param {
                let g = match grads.get(id).and_then(|g| g.as_ref()) {
                    Some(g) => Tensor::new(node.value.shape().to_vec(), g.clone())?,
                    None => Tensor::zeros(node.value.shape().to_vec()),
                };
                match out.get_mut(name) {
                    // Same name registered twice: accumulate.
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => {
                        out.insert(name.clone(), g);
                    }
                }
            }
        }
        Ok(GradientMap(out))
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: VarId, delta: &[f64]) {
        match &mut grads[id] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(delta) {
                    *a += b;
                }
            }
            None => grads[id] = Some(delta.to_vec()),
        }
    }

    fn propagate(&self, id: VarId, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let (ad, bd) = (ta.data(), tb.data());
                // dA = G @ B^T: rows of G dotted with rows of B.
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    let g_row = &g[i * n..(i + 1) * n];
                    let da_row = &mut da[i * k..(i + 1) * k];
                    for (j, dv) in da_row.iter_mut().enumerate() {
                        let b_row = &bd[j * n..(j + 1) * n];
                        let mut acc = 0.0;
                        for (&x, &y) in g_row.iter().zip(b_row) {
                            acc += x * y;
                        }
                        *dv = acc;
                    }
                }
                // dB = A^T @ G: accumulate outer products row by row.
                let mut db = vec![0.0; k * n];
                for l in 0..m {
                    let a_row = &ad[l * k..(l + 1) * k];
                    let g_row = &g[l * n..(l + 1) * n];
                    for (i, &a_li) in a_row.iter().enumerate() {
                        let db_row = &mut db[i * n..(i + 1) * n];
                        for (o, &gv) in db_row.iter_mut().zip(g_row) {
                            *o += a_li * gv;
                        }
                    }
                }
                self.accumulate(grads, *a, &da);
                self.accumulate(grads, *b, &db);
            }
            Op::MatmulNT(a, b) => {
                // C = A @ B^T with A [m,k], B [n,k], C [m,n]
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                let (ad, bd) = (ta.data(), tb.data());
                // dA = G @ B
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    let g_row = &g[i * n..(i + 1) * n];
                    let da_row = &mut da[i * k..(i + 1) * k];
                    for (l, &g_il) in g_row.iter().enumerate() {
                        let b_row = &bd[l * k..(l + 1) * k];
                        for (o, &bv) in da_row.iter_mut().zip(b_row) {
                            *o += g_il * bv;
                        }
                    }
                }
                // dB = G^T @ A
                let mut db = vec![0.0; n * k];
                for l in 0..m {
                    let g_row = &g[l * n..(l + 1) * n];
                    let a_row = &ad[l * k..(l + 1) * k];
                    for (i, &g_li) in g_row.iter().enumerate() {
                        let db_row = &mut db[i * k..(i + 1) * k];
                        for (o, &av) in db_row.iter_mut().zip(a_row) {
                            *o += g_li * av;
                        }
                    }
                }
                self.accumulate(grads, *a, &da);
                self.accumulate(grads, *b, &db);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                self.accumulate(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let da: Vec<f64> = g.iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = g.iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                self.accumulate(grads, *a, &da);
                self.accumulate(grads, *b, &db);
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = g.iter().map(|x| x * c).collect();
                self.accumulate(grads, *a, &da);
            }
            Op::AddRowBroadcast(m_id, row_id) => {
                self.accumulate(grads, *m_id, g);
                let n = self.nodes[*row_id].value.numel();
                let rows = g.len() / n;
                let mut drow = vec![0.0; n];
                for r in 0..rows {
                    for c in 0..n {
                        drow[c] += g[r * n + c];
                    }
                }
                self.accumulate(grads, *row_id, &drow);
            }
            Op::AddToRow(m_id, row, vec_id) => {
                self.accumulate(grads, *m_id, g);
                let n = self.nodes[*vec_id].value.numel();
                self.accumulate(grads, *vec_id, &g[row * n..(row + 1) * n]);
            }
            Op::StackRows(rows) => {
                let d = g.len() / rows.len();
                for (i, &r) in rows.iter().enumerate() {
                    self.accumulate(grads, r, &g[i * d..(i + 1) * d]);
                }
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, g);
            }
            Op::Silu(a) => {
                let ta = &self.nodes[*a].value;
                let da: Vec<f64> = g
                    .iter()
                    .zip(ta.data())
                    .map(|(g, &x)| g * kernel::silu_prime(x))
                    .collect();
                self.accumulate(grads, *a, &da);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[id].value;
                let (rows, cols) = (y.rows(), y.cols());
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    let mut dot = 0.0;
                    for c in 0..cols {
                        dot += g[r * cols + c] * y.at(r, c);
                    }
                    for c in 0..cols {
                        da[r * cols + c] = y.at(r, c) * (g[r * cols + c] - dot);
                    }
                }
                self.accumulate(grads, *a, &da);
            }
            Op::Sum(a) => {
                let n = self.nodes[*a].value.numel();
                self.accumulate(grads, *a, &vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.nodes[*a].value.numel();
                self.accumulate(grads, *a, &vec![g[0] / n as f64; n]);
            }
            Op::SumSquares(a) => {
                let da: Vec<f64> = self.nodes[*a].value.data().iter().map(|x| 2.0 * x * g[0]).collect();
                self.accumulate(grads, *a, &da);
            }
        }
        Ok(())
    }
}

/// Forward kernels shared by recorded ops and standalone helpers.
pub(crate) mod kernel {
    use super::*;

    // Row-streaming loops: each output element still accumulates over the
    // shared dimension in ascending order, so results are bit-identical to
    // the textbook triple loop.
    pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
            return Err(Error::shape(format!(
                "matmul: {:?} @ {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let (ad, bd) = (a.data(), b.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &ad[i * k..(i + 1) * k];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (l, &a_il) in a_row.iter().enumerate() {
                let b_row = &bd[l * n..(l + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += a_il * bv;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols() {
            return Err(Error::shape(format!(
                "matmul_nt: {:?} @ {:?}^T",
                a.shape(),
                b.shape()
            )));
        }
        let (m, k, n) = (a.rows(), a.cols(), b.rows());
        let (ad, bd) = (a.data(), b.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &bd[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for (&x, &y) in a_row.iter().zip(b_row) {
                    acc += x * y;
                }
                out[i * n + j] = acc;
            }
        }
        Tensor::new(vec![m, n], out)
    }

    pub fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::shape(format!(
                "elementwise: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    pub fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
        let data = a.data().iter().map(|&x| f(x)).collect();
        Tensor::new(a.shape().to_vec(), data).expect("same shape")
    }

    pub fn add_row_broadcast(m: &Tensor, row: &Tensor) -> Result<Tensor> {
        if row.rows() != 1 || row.numel() != m.cols() {
            return Err(Error::shape(format!(
                "add_row_broadcast: {:?} + {:?}",
                m.shape(),
                row.shape()
            )));
        }
        let mut data = m.data().to_vec();
        let n = m.cols();
        for r in 0..m.rows() {
            for c in 0..n {
                data[r * n + c] += row.data()[c];
            }
        }
        Tensor::new(m.shape().to_vec(), data)
    }

    pub fn add_to_row(m: &Tensor, row: usize, vec: &Tensor) -> Result<Tensor> {
        if vec.numel() != m.cols() {
            return Err(Error::shape(format!(
                "add_to_row: row width {} vs vector length {}",
                m.cols(),
                vec.numel()
            )));
        }
        if row >= m.rows() {
            return Err(Error::contract(format!(
                "add_to_row: row {} out of {} rows",
                row,
                m.rows()
            )));
        }
        let mut data = m.data().to_vec();
        let n = m.cols();
        for c in 0..n {
            data[row * n + c] += vec.data()[c];
        }
        Tensor::new(m.shape().to_vec(), data)
    }

    pub fn silu(x: f64) -> f64 {
        x * sigmoid(x)
    }

    pub fn silu_prime(x: f64) -> f64 {
        let s = sigmoid(x);
        s * (1.0 + x * (1.0 - s))
    }

    pub fn sigmoid(x: f64) -> f64 {
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    }

    /// Row-stabilized softmax: subtracts the row max before exponentiating.
    pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
        if m.rank() != 2 {
            return Err(Error::shape(format!(
                "softmax_rows: expected rank 2, got {:?}",
                m.shape()
            )));
        }
        let (rows, cols) = (m.rows(), m.cols());
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let mx = m.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for c in 0..cols {
                let e = (m.at(r, c) - mx).exp();
                out[r * cols + c] = e;
                denom += e;
            }
            for c in 0..cols {
                out[r * cols + c] /= denom;
            }
        }
        Tensor::new(vec![rows, cols], out)
    }
}

/// Numerically stabilized row softmax of a rank-2 tensor.
pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
    m.check_finite("softmax_rows input")?;
    kernel::softmax_rows(m)
}
