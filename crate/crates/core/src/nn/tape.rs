//! Tape-based reverse-mode automatic differentiation over small dense
//! tensors.
//!
//! Operations are recorded in construction order on an append-only arena, so
//! the arena order is already a topological order and the backward pass is a
//! single reverse sweep. Values are checked for finiteness as they are
//! pushed; [`Tape::backward`] reports the first offending operation by name
//! instead of propagating NaNs silently.

use serde::{Deserialize, Serialize};

use super::NnError;

/// Dense row-major matrix; vectors are `(n, 1)`, scalars `(1, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            rows: data.len(),
            cols: 1,
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Tensor { rows, cols, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_vector(&self) -> bool {
        self.cols == 1
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// Value of a 1-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.data.iter().copied()
    }

    fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Fixed (non-differentiable) sparse feature vector for [`Tape::affine_sparse`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseVec {
    pub dim: usize,
    /// (index, value) with strictly increasing indices.
    pub entries: Vec<(usize, f64)>,
}

impl SparseVec {
    pub fn new(dim: usize, mut entries: Vec<(usize, f64)>) -> Self {
        entries.sort_unstable_by_key(|&(i, _)| i);
        for w in entries.windows(2) {
            assert!(w[0].0 < w[1].0, "duplicate sparse index {}", w[0].0);
        }
        if let Some(&(last, _)) = entries.last() {
            assert!(last < dim, "sparse index {last} out of range {dim}");
        }
        SparseVec { dim, entries }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for &(i, x) in &self.entries {
            v[i] = x;
        }
        v
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Sum(Vec<VarId>),
    Scale(VarId, f64),
    AddConst(VarId),
    Mul(VarId, VarId),
    MulMask(VarId, Tensor),
    MatVec(VarId, VarId),
    /// `W[:, start..start+len(x)] · x` without materializing the slice.
    MatVecCols(VarId, usize, VarId),
    Dot(VarId, VarId),
    Concat(Vec<VarId>),
    AppendOne(VarId),
    InsertConst(VarId, usize),
    Sigmoid(VarId),
    Tanh(VarId),
    Relu(VarId),
    Softmax(VarId),
    /// Normalized `w_k · exp(s_k) / Σ w · exp(s)`; `aux` keeps `exp(s−M)/Z̃`.
    WeightedSoftmax(VarId, VarId),
    LogSumExp(VarId),
    /// `Σ_j coeffs[j] · vecs[j]`.
    WeightedSum(VarId, Vec<VarId>),
    AffineSparse {
        weight: VarId,
        bias: VarId,
        features: SparseVec,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Sum(..) => "sum",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::Mul(..) => "mul",
            Op::MulMask(..) => "mul_mask",
            Op::MatVec(..) => "matvec",
            Op::MatVecCols(..) => "matvec_cols",
            Op::Dot(..) => "dot",
            Op::Concat(..) => "concat",
            Op::AppendOne(..) => "append_one",
            Op::InsertConst(..) => "insert_const",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Softmax(..) => "softmax",
            Op::WeightedSoftmax(..) => "weighted_softmax",
            Op::LogSumExp(..) => "logsumexp",
            Op::WeightedSum(..) => "weighted_sum",
            Op::AffineSparse { .. } => "affine_sparse",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    aux: Option<Vec<f64>>,
}

/// Append-only operation arena.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    first_nonfinite: Option<(usize, &'static str)>,
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

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn item(&self, id: VarId) -> f64 {
        self.nodes[id.0].value.item()
    }

    /// Errors if any recorded value is non-finite, naming the operation.
    pub fn ensure_finite(&self) -> Result<(), NnError> {
        match self.first_nonfinite {
            Some((_, op)) => Err(NnError::NonFinite { op }),
            None => Ok(()),
        }
    }

    fn push(&mut self, op: Op, value: Tensor, aux: Option<Vec<f64>>) -> VarId {
        if self.first_nonfinite.is_none() && !value.data.iter().all(|v| v.is_finite()) {
            self.first_nonfinite = Some((self.nodes.len(), op.name()));
        }
        self.nodes.push(Node { op, value, aux });
        VarId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.push(Op::Leaf, value, None)
    }

    pub fn scalar(&mut self, v: f64) -> VarId {
        self.leaf(Tensor::scalar(v))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(ta.same_shape(tb), "add shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let value = Tensor {
            rows: ta.rows,
            cols: ta.cols,
            data,
        };
        self.push(Op::Add(a, b), value, None)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(ta.same_shape(tb), "sub shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect();
        let value = Tensor {
            rows: ta.rows,
            cols: ta.cols,
            data,
        };
        self.push(Op::Sub(a, b), value, None)
    }

    /// Elementwise sum of same-shaped tensors; `ids` must be non-empty.
    pub fn sum(&mut self, ids: &[VarId]) -> VarId {
        assert!(!ids.is_empty(), "sum of nothing");
        let first = &self.nodes[ids[0].0].value;
        let (rows, cols) = (first.rows, first.cols);
        let mut data = first.data.clone();
        for id in &ids[1..] {
            let t = &self.nodes[id.0].value;
            assert!(t.rows == rows && t.cols == cols, "sum shape mismatch");
            for (d, v) in data.iter_mut().zip(&t.data) {
                *d += v;
            }
        }
        self.push(Op::Sum(ids.to_vec()), Tensor { rows, cols, data }, None)
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let ta = &self.nodes[a.0].value;
        let value = Tensor {
            rows: ta.rows,
            cols: ta.cols,
            data: ta.data.iter().map(|x| x * c).collect(),
        };
        self.push(Op::Scale(a, c), value, None)
    }

    pub fn add_const(&mut self, a: VarId, c: f64) -> VarId {
        let ta = &self.nodes[a.0].value;
        let value = Tensor {
            rows: ta.rows,
            cols: ta.cols,
            data: ta.data.iter().map(|x| x + c).collect(),
        };
        self.push(Op::AddConst(a), value, None)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(ta.same_shape(tb), "mul shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let value = Tensor {
            rows: ta.rows,
            cols: ta.cols,
            data,
        };
        self.push(Op::Mul(a, b), value, None)
    }

    /// Elementwise product with a constant tensor (dropout / DropConnect
    /// masks).
    pub fn mul_mask(&mut self, a: VarId, mask: &Tensor) -> VarId {
        let ta = &self.nodes[a.0].value;
        assert!(ta.same_shape(mask), "mul_mask shape mismatch");
        let data = ta.data.iter().zip(&mask.data).map(|(x, y)| x * y).collect();
        let value = Tensor {
            rows: ta.rows,
            cols: ta.cols,
            data,
        };
        self.push(Op::MulMask(a, mask.clone()), value, None)
    }

    pub fn matvec(&mut self, w: VarId, x: VarId) -> VarId {
        let (tw, tx) = (&self.nodes[w.0].value, &self.nodes[x.0].value);
        assert!(tx.is_vector(), "matvec rhs must be a vector");
        assert_eq!(tw.cols, tx.rows, "matvec shape mismatch");
        let mut data = vec![0.0; tw.rows];
        for r in 0..tw.rows {
            let row = &tw.data[r * tw.cols..(r + 1) * tw.cols];
            data[r] = row.iter().zip(&tx.data).map(|(a, b)| a * b).sum();
        }
        self.push(Op::MatVec(w, x), Tensor::vector(data), None)
    }

    /// `W[:, start..start+len(x)] · x`; lets one parameter matrix serve
    /// several input blocks without slicing it apart.
    pub fn matvec_cols(&mut self, w: VarId, start: usize, x: VarId) -> VarId {
        let (tw, tx) = (&self.nodes[w.0].value, &self.nodes[x.0].value);
        assert!(tx.is_vector(), "matvec_cols rhs must be a vector");
        let k = tx.rows;
        assert!(start + k <= tw.cols, "matvec_cols block out of range");
        let mut data = vec![0.0; tw.rows];
        for r in 0..tw.rows {
            let row = &tw.data[r * tw.cols + start..r * tw.cols + start + k];
            data[r] = row.iter().zip(&tx.data).map(|(a, b)| a * b).sum();
        }
        self.push(Op::MatVecCols(w, start, x), Tensor::vector(data), None)
    }

    pub fn dot(&mut self, a: VarId, b: VarId) -> VarId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(ta.is_vector() && tb.is_vector(), "dot on non-vectors");
        assert_eq!(ta.rows, tb.rows, "dot length mismatch");
        let v = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).sum();
        self.push(Op::Dot(a, b), Tensor::scalar(v), None)
    }

    /// Concatenates vectors (or scalars) into one vector.
    pub fn concat(&mut self, ids: &[VarId]) -> VarId {
        assert!(!ids.is_empty(), "concat of nothing");
        let mut data = Vec::new();
        for id in ids {
            let t = &self.nodes[id.0].value;
            assert!(t.is_vector(), "concat on non-vector");
            data.extend_from_slice(&t.data);
        }
        self.push(Op::Concat(ids.to_vec()), Tensor::vector(data), None)
    }

    /// `[x; 1]` — the augmented vector used by biaffine forms.
    pub fn append_one(&mut self, x: VarId) -> VarId {
        let tx = &self.nodes[x.0].value;
        assert!(tx.is_vector(), "append_one on non-vector");
        let mut data = tx.data.clone();
        data.push(1.0);
        self.push(Op::AppendOne(x), Tensor::vector(data), None)
    }

    /// Inserts a constant at `pos`, shifting the tail right.
    pub fn insert_const(&mut self, x: VarId, pos: usize, v: f64) -> VarId {
        let tx = &self.nodes[x.0].value;
        assert!(tx.is_vector() && pos <= tx.rows, "insert_const out of range");
        let mut data = tx.data.clone();
        data.insert(pos, v);
        self.push(Op::InsertConst(x, pos), Tensor::vector(data), None)
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let ta = &self.nodes[a.0].value;
        let value = Tensor {
            rows: ta.rows,
            cols: ta.cols,
            data: ta.data.iter().map(|&x| sigmoid(x)).collect(),
        };
        self.push(Op::Sigmoid(a), value, None)
    }

    pub fn tanh(&mut self, a: VarId) -> VarId {
        let ta = &self.nodes[a.0].value;
        let value = Tensor {
            rows: ta.rows,
            cols: ta.cols,
            data: ta.data.iter().map(|x| x.tanh()).collect(),
        };
        self.push(Op::Tanh(a), value, None)
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let ta = &self.nodes[a.0].value;
        let value = Tensor {
            rows: ta.rows,
            cols: ta.cols,
            data: ta.data.iter().map(|x| x.max(0.0)).collect(),
        };
        self.push(Op::Relu(a), value, None)
    }

    /// Numerically stable softmax over a vector.
    pub fn softmax(&mut self, a: VarId) -> VarId {
        let ta = &self.nodes[a.0].value;
        assert!(ta.is_vector() && !ta.is_empty(), "softmax needs a non-empty vector");
        let value = Tensor::vector(softmax_slice(&ta.data));
        self.push(Op::Softmax(a), value, None)
    }

    /// `π_k = w_k·exp(s_k) / Σ_j w_j·exp(s_j)` for non-negative prior
    /// weights `w`. Errors when the normalizer has no mass.
    pub fn weighted_softmax(&mut self, w: VarId, s: VarId) -> Result<VarId, NnError> {
        let (tw, ts) = (&self.nodes[w.0].value, &self.nodes[s.0].value);
        assert!(tw.is_vector() && ts.is_vector(), "weighted_softmax on non-vectors");
        assert_eq!(tw.rows, ts.rows, "weighted_softmax length mismatch");
        let m = ts
            .data
            .iter()
            .zip(&tw.data)
            .filter(|(_, &w)| w > 0.0)
            .map(|(&s, _)| s)
            .fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            return Err(NnError::ZeroEdgeMass);
        }
        // ê_k = exp(s_k - m) / Σ_j w_j exp(s_j - m); π_k = w_k ê_k
        let e: Vec<f64> = ts.data.iter().map(|&s| (s - m).exp()).collect();
        let z: f64 = e.iter().zip(&tw.data).map(|(e, w)| e * w).sum();
        if !(z > 0.0) {
            return Err(NnError::ZeroEdgeMass);
        }
        let ehat: Vec<f64> = e.iter().map(|&x| x / z).collect();
        let pi: Vec<f64> = ehat.iter().zip(&tw.data).map(|(e, w)| e * w).collect();
        Ok(self.push(Op::WeightedSoftmax(w, s), Tensor::vector(pi), Some(ehat)))
    }

    /// Stable `log Σ exp` over a non-empty vector.
    pub fn logsumexp(&mut self, a: VarId) -> VarId {
        let ta = &self.nodes[a.0].value;
        assert!(ta.is_vector() && !ta.is_empty(), "logsumexp needs a non-empty vector");
        let m = ta.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = ta.data.iter().map(|&x| (x - m).exp()).sum();
        let soft: Vec<f64> = ta.data.iter().map(|&x| (x - m).exp() / z).collect();
        self.push(
            Op::LogSumExp(a),
            Tensor::scalar(m + z.ln()),
            Some(soft),
        )
    }

    /// `Σ_j coeffs[j] · vecs[j]` with a differentiable coefficient vector.
    pub fn weighted_sum(&mut self, coeffs: VarId, vecs: &[VarId]) -> VarId {
        let tc = &self.nodes[coeffs.0].value;
        assert!(tc.is_vector(), "weighted_sum coeffs must be a vector");
        assert_eq!(tc.rows, vecs.len(), "weighted_sum arity mismatch");
        assert!(!vecs.is_empty(), "weighted_sum of nothing");
        let d = self.nodes[vecs[0].0].value.rows;
        let mut data = vec![0.0; d];
        for (j, v) in vecs.iter().enumerate() {
            let tv = &self.nodes[v.0].value;
            assert!(tv.is_vector() && tv.rows == d, "weighted_sum shape mismatch");
            let c = tc.data[j];
            for (acc, x) in data.iter_mut().zip(&tv.data) {
                *acc += c * x;
            }
        }
        self.push(
            Op::WeightedSum(coeffs, vecs.to_vec()),
            Tensor::vector(data),
            None,
        )
    }

    /// `W·x + b` for a fixed sparse feature vector `x`.
    pub fn affine_sparse(&mut self, weight: VarId, bias: VarId, features: SparseVec) -> VarId {
        let (tw, tb) = (&self.nodes[weight.0].value, &self.nodes[bias.0].value);
        assert_eq!(tw.cols, features.dim, "affine_sparse width mismatch");
        assert!(tb.is_vector() && tb.rows == tw.rows, "affine_sparse bias mismatch");
        let mut data = tb.data.clone();
        for &(i, x) in &features.entries {
            for (r, out) in data.iter_mut().enumerate() {
                *out += tw.data[r * tw.cols + i] * x;
            }
        }
        self.push(
            Op::AffineSparse {
                weight,
                bias,
                features,
            },
            Tensor::vector(data),
            None,
        )
    }

    /// Reverse sweep from a scalar loss. Returns one gradient per reachable
    /// node; unreachable nodes report zero shape-matched tensors on demand.
    pub fn backward(&self, loss: VarId) -> Result<Gradients, NnError> {
        self.ensure_finite()?;
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward requires a scalar loss"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        for (idx, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.data.iter().all(|v| v.is_finite()) {
                    return Err(NnError::NonFinite {
                        op: self.nodes[idx].op.name(),
                    });
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<(), NnError> {
        let acc = |grads: &mut [Option<Tensor>], id: VarId, f: &mut dyn FnMut(&mut Tensor)| {
            let t = &self.nodes[id.0].value;
            let slot = grads[id.0].get_or_insert_with(|| Tensor::zeros(t.rows, t.cols));
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, &mut |t| add_into(t, g, 1.0));
                acc(grads, *b, &mut |t| add_into(t, g, 1.0));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, &mut |t| add_into(t, g, 1.0));
                acc(grads, *b, &mut |t| add_into(t, g, -1.0));
            }
            Op::Sum(ids) => {
                for id in ids {
                    acc(grads, *id, &mut |t| add_into(t, g, 1.0));
                }
            }
            Op::Scale(a, c) => acc(grads, *a, &mut |t| add_into(t, g, *c)),
            Op::AddConst(a) => acc(grads, *a, &mut |t| add_into(t, g, 1.0)),
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                acc(grads, *a, &mut |t| {
                    for ((o, &gi), &bi) in t.data.iter_mut().zip(&g.data).zip(&tb.data) {
                        *o += gi * bi;
                    }
                });
                acc(grads, *b, &mut |t| {
                    for ((o, &gi), &ai) in t.data.iter_mut().zip(&g.data).zip(&ta.data) {
                        *o += gi * ai;
                    }
                });
            }
            Op::MulMask(a, mask) => acc(grads, *a, &mut |t| {
                for ((o, &gi), &mi) in t.data.iter_mut().zip(&g.data).zip(&mask.data) {
                    *o += gi * mi;
                }
            }),
            Op::MatVec(w, x) => {
                let (tw, tx) = (&self.nodes[w.0].value, &self.nodes[x.0].value);
                acc(grads, *w, &mut |t| {
                    for r in 0..tw.rows {
                        let gr = g.data[r];
                        let row = &mut t.data[r * tw.cols..(r + 1) * tw.cols];
                        for (o, &xi) in row.iter_mut().zip(&tx.data) {
                            *o += gr * xi;
                        }
                    }
                });
                acc(grads, *x, &mut |t| {
                    for r in 0..tw.rows {
                        let gr = g.data[r];
                        let row = &tw.data[r * tw.cols..(r + 1) * tw.cols];
                        for (o, &wi) in t.data.iter_mut().zip(row) {
                            *o += gr * wi;
                        }
                    }
                });
            }
            Op::MatVecCols(w, start, x) => {
                let (tw, tx) = (&self.nodes[w.0].value, &self.nodes[x.0].value);
                let k = tx.rows;
                acc(grads, *w, &mut |t| {
                    for r in 0..tw.rows {
                        let gr = g.data[r];
                        let row = &mut t.data[r * tw.cols + start..r * tw.cols + start + k];
                        for (o, &xi) in row.iter_mut().zip(&tx.data) {
                            *o += gr * xi;
                        }
                    }
                });
                acc(grads, *x, &mut |t| {
                    for r in 0..tw.rows {
                        let gr = g.data[r];
                        let row = &tw.data[r * tw.cols + start..r * tw.cols + start + k];
                        for (o, &wi) in t.data.iter_mut().zip(row) {
                            *o += gr * wi;
                        }
                    }
                });
            }
            Op::Dot(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let gs = g.data[0];
                acc(grads, *a, &mut |t| {
                    for (o, &bi) in t.data.iter_mut().zip(&tb.data) {
                        *o += gs * bi;
                    }
                });
                acc(grads, *b, &mut |t| {
                    for (o, &ai) in t.data.iter_mut().zip(&ta.data) {
                        *o += gs * ai;
                    }
                });
            }
            Op::Concat(ids) => {
                let mut off = 0;
                for id in ids {
                    let len = self.nodes[id.0].value.rows;
                    acc(grads, *id, &mut |t| {
                        for (o, &gi) in t.data.iter_mut().zip(&g.data[off..off + len]) {
                            *o += gi;
                        }
                    });
                    off += len;
                }
            }
            Op::AppendOne(x) => {
                let n = self.nodes[x.0].value.rows;
                acc(grads, *x, &mut |t| {
                    for (o, &gi) in t.data.iter_mut().zip(&g.data[..n]) {
                        *o += gi;
                    }
                });
            }
            Op::InsertConst(x, pos) => {
                acc(grads, *x, &mut |t| {
                    for (i, o) in t.data.iter_mut().enumerate() {
                        let src = if i < *pos { i } else { i + 1 };
                        *o += g.data[src];
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(grads, *a, &mut |t| {
                    for ((o, &gi), &yi) in t.data.iter_mut().zip(&g.data).zip(&y.data) {
                        *o += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = &node.value;
                acc(grads, *a, &mut |t| {
                    for ((o, &gi), &yi) in t.data.iter_mut().zip(&g.data).zip(&y.data) {
                        *o += gi * (1.0 - yi * yi);
                    }
                });
            }
            Op::Relu(a) => {
                let x = &self.nodes[a.0].value;
                acc(grads, *a, &mut |t| {
                    for ((o, &gi), &xi) in t.data.iter_mut().zip(&g.data).zip(&x.data) {
                        if xi > 0.0 {
                            *o += gi;
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let inner: f64 = g.data.iter().zip(&y.data).map(|(g, y)| g * y).sum();
                acc(grads, *a, &mut |t| {
                    for ((o, &gi), &yi) in t.data.iter_mut().zip(&g.data).zip(&y.data) {
                        *o += yi * (gi - inner);
                    }
                });
            }
            Op::WeightedSoftmax(w, s) => {
                let pi = &node.value;
                let ehat = node.aux.as_ref().expect("weighted_softmax aux");
                let inner: f64 = g.data.iter().zip(&pi.data).map(|(g, p)| g * p).sum();
                acc(grads, *w, &mut |t| {
                    for ((o, &gi), &ei) in t.data.iter_mut().zip(&g.data).zip(ehat.iter()) {
                        *o += ei * (gi - inner);
                    }
                });
                acc(grads, *s, &mut |t| {
                    for ((o, &gi), &pi) in t.data.iter_mut().zip(&g.data).zip(&pi.data) {
                        *o += pi * (gi - inner);
                    }
                });
            }
            Op::LogSumExp(a) => {
                let soft = node.aux.as_ref().expect("logsumexp aux");
                let gs = g.data[0];
                acc(grads, *a, &mut |t| {
                    for (o, &si) in t.data.iter_mut().zip(soft.iter()) {
                        *o += gs * si;
                    }
                });
            }
            Op::WeightedSum(coeffs, vecs) => {
                let tc = &self.nodes[coeffs.0].value;
                acc(grads, *coeffs, &mut |t| {
                    for (j, v) in vecs.iter().enumerate() {
                        let tv = &self.nodes[v.0].value;
                        t.data[j] += g.data.iter().zip(&tv.data).map(|(g, x)| g * x).sum::<f64>();
                    }
                });
                for (j, v) in vecs.iter().enumerate() {
                    let c = tc.data[j];
                    acc(grads, *v, &mut |t| add_into(t, g, c));
                }
            }
            Op::AffineSparse {
                weight,
                bias,
                features,
            } => {
                let tw = &self.nodes[weight.0].value;
                acc(grads, *weight, &mut |t| {
                    for &(i, x) in &features.entries {
                        for (r, &gr) in g.data.iter().enumerate() {
                            t.data[r * tw.cols + i] += gr * x;
                        }
                    }
                });
                acc(grads, *bias, &mut |t| add_into(t, g, 1.0));
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut Tensor, src: &Tensor, scale: f64) {
    for (o, &s) in dst.data.iter_mut().zip(&src.data) {
        *o += s * scale;
    }
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. the node, or `None` when the node does
    /// not influence the loss.
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stable softmax of a non-empty slice.
pub(crate) fn softmax_slice(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}
