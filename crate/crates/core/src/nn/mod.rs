//! The differentiable scoring stack.
//!
//! Everything here runs on the [`tape`] autodiff engine: biaffine forms, the
//! edge-aware graph convolution, the DropConnect BiLSTM, the feed-forward
//! scorer, and the small pure helpers shared with inference code. Parameter
//! containers own plain tensors; `bind` registers them on a tape for one
//! forward/backward pass.

pub mod tape;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use tape::{Gradients, SparseVec, Tape, Tensor, VarId};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("non-finite value produced by operation \"{op}\"")]
    NonFinite { op: &'static str },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("graph node has zero total edge mass")]
    ZeroEdgeMass,
    #[error("all candidates are masked")]
    AllMasked,
    #[error("empty candidate set")]
    EmptyCandidates,
}

/// Rectifier used between the scorer's affine layers; recorded in
/// checkpoints so a reload can refuse a mismatched configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

fn uniform_tensor(rows: usize, cols: usize, limit: f64, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-limit..=limit))
        .collect();
    Tensor { rows, cols, data }
}

fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    uniform_tensor(rows, cols, limit, rng)
}

/// Bilinear form over 1-augmented vectors: `[h_i; 1]ᵀ W [h_j; 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiaffineParams {
    pub w: Tensor,
}

impl BiaffineParams {
    /// `input_dim` is the un-augmented vector length; `w` is square of side
    /// `input_dim + 1`.
    pub fn init(input_dim: usize, rng: &mut impl Rng) -> Self {
        BiaffineParams {
            w: glorot(input_dim + 1, input_dim + 1, rng),
        }
    }

    pub fn zeros(input_dim: usize) -> Self {
        BiaffineParams {
            w: Tensor::zeros(input_dim + 1, input_dim + 1),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.rows - 1
    }

    pub fn bind(&self, tape: &mut Tape) -> VarId {
        tape.leaf(self.w.clone())
    }
}

/// Plain-value evaluation of the biaffine form (no tape).
pub fn biaffine_value(w: &Tensor, hi: &[f64], hj: &[f64]) -> f64 {
    let k = w.rows - 1;
    assert!(hi.len() == k && hj.len() == k, "biaffine length mismatch");
    let mut out = 0.0;
    for r in 0..w.rows {
        let xi = if r < k { hi[r] } else { 1.0 };
        if xi == 0.0 {
            continue;
        }
        let mut acc = 0.0;
        for c in 0..w.cols {
            let xj = if c < k { hj[c] } else { 1.0 };
            acc += w.get(r, c) * xj;
        }
        out += xi * acc;
    }
    out
}

/// Biaffine form on the tape.
pub fn biaffine(tape: &mut Tape, w: VarId, hi: VarId, hj: VarId) -> VarId {
    let ai = tape.append_one(hi);
    let aj = tape.append_one(hj);
    let qj = tape.matvec(w, aj);
    tape.dot(ai, qj)
}

/// One edge-aware graph-convolution layer: projection of `[r_i; r_j; label]`
/// plus bias, aggregated with biaffine-compatibility weights normalized over
/// neighbours that carry edge mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgcnLayerParams {
    /// d × (2d + a) block matrix over `[r_i; r_j; label]`.
    pub weight: Tensor,
    pub bias: Tensor,
    /// Aggregation biaffine over `[r; label]` pairs.
    pub agg: BiaffineParams,
}

impl EgcnLayerParams {
    pub fn init(d: usize, a: usize, rng: &mut impl Rng) -> Self {
        EgcnLayerParams {
            weight: glorot(d, 2 * d + a, rng),
            bias: Tensor::zeros(d, 1),
            agg: BiaffineParams::init(d + a, rng),
        }
    }
}

/// Per-graph-kind convolution stack; the edge-label embedding is shared by
/// every layer of the kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgcnKindParams {
    pub label: Tensor,
    pub layers: Vec<EgcnLayerParams>,
}

impl EgcnKindParams {
    pub fn init(d: usize, a: usize, num_layers: usize, rng: &mut impl Rng) -> Self {
        EgcnKindParams {
            label: uniform_tensor(a, 1, 0.5, rng),
            layers: (0..num_layers)
                .map(|_| EgcnLayerParams::init(d, a, rng))
                .collect(),
        }
    }
}

pub struct EgcnLayerVars {
    pub weight: VarId,
    pub bias: VarId,
    pub agg: VarId,
}

pub struct EgcnKindVars {
    pub label: VarId,
    pub layers: Vec<EgcnLayerVars>,
}

impl EgcnKindParams {
    pub fn bind(&self, tape: &mut Tape) -> EgcnKindVars {
        EgcnKindVars {
            label: tape.leaf(self.label.clone()),
            layers: self
                .layers
                .iter()
                .map(|l| EgcnLayerVars {
                    weight: tape.leaf(l.weight.clone()),
                    bias: tape.leaf(l.bias.clone()),
                    agg: l.agg.bind(tape),
                })
                .collect(),
        }
    }
}

/// One convolution layer over window nodes.
///
/// `adj_rows[i]` is the i-th node's edge-weight row (length = node count,
/// self-loops included); rows may be tape constants or differentiable
/// values. Errors when a row has no edge mass, which self-loops rule out.
pub fn egcn_layer(
    tape: &mut Tape,
    layer: &EgcnLayerVars,
    label: VarId,
    nodes: &[VarId],
    adj_rows: &[VarId],
) -> Result<Vec<VarId>, NnError> {
    let m = nodes.len();
    assert_eq!(adj_rows.len(), m, "adjacency size mismatch");
    let d = tape.value(nodes[0]).rows;

    // W [r_i; r_j; a] + b  =  Wl r_i + Wr r_j + (Wa a + b)
    let wa = tape.matvec_cols(layer.weight, 2 * d, label);
    let c_part = tape.add(wa, layer.bias);
    let left: Vec<VarId> = nodes
        .iter()
        .map(|&r| tape.matvec_cols(layer.weight, 0, r))
        .collect();
    let right: Vec<VarId> = nodes
        .iter()
        .map(|&r| tape.matvec_cols(layer.weight, d, r))
        .collect();

    // biaffine compatibility over label-augmented node features
    let aug: Vec<VarId> = nodes
        .iter()
        .map(|&r| {
            let cat = tape.concat(&[r, label]);
            tape.append_one(cat)
        })
        .collect();
    let proj: Vec<VarId> = aug.iter().map(|&a| tape.matvec(layer.agg, a)).collect();

    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let logits: Vec<VarId> = (0..m).map(|j| tape.dot(aug[i], proj[j])).collect();
        let logit_row = tape.concat(&logits);
        let pi = tape.weighted_softmax(adj_rows[i], logit_row)?;
        let msgs: Vec<VarId> = (0..m)
            .map(|j| tape.sum(&[left[i], right[j], c_part]))
            .collect();
        let agg = tape.weighted_sum(pi, &msgs);
        out.push(tape.sigmoid(agg));
    }
    Ok(out)
}

/// Elementwise sum of the per-graph convolution outputs.
pub fn fuse_graphs(tape: &mut Tape, parts: &[VarId]) -> VarId {
    tape.sum(parts)
}

/// Distance-weighted adjacency rows over window nodes: each off-diagonal row
/// is a softmax of `-(i-j)²/(2√(2π)) + Biaf(h_i, h_j)/√|i-j|`, and the
/// diagonal is a fixed self-loop of 1.
pub fn distance_rows(tape: &mut Tape, w: VarId, nodes: &[VarId]) -> Vec<VarId> {
    let m = nodes.len();
    if m == 1 {
        return vec![tape.leaf(Tensor::vector(vec![1.0]))];
    }
    let denom = 2.0 * (2.0 * std::f64::consts::PI).sqrt();
    let aug: Vec<VarId> = nodes.iter().map(|&h| tape.append_one(h)).collect();
    let proj: Vec<VarId> = aug.iter().map(|&a| tape.matvec(w, a)).collect();
    let mut rows = Vec::with_capacity(m);
    for i in 0..m {
        let mut logits = Vec::with_capacity(m - 1);
        for j in 0..m {
            if j == i {
                continue;
            }
            let dist = (i as f64 - j as f64).abs();
            let biaf = tape.dot(aug[i], proj[j]);
            let scaled = tape.scale(biaf, 1.0 / dist.sqrt());
            logits.push(tape.add_const(scaled, -(dist * dist) / denom));
        }
        let row_logits = tape.concat(&logits);
        let soft = tape.softmax(row_logits);
        rows.push(tape.insert_const(soft, i, 1.0));
    }
    rows
}

/// Gate parameters for one LSTM direction, ordered input/forget/output/cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmDirParams {
    pub w: [Tensor; 4],
    pub u: [Tensor; 4],
    pub b: [Tensor; 4],
}

impl LstmDirParams {
    pub fn init(hidden: usize, input: usize, rng: &mut impl Rng) -> Self {
        LstmDirParams {
            w: std::array::from_fn(|_| glorot(hidden, input, rng)),
            u: std::array::from_fn(|_| glorot(hidden, hidden, rng)),
            b: std::array::from_fn(|_| Tensor::zeros(hidden, 1)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub fwd: LstmDirParams,
    pub bwd: LstmDirParams,
}

impl LstmParams {
    pub fn init(hidden: usize, input: usize, rng: &mut impl Rng) -> Self {
        LstmParams {
            fwd: LstmDirParams::init(hidden, input, rng),
            bwd: LstmDirParams::init(hidden, input, rng),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.fwd.w[0].rows
    }

    pub fn bind(&self, tape: &mut Tape) -> LstmVars {
        let bind_dir = |tape: &mut Tape, d: &LstmDirParams| LstmDirVars {
            w: std::array::from_fn(|g| tape.leaf(d.w[g].clone())),
            u: std::array::from_fn(|g| tape.leaf(d.u[g].clone())),
            b: std::array::from_fn(|g| tape.leaf(d.b[g].clone())),
        };
        LstmVars {
            fwd: bind_dir(tape, &self.fwd),
            bwd: bind_dir(tape, &self.bwd),
        }
    }
}

pub struct LstmDirVars {
    pub w: [VarId; 4],
    pub u: [VarId; 4],
    pub b: [VarId; 4],
}

pub struct LstmVars {
    pub fwd: LstmDirVars,
    pub bwd: LstmDirVars,
}

/// Binary keep-masks over the recurrent weight matrices, one per gate and
/// direction. Entries are kept with probability `1 - p` during training and
/// fixed to all-ones at inference.
#[derive(Debug, Clone, PartialEq)]
pub struct DropConnectMasks {
    pub fwd: [Tensor; 4],
    pub bwd: [Tensor; 4],
}

impl DropConnectMasks {
    pub fn ones(hidden: usize) -> Self {
        let one = Tensor {
            rows: hidden,
            cols: hidden,
            data: vec![1.0; hidden * hidden],
        };
        DropConnectMasks {
            fwd: std::array::from_fn(|_| one.clone()),
            bwd: std::array::from_fn(|_| one.clone()),
        }
    }

    pub fn sample(hidden: usize, p: f64, rng: &mut impl Rng) -> Self {
        let mut draw = |_: usize| Tensor {
            rows: hidden,
            cols: hidden,
            data: (0..hidden * hidden)
                .map(|_| if rng.gen::<f64>() < p { 0.0 } else { 1.0 })
                .collect(),
        };
        DropConnectMasks {
            fwd: std::array::from_fn(&mut draw),
            bwd: std::array::from_fn(&mut draw),
        }
    }
}

fn lstm_direction(
    tape: &mut Tape,
    vars: &LstmDirVars,
    masks: Option<&[Tensor; 4]>,
    inputs: &[VarId],
) -> Vec<VarId> {
    let hidden = tape.value(vars.u[0]).rows;
    let u_eff: [VarId; 4] = std::array::from_fn(|g| match masks {
        Some(m) => tape.mul_mask(vars.u[g], &m[g]),
        None => vars.u[g],
    });
    let mut h = tape.leaf(Tensor::zeros(hidden, 1));
    let mut c = tape.leaf(Tensor::zeros(hidden, 1));
    let mut out = Vec::with_capacity(inputs.len());
    for &x in inputs {
        let pre: [VarId; 4] = std::array::from_fn(|g| {
            let wx = tape.matvec(vars.w[g], x);
            let uh = tape.matvec(u_eff[g], h);
            let s = tape.add(wx, uh);
            tape.add(s, vars.b[g])
        });
        let i = tape.sigmoid(pre[0]);
        let f = tape.sigmoid(pre[1]);
        let o = tape.sigmoid(pre[2]);
        let c_tilde = tape.tanh(pre[3]);
        let fc = tape.mul(f, c);
        let ic = tape.mul(i, c_tilde);
        c = tape.add(fc, ic);
        let tc = tape.tanh(c);
        h = tape.mul(o, tc);
        out.push(h);
    }
    out
}

/// Bidirectional LSTM over the window sequence (increasing utterance index).
/// Per step the forward and backward hidden states are concatenated. With
/// `masks == None` the recurrent weights are used unmasked, which equals
/// all-ones masks.
pub fn bilstm(
    tape: &mut Tape,
    vars: &LstmVars,
    masks: Option<&DropConnectMasks>,
    inputs: &[VarId],
) -> Vec<VarId> {
    if inputs.is_empty() {
        return Vec::new();
    }
    let fwd = lstm_direction(tape, &vars.fwd, masks.map(|m| &m.fwd), inputs);
    let rev: Vec<VarId> = inputs.iter().rev().copied().collect();
    let mut bwd = lstm_direction(tape, &vars.bwd, masks.map(|m| &m.bwd), &rev);
    bwd.reverse();
    fwd.into_iter()
        .zip(bwd)
        .map(|(f, b)| tape.concat(&[f, b]))
        .collect()
}

/// `[h; v]` — sequence feature concatenated with the pair vector it refines.
pub fn residual_concat(tape: &mut Tape, h: VarId, v: VarId) -> VarId {
    tape.concat(&[h, v])
}

/// Two affine layers with a rectifier between; scalar output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FfnnParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl FfnnParams {
    pub fn init(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        FfnnParams {
            w1: glorot(hidden, input, rng),
            b1: Tensor::zeros(hidden, 1),
            w2: glorot(hidden, 1, rng),
            b2: Tensor::scalar(0.0),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> FfnnVars {
        FfnnVars {
            w1: tape.leaf(self.w1.clone()),
            b1: tape.leaf(self.b1.clone()),
            w2: tape.leaf(self.w2.clone()),
            b2: tape.leaf(self.b2.clone()),
        }
    }
}

pub struct FfnnVars {
    pub w1: VarId,
    pub b1: VarId,
    pub w2: VarId,
    pub b2: VarId,
}

pub fn ffnn_score(
    tape: &mut Tape,
    vars: &FfnnVars,
    activation: Activation,
    x: VarId,
    hidden_mask: Option<&Tensor>,
) -> VarId {
    let pre = tape.matvec(vars.w1, x);
    let pre = tape.add(pre, vars.b1);
    let mut hidden = match activation {
        Activation::Relu => tape.relu(pre),
    };
    if let Some(mask) = hidden_mask {
        hidden = tape.mul_mask(hidden, mask);
    }
    let s = tape.dot(vars.w2, hidden);
    tape.add(s, vars.b2)
}

/// Masked softmax over candidate scores: masked-out entries get probability
/// zero, the rest form a softmax. Errors when everything is masked.
pub fn softmax_candidates(scores: &[f64], mask: &[bool]) -> Result<Vec<f64>, NnError> {
    assert_eq!(scores.len(), mask.len(), "mask length mismatch");
    let kept: Vec<f64> = scores
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&s, _)| s)
        .collect();
    if kept.is_empty() {
        return Err(NnError::AllMasked);
    }
    let soft = tape::softmax_slice(&kept);
    let mut out = vec![0.0; scores.len()];
    let mut k = 0;
    for (i, &m) in mask.iter().enumerate() {
        if m {
            out[i] = soft[k];
            k += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn biaffine_zero_weight_is_zero() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::zeros(4, 4));
        let hi = tape.leaf(Tensor::vector(vec![1.0, -2.0, 0.5]));
        let hj = tape.leaf(Tensor::vector(vec![0.3, 0.7, -1.1]));
        let s = biaffine(&mut tape, w, hi, hj);
        assert_eq!(tape.item(s), 0.0);
    }

    #[test]
    fn biaffine_identity_on_unit_vectors() {
        // d = 1, h = (1), W = I₂: [1,1]·I·[1,1]ᵀ = 2
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let h = tape.leaf(Tensor::vector(vec![1.0]));
        let s = biaffine(&mut tape, w, h, h);
        assert_eq!(tape.item(s), 2.0);
    }

    #[test]
    fn biaffine_matches_naive_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let d = rng.gen_range(1..=6);
            let w = glorot(d + 1, d + 1, &mut rng);
            let hi: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let hj: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut expect = 0.0;
            for r in 0..=d {
                for c in 0..=d {
                    let xi = if r < d { hi[r] } else { 1.0 };
                    let xj = if c < d { hj[c] } else { 1.0 };
                    expect += xi * w.get(r, c) * xj;
                }
            }
            let mut tape = Tape::new();
            let wid = tape.leaf(w.clone());
            let a = tape.leaf(Tensor::vector(hi.clone()));
            let b = tape.leaf(Tensor::vector(hj.clone()));
            let s = biaffine(&mut tape, wid, a, b);
            assert!((tape.item(s) - expect).abs() < 1e-12);
            assert!((biaffine_value(&w, &hi, &hj) - expect).abs() < 1e-12);
        }
    }

    fn unit_rows(tape: &mut Tape, m: usize) -> Vec<VarId> {
        (0..m)
            .map(|_| tape.leaf(Tensor::vector(vec![1.0; m])))
            .collect()
    }

    #[test]
    fn egcn_zero_params_give_half() {
        let (d, a, m) = (3, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut kind = EgcnKindParams::init(d, a, 1, &mut rng);
        kind.layers[0].weight = Tensor::zeros(d, 2 * d + a);
        kind.layers[0].bias = Tensor::zeros(d, 1);
        let mut tape = Tape::new();
        let vars = kind.bind(&mut tape);
        let nodes: Vec<VarId> = (0..m)
            .map(|i| tape.leaf(Tensor::vector(vec![i as f64 * 0.1; d])))
            .collect();
        let rows = unit_rows(&mut tape, m);
        let out = egcn_layer(&mut tape, &vars.layers[0], vars.label, &nodes, &rows).unwrap();
        for o in out {
            for v in tape.value(o).iter() {
                assert_eq!(v, 0.5);
            }
        }
    }

    #[test]
    fn egcn_single_node_ignores_aggregation_weights() {
        let (d, a) = (2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let kind = EgcnKindParams::init(d, a, 1, &mut rng);
        let mut tape = Tape::new();
        let vars = kind.bind(&mut tape);
        let node = tape.leaf(Tensor::vector(vec![0.4, -0.3]));
        let row = tape.leaf(Tensor::vector(vec![1.0]));
        let out = egcn_layer(&mut tape, &vars.layers[0], vars.label, &[node], &[row]).unwrap();
        // π = 1 regardless of Agg: output must equal sigmoid(W[r;r;a] + b)
        let l = &kind.layers[0];
        let mut msg = l.bias.data.clone();
        let cat: Vec<f64> = [0.4, -0.3, 0.4, -0.3]
            .iter()
            .copied()
            .chain(kind.label.data.iter().copied())
            .collect();
        for (r, m) in msg.iter_mut().enumerate() {
            for (c, x) in cat.iter().enumerate() {
                *m += l.weight.get(r, c) * x;
            }
        }
        for (got, want) in tape.value(out[0]).iter().zip(msg) {
            assert!((got - tape::sigmoid(want)).abs() < 1e-12);
        }
    }

    #[test]
    fn egcn_matches_scalar_recomputation() {
        let (d, a, m) = (3, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let kind = EgcnKindParams::init(d, a, 1, &mut rng);
        let feats: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        // asymmetric edge weights with self-loops
        let mut adj = vec![vec![0.0; m]; m];
        for i in 0..m {
            for j in 0..m {
                adj[i][j] = if i == j {
                    1.0
                } else if rng.gen_bool(0.7) {
                    rng.gen_range(0.1..1.0)
                } else {
                    0.0
                };
            }
        }

        let mut tape = Tape::new();
        let vars = kind.bind(&mut tape);
        let nodes: Vec<VarId> = feats
            .iter()
            .map(|f| tape.leaf(Tensor::vector(f.clone())))
            .collect();
        let rows: Vec<VarId> = adj
            .iter()
            .map(|r| tape.leaf(Tensor::vector(r.clone())))
            .collect();
        let out = egcn_layer(&mut tape, &vars.layers[0], vars.label, &nodes, &rows).unwrap();

        // plain-loop recomputation
        let l = &kind.layers[0];
        let lab = &kind.label.data;
        for i in 0..m {
            let aug = |k: usize| -> Vec<f64> {
                feats[k].iter().copied().chain(lab.iter().copied()).collect()
            };
            let aggs: Vec<f64> = (0..m)
                .map(|j| biaffine_value(&l.agg.w, &aug(i), &aug(j)).exp())
                .collect();
            let z: f64 = (0..m).map(|k| adj[i][k] * aggs[k]).sum();
            let mut acc = vec![0.0; d];
            for j in 0..m {
                let pi = adj[i][j] * aggs[j] / z;
                if pi == 0.0 {
                    continue;
                }
                let cat: Vec<f64> = feats[i]
                    .iter()
                    .chain(feats[j].iter())
                    .chain(lab.iter())
                    .copied()
                    .collect();
                for (r, o) in acc.iter_mut().enumerate() {
                    let mut msg = l.bias.data[r];
                    for (c, x) in cat.iter().enumerate() {
                        msg += l.weight.get(r, c) * x;
                    }
                    *o += pi * msg;
                }
            }
            for (got, want) in tape.value(out[i]).iter().zip(acc) {
                assert!((got - tape::sigmoid(want)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn fuse_is_commutative_addition() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.5, -1.0]));
        let z1 = tape.leaf(Tensor::zeros(2, 1));
        let z2 = tape.leaf(Tensor::zeros(2, 1));
        let z3 = tape.leaf(Tensor::zeros(2, 1));
        let f = fuse_graphs(&mut tape, &[z1, z2, z3, x]);
        assert_eq!(tape.value(f).data, vec![0.5, -1.0]);

        let f4 = fuse_graphs(&mut tape, &[x, x, x, x]);
        assert_eq!(tape.value(f4).data, vec![2.0, -4.0]);

        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::vector(vec![-0.5, 0.25]));
        let p1 = fuse_graphs(&mut tape, &[a, b, x, z1]);
        let p2 = fuse_graphs(&mut tape, &[z1, x, b, a]);
        assert_eq!(tape.value(p1).data, tape.value(p2).data);
    }

    #[test]
    fn bilstm_zero_weights_zero_hidden() {
        let d = 3;
        let mut params = LstmParams::init(d, d, &mut ChaCha8Rng::seed_from_u64(8));
        for dir in [&mut params.fwd, &mut params.bwd] {
            for g in 0..4 {
                dir.w[g] = Tensor::zeros(d, d);
                dir.u[g] = Tensor::zeros(d, d);
                dir.b[g] = Tensor::zeros(d, 1);
            }
        }
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let inputs: Vec<VarId> = (0..4)
            .map(|i| tape.leaf(Tensor::vector(vec![i as f64; d])))
            .collect();
        let out = bilstm(&mut tape, &vars, None, &inputs);
        for h in out {
            assert!(tape.value(h).iter().all(|v| v == 0.0));
        }
    }

    #[test]
    fn bilstm_length_one_uses_single_step_both_ways() {
        let d = 2;
        let params = LstmParams::init(d, d, &mut ChaCha8Rng::seed_from_u64(9));
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let x = tape.leaf(Tensor::vector(vec![0.3, -0.8]));
        let out = bilstm(&mut tape, &vars, None, &[x]);
        assert_eq!(out.len(), 1);
        assert_eq!(tape.value(out[0]).rows, 2 * d);
    }

    #[test]
    fn bilstm_all_ones_masks_equal_no_masks() {
        let d = 3;
        let params = LstmParams::init(d, d, &mut ChaCha8Rng::seed_from_u64(10));
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let inputs: Vec<VarId> = (0..5)
            .map(|i| tape.leaf(Tensor::vector(vec![0.1 * i as f64, -0.2, 0.4])))
            .collect();
        let masks = DropConnectMasks::ones(d);
        let with = bilstm(&mut tape, &vars, Some(&masks), &inputs);
        let without = bilstm(&mut tape, &vars, None, &inputs);
        for (a, b) in with.iter().zip(&without) {
            assert_eq!(tape.value(*a).data, tape.value(*b).data);
        }
    }

    #[test]
    fn bilstm_empty_sequence() {
        let params = LstmParams::init(2, 2, &mut ChaCha8Rng::seed_from_u64(11));
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        assert!(bilstm(&mut tape, &vars, None, &[]).is_empty());
    }

    #[test]
    fn residual_concat_splits_back() {
        let mut tape = Tape::new();
        let h = tape.leaf(Tensor::zeros(4, 1));
        let v = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let cat = residual_concat(&mut tape, h, v);
        let t = tape.value(cat);
        assert_eq!(t.rows, 6);
        assert_eq!(&t.data[4..], &[1.0, 2.0]);
        assert!(t.data[..4].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn ffnn_zero_params_zero_score() {
        let p = FfnnParams {
            w1: Tensor::zeros(3, 4),
            b1: Tensor::zeros(3, 1),
            w2: Tensor::zeros(3, 1),
            b2: Tensor::scalar(0.0),
        };
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 3.0, 0.5]));
        let s = ffnn_score(&mut tape, &vars, Activation::Relu, x, None);
        assert_eq!(tape.item(s), 0.0);
    }

    #[test]
    fn ffnn_matches_hand_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = FfnnParams::init(4, 3, &mut rng);
        let x = vec![0.7, -0.1, 0.4, 1.2];
        let mut hidden = vec![0.0; 3];
        for r in 0..3 {
            let mut acc = p.b1.data[r];
            for (c, xv) in x.iter().enumerate() {
                acc += p.w1.get(r, c) * xv;
            }
            hidden[r] = acc.max(0.0);
        }
        let expect: f64 = hidden
            .iter()
            .zip(&p.w2.data)
            .map(|(h, w)| h * w)
            .sum::<f64>()
            + p.b2.item();

        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let xid = tape.leaf(Tensor::vector(x));
        let s = ffnn_score(&mut tape, &vars, Activation::Relu, xid, None);
        assert!((tape.item(s) - expect).abs() < 1e-12);
    }

    #[test]
    fn softmax_candidates_basics() {
        let p = softmax_candidates(&[3.0], &[true]).unwrap();
        assert_eq!(p, vec![1.0]);

        let p = softmax_candidates(&[0.5, 0.5, 0.5, 9.0], &[true, true, true, false]).unwrap();
        for v in &p[..3] {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(p[3], 0.0);

        let p = softmax_candidates(&[0.0, 3f64.ln()], &[true, true]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-12);
        assert!((p[1] - 0.75).abs() < 1e-12);

        assert!(matches!(
            softmax_candidates(&[1.0, 2.0], &[false, false]),
            Err(NnError::AllMasked)
        ));
    }

    #[test]
    fn softmax_argmax_invariant_under_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let n = rng.gen_range(2..=8);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let shifted: Vec<f64> = scores.iter().map(|s| s + 17.5).collect();
            let mask = vec![true; n];
            let p1 = softmax_candidates(&scores, &mask).unwrap();
            let p2 = softmax_candidates(&shifted, &mask).unwrap();
            let argmax = |v: &[f64]| {
                v.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            };
            assert_eq!(argmax(&p1), argmax(&p2));
        }
    }

    #[test]
    fn distance_rows_sum_to_one_off_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let d = 3;
        let bia = BiaffineParams::init(d, &mut rng);
        let mut tape = Tape::new();
        let w = bia.bind(&mut tape);
        let nodes: Vec<VarId> = (0..5)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                tape.leaf(Tensor::vector(v))
            })
            .collect();
        let rows = distance_rows(&mut tape, w, &nodes);
        for (i, r) in rows.iter().enumerate() {
            let t = tape.value(*r);
            assert_eq!(t.rows, 5);
            assert_eq!(t.data[i], 1.0);
            let off: f64 = t
                .data
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &v)| v)
                .sum();
            assert!((off - 1.0).abs() < 1e-12);
        }
    }
}
