//! Parameter containers and the assembled window scorer.
//!
//! For a current utterance `c`, every candidate `j` in the window `(c-ω, c]`
//! gets a pair vector from the encoder; the four discourse graphs over the
//! window are convolved per kind, fused by addition, passed through the
//! BiLSTM in index order, concatenated with the pair vector, and scored by
//! the feed-forward head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{candidate_window, Dialogue};
use crate::encoder::{featurize_pair, EncoderParams};
use crate::graphs::{
    build_mention_graph, build_reply_graph, build_speaker_graph, ReplySet,
};
use crate::nn::{
    bilstm, distance_rows, egcn_layer, ffnn_score, fuse_graphs, residual_concat, Activation,
    BiaffineParams, DropConnectMasks, EgcnKindParams, EgcnKindVars, FfnnParams, FfnnVars,
    Gradients, LstmParams, LstmVars, NnError, Tape, Tensor, VarId,
};

/// Which discourse-graph branches are active; disabling all of them routes
/// the encoder vectors straight into the BiLSTM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphSet {
    pub speaker: bool,
    pub mention: bool,
    pub distance: bool,
    pub reply: bool,
}

impl Default for GraphSet {
    fn default() -> Self {
        GraphSet {
            speaker: true,
            mention: true,
            distance: true,
            reply: true,
        }
    }
}

impl GraphSet {
    pub fn none() -> Self {
        GraphSet {
            speaker: false,
            mention: false,
            distance: false,
            reply: false,
        }
    }

    pub fn any(&self) -> bool {
        self.speaker || self.mention || self.distance || self.reply
    }

    fn enabled(&self) -> Vec<usize> {
        [self.speaker, self.mention, self.distance, self.reply]
            .iter()
            .enumerate()
            .filter(|(_, &on)| on)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Model dimensions and switches. `hidden` is the pair-vector dimension d;
/// the BiLSTM emits 2d and the scorer consumes 3d.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub label_dim: usize,
    pub egcn_layers: usize,
    pub ffnn_hidden: usize,
    pub buckets: usize,
    pub window: usize,
    pub dropout: f64,
    pub activation: Activation,
    pub graphs: GraphSet,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 64,
            label_dim: 10,
            egcn_layers: 2,
            ffnn_hidden: 32,
            buckets: 2048,
            window: 50,
            dropout: 0.2,
            activation: Activation::Relu,
            graphs: GraphSet::default(),
        }
    }
}

const KIND_NAMES: [&str; 4] = ["S", "M", "D", "R"];

/// All trainable state. The four convolution stacks are indexed in the fixed
/// order S, M, D, R regardless of which branches are enabled, so ablation
/// switches never perturb seeded initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    pub dist_biaffine: BiaffineParams,
    pub egcn: [EgcnKindParams; 4],
    pub lstm: LstmParams,
    pub ffnn: FfnnParams,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden;
        let a = config.label_dim;
        let encoder = EncoderParams::init(d, config.buckets, &mut rng);
        let dist_biaffine = BiaffineParams::init(d, &mut rng);
        let egcn = std::array::from_fn(|_| EgcnKindParams::init(d, a, config.egcn_layers, &mut rng));
        let lstm = LstmParams::init(d, d, &mut rng);
        let ffnn = FfnnParams::init(3 * d, config.ffnn_hidden, &mut rng);
        Model {
            config,
            encoder,
            dist_biaffine,
            egcn,
            lstm,
            ffnn,
        }
    }

    /// Visits every parameter tensor with a stable name, in a fixed order
    /// shared with [`ModelVars::ids`].
    pub fn for_each_param(&self, mut f: impl FnMut(&str, &Tensor)) {
        f("encoder.projection", &self.encoder.projection);
        f("encoder.bias", &self.encoder.bias);
        f("distance.biaffine", &self.dist_biaffine.w);
        for (k, kind) in self.egcn.iter().enumerate() {
            let kn = KIND_NAMES[k];
            f(&format!("egcn.{kn}.label"), &kind.label);
            for (l, layer) in kind.layers.iter().enumerate() {
                f(&format!("egcn.{kn}.l{l}.weight"), &layer.weight);
                f(&format!("egcn.{kn}.l{l}.bias"), &layer.bias);
                f(&format!("egcn.{kn}.l{l}.agg"), &layer.agg.w);
            }
        }
        const GATES: [&str; 4] = ["i", "f", "o", "c"];
        for (dn, dir) in [("fwd", &self.lstm.fwd), ("bwd", &self.lstm.bwd)] {
            for g in 0..4 {
                f(&format!("lstm.{dn}.w_{}", GATES[g]), &dir.w[g]);
            }
            for g in 0..4 {
                f(&format!("lstm.{dn}.u_{}", GATES[g]), &dir.u[g]);
            }
            for g in 0..4 {
                f(&format!("lstm.{dn}.b_{}", GATES[g]), &dir.b[g]);
            }
        }
        f("ffnn.w1", &self.ffnn.w1);
        f("ffnn.b1", &self.ffnn.b1);
        f("ffnn.w2", &self.ffnn.w2);
        f("ffnn.b2", &self.ffnn.b2);
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.for_each_param(|n, _| names.push(n.to_string()));
        names
    }

    /// Mutable tensors in [`Model::for_each_param`] order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        out.push(&mut self.encoder.projection);
        out.push(&mut self.encoder.bias);
        out.push(&mut self.dist_biaffine.w);
        for kind in self.egcn.iter_mut() {
            out.push(&mut kind.label);
            for layer in kind.layers.iter_mut() {
                out.push(&mut layer.weight);
                out.push(&mut layer.bias);
                out.push(&mut layer.agg.w);
            }
        }
        for dir in [&mut self.lstm.fwd, &mut self.lstm.bwd] {
            for t in dir.w.iter_mut() {
                out.push(t);
            }
            for t in dir.u.iter_mut() {
                out.push(t);
            }
            for t in dir.b.iter_mut() {
                out.push(t);
            }
        }
        out.push(&mut self.ffnn.w1);
        out.push(&mut self.ffnn.b1);
        out.push(&mut self.ffnn.w2);
        out.push(&mut self.ffnn.b2);
        out
    }

    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            encoder_w: tape.leaf(self.encoder.projection.clone()),
            encoder_b: tape.leaf(self.encoder.bias.clone()),
            dist_w: self.dist_biaffine.bind(tape),
            egcn: std::array::from_fn(|k| self.egcn[k].bind(tape)),
            lstm: self.lstm.bind(tape),
            ffnn: self.ffnn.bind(tape),
        }
    }

    /// One SGD step: `w ← w − lr·∇w` for every parameter that received a
    /// gradient.
    pub fn apply_sgd(&mut self, vars: &ModelVars, grads: &Gradients, lr: f64) {
        let ids = vars.ids();
        let tensors = self.tensors_mut();
        debug_assert_eq!(ids.len(), tensors.len());
        for (tensor, id) in tensors.into_iter().zip(ids) {
            if let Some(g) = grads.get(id) {
                for (w, gv) in tensor.data.iter_mut().zip(&g.data) {
                    *w -= lr * gv;
                }
            }
        }
    }
}

/// Tape bindings of every parameter, mirroring [`Model::for_each_param`].
pub struct ModelVars {
    pub encoder_w: VarId,
    pub encoder_b: VarId,
    pub dist_w: VarId,
    pub egcn: [EgcnKindVars; 4],
    pub lstm: LstmVars,
    pub ffnn: FfnnVars,
}

impl ModelVars {
    /// Parameter node ids in [`Model::for_each_param`] order.
    pub fn ids(&self) -> Vec<VarId> {
        let mut out = vec![self.encoder_w, self.encoder_b, self.dist_w];
        for kind in &self.egcn {
            out.push(kind.label);
            for layer in &kind.layers {
                out.push(layer.weight);
                out.push(layer.bias);
                out.push(layer.agg);
            }
        }
        for dir in [&self.lstm.fwd, &self.lstm.bwd] {
            for g in 0..4 {
                out.push(dir.w[g]);
            }
            for g in 0..4 {
                out.push(dir.u[g]);
            }
            for g in 0..4 {
                out.push(dir.b[g]);
            }
        }
        out.push(self.ffnn.w1);
        out.push(self.ffnn.b1);
        out.push(self.ffnn.w2);
        out.push(self.ffnn.b2);
        out
    }
}

/// Per-step training noise: inverted-dropout masks for the encoder output,
/// the fused graph features and the scorer hidden layer, plus binary
/// DropConnect masks on the recurrent weights. Resampled every step; absent
/// at inference.
pub struct StepNoise {
    pub v_masks: Vec<Tensor>,
    pub fused_masks: Vec<Tensor>,
    pub ffnn_masks: Vec<Tensor>,
    pub dropconnect: DropConnectMasks,
}

impl StepNoise {
    pub fn sample(config: &ModelConfig, nodes: usize, rng: &mut impl rand::Rng) -> Self {
        let p = config.dropout;
        let keep = 1.0 / (1.0 - p);
        let mut mask = |len: usize| {
            Tensor::vector(
                (0..len)
                    .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
                    .collect(),
            )
        };
        StepNoise {
            v_masks: (0..nodes).map(|_| mask(config.hidden)).collect(),
            fused_masks: (0..nodes).map(|_| mask(config.hidden)).collect(),
            ffnn_masks: (0..nodes).map(|_| mask(config.ffnn_hidden)).collect(),
            dropconnect: DropConnectMasks::sample(config.hidden, p, rng),
        }
    }
}

/// Scores of one current utterance over its candidate window; candidate `j`
/// lives at `scores[j - start]`.
pub struct WindowScores {
    pub current: usize,
    pub start: usize,
    pub scores: Vec<VarId>,
}

impl WindowScores {
    pub fn values(&self, tape: &Tape) -> Vec<(usize, f64)> {
        self.scores
            .iter()
            .enumerate()
            .map(|(k, &id)| (self.start + k, tape.item(id)))
            .collect()
    }

    pub fn score_map(&self) -> std::collections::BTreeMap<usize, VarId> {
        self.scores
            .iter()
            .enumerate()
            .map(|(k, &id)| (self.start + k, id))
            .collect()
    }
}

/// Context clip of current utterance `c`: the ω utterances on each side,
/// clipped to the dialogue. Graph and sequence features run over this node
/// set; parent candidates are only its past half, `(c-ω, c]`.
pub fn node_window(c: usize, n: usize, omega: usize) -> std::ops::RangeInclusive<usize> {
    c.saturating_sub(omega)..=(c + omega).min(n.saturating_sub(1))
}

/// Runs the full stack for current utterance `c` and scores every candidate
/// in `(c-ω, c]`.
///
/// `replies` feeds the partial-reply graph over the clip — including links
/// of later utterances once they are resolved; any pair whose child is `c`
/// itself is dropped here so the label can never leak into the features.
pub fn score_current(
    tape: &mut Tape,
    model: &Model,
    vars: &ModelVars,
    dialogue: &Dialogue,
    c: usize,
    replies: &ReplySet,
    noise: Option<&StepNoise>,
) -> Result<WindowScores, NnError> {
    let cfg = &model.config;
    let clip = node_window(c, dialogue.len(), cfg.window);
    let clip_start = *clip.start();
    let m = clip.end() - clip_start + 1;
    let cand_start = *candidate_window(c, cfg.window).start();

    let mut v = Vec::with_capacity(m);
    for j in clip.clone() {
        let feats = featurize_pair(dialogue.utterance(j), dialogue.utterance(c), dialogue, cfg.buckets);
        let sparse = feats.to_sparse(cfg.buckets);
        if sparse.dim != model.encoder.feature_dim() {
            return Err(NnError::DimensionMismatch(format!(
                "feature dim {} vs encoder width {}",
                sparse.dim,
                model.encoder.feature_dim()
            )));
        }
        let mut vj = tape.affine_sparse(vars.encoder_w, vars.encoder_b, sparse);
        if let Some(noise) = noise {
            vj = tape.mul_mask(vj, &noise.v_masks[j - clip_start]);
        }
        v.push(vj);
    }

    let mut branch_outputs: Vec<Vec<VarId>> = Vec::new();
    for kind in cfg.graphs.enabled() {
        let rows: Vec<VarId> = match kind {
            0 => build_speaker_graph(dialogue, clip.clone()).into_rows(tape),
            1 => build_mention_graph(dialogue, clip.clone()).into_rows(tape),
            2 => distance_rows(tape, vars.dist_w, &v),
            _ => {
                let mut filtered = ReplySet::new();
                for (child, parent) in replies.iter() {
                    if child != c {
                        filtered.insert(child, parent);
                    }
                }
                build_reply_graph(&filtered, clip.clone()).into_rows(tape)
            }
        };
        let mut feats = v.clone();
        for layer in &vars.egcn[kind].layers {
            feats = egcn_layer(tape, layer, vars.egcn[kind].label, &feats, &rows)?;
        }
        branch_outputs.push(feats);
    }

    let mut fused: Vec<VarId> = if branch_outputs.is_empty() {
        v.clone()
    } else {
        (0..m)
            .map(|k| {
                let parts: Vec<VarId> = branch_outputs.iter().map(|b| b[k]).collect();
                fuse_graphs(tape, &parts)
            })
            .collect()
    };
    if let Some(noise) = noise {
        for (k, f) in fused.iter_mut().enumerate() {
            *f = tape.mul_mask(*f, &noise.fused_masks[k]);
        }
    }

    let hidden = bilstm(tape, &vars.lstm, noise.map(|n| &n.dropconnect), &fused);

    let mut scores = Vec::with_capacity(c - cand_start + 1);
    for j in cand_start..=c {
        let k = j - clip_start;
        let hhat = residual_concat(tape, hidden[k], v[k]);
        let s = ffnn_score(
            tape,
            &vars.ffnn,
            cfg.activation,
            hhat,
            noise.map(|n| &n.ffnn_masks[k]),
        );
        scores.push(s);
    }
    tape.ensure_finite()?;
    Ok(WindowScores {
        current: c,
        start: cand_start,
        scores,
    })
}

trait IntoRows {
    fn into_rows(self, tape: &mut Tape) -> Vec<VarId>;
}

impl IntoRows for crate::graphs::Adjacency {
    fn into_rows(self, tape: &mut Tape) -> Vec<VarId> {
        (0..self.size())
            .map(|i| tape.leaf(Tensor::vector(self.row(i).to_vec())))
            .collect()
    }
}
