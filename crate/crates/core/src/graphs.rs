//! The four discourse structures over a candidate window.
//!
//! Two static graphs (same-speaker, speaker-mention), one content-and-
//! distance weighted graph, and the partial-reply graph that grows as links
//! are established. All four are bidirectional with unit self-loops; the
//! distance graph carries continuous row-normalized weights, the rest are
//! 0/1.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::RangeInclusive;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dialogue, ReplyForest, Utterance};
use crate::nn::{biaffine_value, BiaffineParams};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Which discourse structure an adjacency encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GraphKind {
    /// Same-speaker links.
    S,
    /// Speaker-mention links.
    M,
    /// Distance-decayed content weights.
    D,
    /// Established reply links.
    R,
}

/// Dense window-local adjacency. Node `k` corresponds to utterance
/// `window_start + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency {
    pub kind: GraphKind,
    size: usize,
    weights: Vec<f64>,
}

impl Adjacency {
    fn identity(kind: GraphKind, size: usize) -> Self {
        let mut weights = vec![0.0; size * size];
        for i in 0..size {
            weights[i * size + i] = 1.0;
        }
        Adjacency {
            kind,
            size,
            weights,
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.size + j]
    }

    fn set(&mut self, i: usize, j: usize, w: f64) {
        self.weights[i * self.size + j] = w;
    }

    /// Row of edge weights for node `i` (length = size, self-loop included).
    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.size..(i + 1) * self.size]
    }

    /// Debug JSON form: `{kind, size, triplets: [(i, j, w), ...]}` with only
    /// the non-zero entries.
    pub fn to_debug_json(&self) -> serde_json::Value {
        let triplets: Vec<serde_json::Value> = (0..self.size)
            .flat_map(|i| {
                (0..self.size).filter_map(move |j| {
                    let w = self.weight(i, j);
                    (w != 0.0).then(|| serde_json::json!([i, j, w]))
                })
            })
            .collect();
        serde_json::json!({
            "kind": self.kind,
            "size": self.size,
            "triplets": triplets,
        })
    }
}

fn window_vec(window: &RangeInclusive<usize>) -> Vec<usize> {
    (*window.start()..=*window.end()).collect()
}

/// Same-speaker structure: `weight(i, j) = 1` iff the two window utterances
/// share a speaker (or `i == j`).
pub fn build_speaker_graph(dialogue: &Dialogue, window: RangeInclusive<usize>) -> Adjacency {
    let idx = window_vec(&window);
    let m = idx.len();
    let mut adj = Adjacency::identity(GraphKind::S, m);
    for a in 0..m {
        for b in (a + 1)..m {
            if dialogue.utterance(idx[a]).speaker == dialogue.utterance(idx[b]).speaker {
                adj.set(a, b, 1.0);
                adj.set(b, a, 1.0);
            }
        }
    }
    adj
}

/// Speaker names mentioned by the utterance text, matched as whole tokens,
/// case-insensitively, with leading/trailing punctuation stripped (so
/// `"nick:"` matches `"nick"`). The utterance's own speaker is excluded.
pub fn detect_mentions<'a>(
    utterance: &Utterance,
    speakers: impl IntoIterator<Item = &'a str>,
) -> BTreeSet<String> {
    let by_lower: BTreeMap<String, &str> = speakers
        .into_iter()
        .filter(|s| !s.eq_ignore_ascii_case(&utterance.speaker))
        .map(|s| (s.to_lowercase(), s))
        .collect();
    let mut found = BTreeSet::new();
    for token in utterance.text.split_whitespace() {
        let lower = token.to_lowercase();
        if let Some(name) = by_lower.get(&lower) {
            found.insert((*name).to_string());
            continue;
        }
        let trimmed = lower.trim_matches(|c: char| c.is_ascii_punctuation());
        if let Some(name) = by_lower.get(trimmed) {
            found.insert((*name).to_string());
        }
    }
    found
}

/// Speaker-mention structure: `weight(i, j) = 1` iff either utterance
/// mentions the other's speaker (or `i == j`).
pub fn build_mention_graph(dialogue: &Dialogue, window: RangeInclusive<usize>) -> Adjacency {
    let idx = window_vec(&window);
    let m = idx.len();
    let speakers: Vec<&str> = dialogue.speakers();
    let mentions: Vec<BTreeSet<String>> = idx
        .iter()
        .map(|&i| {
            detect_mentions(dialogue.utterance(i), speakers.iter().copied())
                .into_iter()
                .map(|s| s.to_lowercase())
                .collect()
        })
        .collect();
    let mut adj = Adjacency::identity(GraphKind::M, m);
    for a in 0..m {
        for b in (a + 1)..m {
            let sa = dialogue.utterance(idx[a]).speaker.to_lowercase();
            let sb = dialogue.utterance(idx[b]).speaker.to_lowercase();
            if mentions[a].contains(&sb) || mentions[b].contains(&sa) {
                adj.set(a, b, 1.0);
                adj.set(b, a, 1.0);
            }
        }
    }
    adj
}

/// Distance prior `exp(-π d²)`: a Gaussian with μ = 0, σ = 1/√(2π),
/// evaluated at integer distance `d`.
pub fn gaussian_prior(d: usize) -> f64 {
    let d = d as f64;
    (-std::f64::consts::PI * d * d).exp()
}

/// Distance-weighted structure: off-diagonal rows are softmaxes of
/// `-(i-j)²/(2√(2π)) + Biaf(h_i, h_j)/√|i-j|`; the diagonal is a fixed
/// self-loop of 1.
pub fn distance_weights(
    embeddings: &[Vec<f64>],
    biaffine: &BiaffineParams,
) -> Result<Adjacency, GraphError> {
    let m = embeddings.len();
    let d = biaffine.input_dim();
    for (i, e) in embeddings.iter().enumerate() {
        if e.len() != d {
            return Err(GraphError::DimensionMismatch(format!(
                "embedding {i} has length {}, biaffine expects {d}",
                e.len()
            )));
        }
    }
    let mut adj = Adjacency::identity(GraphKind::D, m);
    if m == 1 {
        return Ok(adj);
    }
    let denom = 2.0 * (2.0 * std::f64::consts::PI).sqrt();
    for i in 0..m {
        let mut logits = Vec::with_capacity(m - 1);
        for j in 0..m {
            if j == i {
                continue;
            }
            let dist = (i as f64 - j as f64).abs();
            let biaf = biaffine_value(&biaffine.w, &embeddings[i], &embeddings[j]);
            logits.push((j, -(dist * dist) / denom + biaf / dist.sqrt()));
        }
        let max = logits.iter().map(|&(_, l)| l).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|&(_, l)| (l - max).exp()).sum();
        for (j, l) in logits {
            adj.set(i, j, (l - max).exp() / z);
        }
    }
    Ok(adj)
}

/// Established reply links: child→parent pairs, at most one parent per
/// child. Used both for gold annotations (optionally corrupted) during
/// training and for the growing set of decoded links at inference.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ReplySet {
    pairs: BTreeMap<usize, usize>,
}

impl ReplySet {
    pub fn new() -> Self {
        ReplySet::default()
    }

    /// All pairs of a gold forest, self-links included.
    pub fn from_forest(forest: &ReplyForest) -> Self {
        ReplySet {
            pairs: (0..forest.len()).map(|c| (c, forest.parent(c))).collect(),
        }
    }

    pub fn insert(&mut self, child: usize, parent: usize) {
        assert!(parent <= child, "reply parent after child");
        self.pairs.insert(child, parent);
    }

    pub fn remove_child(&mut self, child: usize) {
        self.pairs.remove(&child);
    }

    pub fn parent_of(&self, child: usize) -> Option<usize> {
        self.pairs.get(&child).copied()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pairs.iter().map(|(&c, &p)| (c, p))
    }
}

/// Partial-reply structure: unit weight on both directions of every pair
/// whose endpoints are both inside the window, plus self-loops.
pub fn build_reply_graph(pairs: &ReplySet, window: RangeInclusive<usize>) -> Adjacency {
    let (lo, hi) = (*window.start(), *window.end());
    let m = hi - lo + 1;
    let mut adj = Adjacency::identity(GraphKind::R, m);
    for (child, parent) in pairs.iter() {
        if child >= lo && child <= hi && parent >= lo {
            adj.set(child - lo, parent - lo, 1.0);
            adj.set(parent - lo, child - lo, 1.0);
        }
    }
    adj
}

/// Teacher-forcing noise: each pair independently, with probability `rate`,
/// has its parent replaced by a uniformly chosen different in-window
/// antecedent (any `j` with `child-omega < j ≤ child`). Pairs with no
/// alternative are kept as-is.
pub fn corrupt_replies(
    gold: &ReplySet,
    omega: usize,
    rate: f64,
    rng: &mut impl Rng,
) -> ReplySet {
    assert!((0.0..=1.0).contains(&rate), "rate must be a probability");
    let mut out = ReplySet::new();
    for (child, parent) in gold.iter() {
        let corrupted = if rate > 0.0 && rng.gen::<f64>() < rate {
            let lo = (child + 1).saturating_sub(omega.max(1));
            let alternatives: Vec<usize> = (lo..=child).filter(|&j| j != parent).collect();
            if alternatives.is_empty() {
                parent
            } else {
                alternatives[rng.gen_range(0..alternatives.len())]
            }
        } else {
            parent
        };
        out.insert(child, corrupted);
    }
    out
}
