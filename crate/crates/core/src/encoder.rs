//! Deterministic pair featurization and the trainable projection that turns
//! a (candidate, current) utterance pair into its vector v_ci.
//!
//! Features are fixed functions of the pair: hashed token counts of both
//! texts, lexical overlap, speaker identity and mention flags, and a
//! distance bucket. A single affine projection maps the sparse feature
//! vector to the model dimension; that projection is the only trainable part
//! of the encoder.

use serde::{Deserialize, Serialize};

use crate::corpus::{Dialogue, Utterance};
use crate::graphs::detect_mentions;
use crate::nn::{NnError, SparseVec, Tensor};

/// Embedded in checkpoints; bump when the feature layout changes so stale
/// checkpoints are rejected instead of silently misread.
pub const FEATURE_SCHEMA_VERSION: &str = "pair-features-v1";

/// Token cap per utterance, mirroring the maximum pair length.
pub const MAX_TOKENS: usize = 128;

/// Distance buckets: 1, 2, 3-5, 6-10, 11-20, 21+, self.
pub const DISTANCE_BUCKETS: usize = 7;

/// Lowercased alphanumeric runs, truncated to [`MAX_TOKENS`]. Punctuation
/// acts as a token boundary and is dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else if !cur.is_empty() {
            tokens.push(std::mem::take(&mut cur));
            if tokens.len() == MAX_TOKENS {
                return tokens;
            }
        }
    }
    if !cur.is_empty() && tokens.len() < MAX_TOKENS {
        tokens.push(cur);
    }
    tokens
}

/// FNV-1a over the token bytes, reduced modulo the bucket count.
pub fn hash_token(token: &str, buckets: usize) -> usize {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in token.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    (h % buckets as u64) as usize
}

fn hashed_counts(tokens: &[String], buckets: usize) -> Vec<(usize, f64)> {
    let mut counts = std::collections::BTreeMap::new();
    for t in tokens {
        *counts.entry(hash_token(t, buckets)).or_insert(0.0) += 1.0;
    }
    counts.into_iter().collect()
}

fn distance_bucket(distance: usize) -> usize {
    match distance {
        0 => 6, // self
        1 => 0,
        2 => 1,
        3..=5 => 2,
        6..=10 => 3,
        11..=20 => 4,
        _ => 5,
    }
}

/// Deterministic features of a (candidate, current) pair.
///
/// Parent candidates always precede the current utterance (distance ≥ 0);
/// context nodes after it carry a negative raw distance and bucket on the
/// absolute offset.
#[derive(Debug, Clone, PartialEq)]
pub struct PairFeatures {
    pub candidate_counts: Vec<(usize, f64)>,
    pub current_counts: Vec<(usize, f64)>,
    /// Distinct tokens occurring in both texts.
    pub shared_tokens: usize,
    pub same_speaker: bool,
    /// Candidate text names the current utterance's speaker.
    pub candidate_mentions_current: bool,
    /// Current text names the candidate's speaker.
    pub current_mentions_candidate: bool,
    pub distance_bucket: usize,
    /// `current.index - candidate.index`; negative for context nodes that
    /// follow the current utterance.
    pub distance: i64,
}

impl PairFeatures {
    pub fn dense_dim(buckets: usize) -> usize {
        2 * buckets + 5 + DISTANCE_BUCKETS
    }

    /// Sparse layout: candidate counts, current counts, shared-token count,
    /// same-speaker flag, the two mention flags, the distance one-hot, and
    /// the raw distance.
    pub fn to_sparse(&self, buckets: usize) -> SparseVec {
        let mut entries = Vec::with_capacity(
            self.candidate_counts.len() + self.current_counts.len() + 6,
        );
        for &(i, c) in &self.candidate_counts {
            entries.push((i, c));
        }
        for &(i, c) in &self.current_counts {
            entries.push((buckets + i, c));
        }
        let base = 2 * buckets;
        if self.shared_tokens > 0 {
            entries.push((base, self.shared_tokens as f64));
        }
        if self.same_speaker {
            entries.push((base + 1, 1.0));
        }
        if self.candidate_mentions_current {
            entries.push((base + 2, 1.0));
        }
        if self.current_mentions_candidate {
            entries.push((base + 3, 1.0));
        }
        entries.push((base + 4 + self.distance_bucket, 1.0));
        if self.distance != 0 {
            entries.push((base + 4 + DISTANCE_BUCKETS, self.distance as f64));
        }
        SparseVec::new(Self::dense_dim(buckets), entries)
    }
}

/// Featurizes `u_i` against current `u_c`; both must belong to `dialogue`,
/// whose speaker roster drives mention detection. `i ≤ c` for parent
/// candidates; later indices are accepted for pure context nodes.
pub fn featurize_pair(
    candidate: &Utterance,
    current: &Utterance,
    dialogue: &Dialogue,
    buckets: usize,
) -> PairFeatures {
    let cand_tokens = tokenize(&candidate.text);
    let curr_tokens = tokenize(&current.text);
    let cand_set: std::collections::BTreeSet<&str> =
        cand_tokens.iter().map(|s| s.as_str()).collect();
    let curr_set: std::collections::BTreeSet<&str> =
        curr_tokens.iter().map(|s| s.as_str()).collect();
    let shared = cand_set.intersection(&curr_set).count();

    let speakers: Vec<&str> = dialogue.speakers();
    let lower = |s: &str| s.to_lowercase();
    let cand_mentions: std::collections::BTreeSet<String> =
        detect_mentions(candidate, speakers.iter().copied())
            .into_iter()
            .map(|s| lower(&s))
            .collect();
    let curr_mentions: std::collections::BTreeSet<String> =
        detect_mentions(current, speakers.iter().copied())
            .into_iter()
            .map(|s| lower(&s))
            .collect();

    let distance = current.index as i64 - candidate.index as i64;
    PairFeatures {
        candidate_counts: hashed_counts(&cand_tokens, buckets),
        current_counts: hashed_counts(&curr_tokens, buckets),
        shared_tokens: shared,
        same_speaker: candidate.speaker == current.speaker,
        candidate_mentions_current: cand_mentions.contains(&lower(&current.speaker)),
        current_mentions_candidate: curr_mentions.contains(&lower(&candidate.speaker)),
        distance_bucket: distance_bucket(distance.unsigned_abs() as usize),
        distance,
    }
}

/// Affine projection from the sparse feature space to the model dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub buckets: usize,
    pub projection: Tensor,
    pub bias: Tensor,
}

impl EncoderParams {
    pub fn init(dim: usize, buckets: usize, rng: &mut impl rand::Rng) -> Self {
        let feat = PairFeatures::dense_dim(buckets);
        let limit = (6.0 / (dim + feat) as f64).sqrt();
        let data = (0..dim * feat)
            .map(|_| rng.gen_range(-limit..=limit))
            .collect();
        EncoderParams {
            buckets,
            projection: Tensor::matrix(dim, feat, data),
            bias: Tensor::zeros(dim, 1),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.projection.rows
    }

    pub fn feature_dim(&self) -> usize {
        self.projection.cols
    }
}

/// Plain-value pair encoding: `projection · features + bias`.
pub fn encode_pair(features: &PairFeatures, params: &EncoderParams) -> Result<Vec<f64>, NnError> {
    let sparse = features.to_sparse(params.buckets);
    if sparse.dim != params.feature_dim() {
        return Err(NnError::DimensionMismatch(format!(
            "feature dim {} vs projection width {}",
            sparse.dim,
            params.feature_dim()
        )));
    }
    let w = &params.projection;
    let mut out = params.bias.data.clone();
    for &(i, x) in &sparse.entries {
        for (r, o) in out.iter_mut().enumerate() {
            *o += w.get(r, i) * x;
        }
    }
    Ok(out)
}
