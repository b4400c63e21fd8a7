//! Disentangling multi-party chat transcripts into reply-to forests.
//!
//! A dialogue is a chronological list of utterances; the parser recovers, for
//! every utterance, the earlier utterance it replies to (or a self-link when
//! it opens a new session). Connected components of the reply forest are the
//! sessions used by the clustering metrics.
//!
//! The pipeline:
//!
//! - [`corpus`]: ingestion (IRC logs, canonical JSONL), reply forests,
//!   session derivation, and the four-level candidate partition used by the
//!   ranking loss.
//! - [`graphs`]: the four discourse structures over a candidate window —
//!   same-speaker, speaker-mention, distance-weighted, and partial-reply —
//!   plus teacher-forcing corruption of the reply structure.
//! - [`encoder`]: deterministic featurization of (candidate, current)
//!   utterance pairs and the trainable projection to pair vectors.
//! - [`nn`]: a small tape-based reverse-mode autodiff engine and the scoring
//!   stack built on it (biaffine, edge-aware graph convolutions, DropConnect
//!   BiLSTM, feed-forward scorer).
//! - [`loss`]: the level-ranked losses over grouped candidate softmaxes.
//! - [`model`]: parameter containers, checkpointing, and the assembled
//!   window scorer.
//! - [`decode`]: easy-first and sequential decoding with trace capture.
//! - [`metrics`]: the disentanglement evaluation suite.
//! - [`synth`]: synthetic entangled-dialogue generation.
//! - [`train`]: SGD training loop and the ablation harness.
//! - [`config`]: flat key-value run configuration.

pub mod config;
pub mod corpus;
pub mod decode;
pub mod encoder;
pub mod graphs;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod synth;
pub mod train;
