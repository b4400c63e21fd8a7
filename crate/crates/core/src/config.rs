//! Flat key-value run configuration.
//!
//! A run is fully described by a text file of `key = value` lines plus
//! command-line overrides of the same keys; the resolved configuration is
//! embedded in every output artifact.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loss::LossWeights;
use crate::model::{GraphSet, ModelConfig};
use crate::nn::Activation;
use crate::synth::SynthConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: {reason}")]
    Line { line: usize, reason: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid value for {key}: {value:?} ({reason})")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderKind {
    #[default]
    EasyFirst,
    Sequential,
}

impl DecoderKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "easy-first" | "easy_first" | "easyfirst" => Some(DecoderKind::EasyFirst),
            "sequential" | "seq" => Some(DecoderKind::Sequential),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DecoderKind::EasyFirst => "easy-first",
            DecoderKind::Sequential => "sequential",
        }
    }
}

/// Optimization hyperparameters and loss-ablation switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epoch_size: usize,
    pub teacher_forcing_rate: f64,
    pub weights: LossWeights,
    pub disable_l2: bool,
    pub disable_l3: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            epoch_size: 4,
            teacher_forcing_rate: 0.15,
            weights: LossWeights::default(),
            disable_l2: false,
            disable_l3: false,
        }
    }
}

/// Everything a run needs: model dimensions, training hyperparameters,
/// generator settings, decoder choice, and the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub synth_test_dialogues: usize,
    pub decoder: DecoderKind,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig {
                dialogues: 200,
                ..SynthConfig::default()
            },
            synth_test_dialogues: 40,
            decoder: DecoderKind::EasyFirst,
            seed: 42,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.trim().parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: format!("expected a {}", std::any::type_name::<T>()),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(ConfigError::BadValue {
            key: key.to_string(),
            value: other.to_string(),
            reason: "expected true/false".to_string(),
        }),
    }
}

impl RunConfig {
    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "hidden_size" => self.model.hidden = parse_num(key, v)?,
            "label_embedding_dim" => self.model.label_dim = parse_num(key, v)?,
            "layer_num" => self.model.egcn_layers = parse_num(key, v)?,
            "ffnn_hidden_size" => self.model.ffnn_hidden = parse_num(key, v)?,
            "hash_buckets" => self.model.buckets = parse_num(key, v)?,
            "window" => self.model.window = parse_num::<usize>(key, v)?.max(1),
            "dropout" => self.model.dropout = parse_num(key, v)?,
            "activation" => {
                self.model.activation = match v {
                    "relu" => Activation::Relu,
                    other => {
                        return Err(ConfigError::BadValue {
                            key: key.to_string(),
                            value: other.to_string(),
                            reason: "supported: relu".to_string(),
                        })
                    }
                }
            }
            "disable_graph_s" => self.model.graphs.speaker = !parse_bool(key, v)?,
            "disable_graph_m" => self.model.graphs.mention = !parse_bool(key, v)?,
            "disable_graph_d" => self.model.graphs.distance = !parse_bool(key, v)?,
            "disable_graph_r" => self.model.graphs.reply = !parse_bool(key, v)?,
            "disable_all_graphs" => {
                if parse_bool(key, v)? {
                    self.model.graphs = GraphSet::none();
                } else {
                    self.model.graphs = GraphSet::default();
                }
            }
            "learning_rate" => self.train.learning_rate = parse_num(key, v)?,
            "epoch_size" => self.train.epoch_size = parse_num(key, v)?,
            "teacher_forcing_rate" => self.train.teacher_forcing_rate = parse_num(key, v)?,
            "alpha1" => self.train.weights.alpha1 = parse_num(key, v)?,
            "alpha2" => self.train.weights.alpha2 = parse_num(key, v)?,
            "alpha3" => self.train.weights.alpha3 = parse_num(key, v)?,
            "disable_l2" => self.train.disable_l2 = parse_bool(key, v)?,
            "disable_l3" => self.train.disable_l3 = parse_bool(key, v)?,
            "decoder" => {
                self.decoder = DecoderKind::parse(v).ok_or_else(|| ConfigError::BadValue {
                    key: key.to_string(),
                    value: v.to_string(),
                    reason: "expected easy-first or sequential".to_string(),
                })?
            }
            "seed" => self.seed = parse_num(key, v)?,
            "synth_dialogues" => self.synth.dialogues = parse_num(key, v)?,
            "synth_test_dialogues" => self.synth_test_dialogues = parse_num(key, v)?,
            "synth_sessions_min" => self.synth.sessions.min = parse_num(key, v)?,
            "synth_sessions_max" => self.synth.sessions.max = parse_num(key, v)?,
            "synth_utterances_min" => self.synth.utterances_per_session.min = parse_num(key, v)?,
            "synth_utterances_max" => self.synth.utterances_per_session.max = parse_num(key, v)?,
            "synth_speaker_pool" => self.synth.speaker_pool = parse_num(key, v)?,
            "synth_speakers_min" => self.synth.speakers_per_session.min = parse_num(key, v)?,
            "synth_speakers_max" => self.synth.speakers_per_session.max = parse_num(key, v)?,
            "synth_mention_prob" => self.synth.mention_prob = parse_num(key, v)?,
            "synth_reply_skip_prob" => self.synth.reply_skip_prob = parse_num(key, v)?,
            "synth_topic_words" => self.synth.topic_words = parse_num(key, v)?,
            "synth_words_min" => self.synth.words_per_utterance.min = parse_num(key, v)?,
            "synth_words_max" => self.synth.words_per_utterance.max = parse_num(key, v)?,
            "synth_topic_strength" => self.synth.topic_strength = parse_num(key, v)?,
            "synth_common_words" => self.synth.common_words = parse_num(key, v)?,
            "synth_id_prefix" => self.synth.id_prefix = v.to_string(),
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Parses a flat `key = value` text (`#` starts a comment).
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Line {
                    line: lineno + 1,
                    reason: format!("expected key = value, got {line:?}"),
                });
            };
            self.set(key.trim(), value).map_err(|e| match e {
                ConfigError::Line { .. } => e,
                other => ConfigError::Line {
                    line: lineno + 1,
                    reason: other.to_string(),
                },
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    /// Keeps the generator seed in lockstep with the run seed.
    pub fn synth_for_split(&self, test: bool) -> SynthConfig {
        let mut s = self.synth.clone();
        if test {
            s.dialogues = self.synth_test_dialogues;
            s.seed = self.seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
            s.id_prefix = format!("{}-test", self.synth.id_prefix);
        } else {
            s.seed = self.seed;
            s.id_prefix = format!("{}-train", self.synth.id_prefix);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flat_text_with_comments() {
        let mut cfg = RunConfig::default();
        cfg.apply_text(
            "# model\nhidden_size = 16\nwindow = 12\nalpha2 = 0.2  # inline comment\n\ndecoder = sequential\n",
        )
        .unwrap();
        assert_eq!(cfg.model.hidden, 16);
        assert_eq!(cfg.model.window, 12);
        assert_eq!(cfg.train.weights.alpha2, 0.2);
        assert_eq!(cfg.decoder, DecoderKind::Sequential);
    }

    #[test]
    fn rejects_unknown_keys_with_line_numbers() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_text("hidden_size = 8\nnot_a_key = 3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
        assert!(msg.contains("not_a_key"), "{msg}");
    }

    #[test]
    fn rejects_malformed_lines() {
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_text("just words\n").is_err());
        assert!(cfg.apply_text("dropout = sticky\n").is_err());
    }

    #[test]
    fn graph_ablation_switches() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("disable_graph_m = true\n").unwrap();
        assert!(!cfg.model.graphs.mention);
        assert!(cfg.model.graphs.speaker);
        cfg.apply_text("disable_all_graphs = true\n").unwrap();
        assert!(!cfg.model.graphs.any());
    }

    #[test]
    fn split_seeds_differ() {
        let cfg = RunConfig::default();
        let train = cfg.synth_for_split(false);
        let test = cfg.synth_for_split(true);
        assert_ne!(train.seed, test.seed);
        assert_eq!(test.dialogues, cfg.synth_test_dialogues);
    }
}
