//! Synthetic entangled-dialogue generation.
//!
//! Each dialogue interleaves a few independently grown sessions by a random
//! order-preserving merge. Within a session, every non-root utterance
//! replies to an earlier utterance of the same session (mostly the previous
//! one, with geometric skips), speakers rotate among the session's
//! participants, topic words are drawn from a per-session pool so lexical
//! overlap correlates with session membership, and with some probability an
//! utterance opens by naming the parent's speaker.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dialogue, ReplyForest, Utterance};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Invalid(String),
}

/// Inclusive integer range used by the generator's size knobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub min: usize,
    pub max: usize,
}

impl Span {
    pub fn new(min: usize, max: usize) -> Self {
        Span { min, max }
    }

    fn sample(&self, rng: &mut impl Rng) -> usize {
        rng.gen_range(self.min..=self.max)
    }

    fn valid(&self) -> bool {
        self.min <= self.max && self.min >= 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub dialogues: usize,
    /// Sessions interleaved per dialogue.
    pub sessions: Span,
    pub utterances_per_session: Span,
    pub speaker_pool: usize,
    /// Participants drawn per session (capped by the pool).
    pub speakers_per_session: Span,
    /// Probability that a reply opens by naming the parent's speaker.
    pub mention_prob: f64,
    /// Geometric tail: chance of skipping one step further up the session
    /// when picking a parent.
    pub reply_skip_prob: f64,
    /// Distinct topic words in each session's pool.
    pub topic_words: usize,
    pub words_per_utterance: Span,
    /// Probability that a word comes from the session pool rather than the
    /// shared noise vocabulary; the session/lexicon correlation dial.
    pub topic_strength: f64,
    pub common_words: usize,
    pub seed: u64,
    pub id_prefix: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dialogues: 20,
            sessions: Span::new(2, 4),
            utterances_per_session: Span::new(4, 8),
            speaker_pool: 6,
            speakers_per_session: Span::new(2, 3),
            mention_prob: 0.35,
            reply_skip_prob: 0.3,
            topic_words: 6,
            words_per_utterance: Span::new(3, 7),
            topic_strength: 0.55,
            common_words: 40,
            seed: 0,
            id_prefix: "synth".to_string(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        for (name, span) in [
            ("sessions", self.sessions),
            ("utterances_per_session", self.utterances_per_session),
            ("speakers_per_session", self.speakers_per_session),
            ("words_per_utterance", self.words_per_utterance),
        ] {
            if !span.valid() {
                return Err(SynthError::Invalid(format!(
                    "range {name} = {span:?} is empty or starts at zero"
                )));
            }
        }
        for (name, p) in [
            ("mention_prob", self.mention_prob),
            ("reply_skip_prob", self.reply_skip_prob),
            ("topic_strength", self.topic_strength),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SynthError::Invalid(format!("{name} = {p} is not a probability")));
            }
        }
        if self.speaker_pool < 2 {
            return Err(SynthError::Invalid(
                "speaker_pool must hold at least two speakers".to_string(),
            ));
        }
        if self.topic_words == 0 || self.common_words == 0 {
            return Err(SynthError::Invalid("empty vocabulary pool".to_string()));
        }
        Ok(())
    }
}

struct SessionDraft {
    speakers: Vec<usize>,
    texts: Vec<String>,
    /// Session-local parent offsets; `parent[0] == 0`.
    parents: Vec<usize>,
}

fn grow_session(cfg: &SynthConfig, topic_base: u64, rng: &mut ChaCha8Rng) -> SessionDraft {
    let size = cfg.utterances_per_session.sample(rng);
    let k = cfg
        .speakers_per_session
        .sample(rng)
        .min(cfg.speaker_pool)
        .max(2.min(cfg.speaker_pool));
    let mut pool: Vec<usize> = (0..cfg.speaker_pool).collect();
    pool.shuffle(rng);
    let participants: Vec<usize> = pool.into_iter().take(k).collect();
    let topics: Vec<String> = (0..cfg.topic_words)
        .map(|w| format!("w{}", topic_base + w as u64))
        .collect();

    let mut speakers = Vec::with_capacity(size);
    let mut parents = Vec::with_capacity(size);
    let mut texts = Vec::with_capacity(size);
    for t in 0..size {
        let parent = if t == 0 {
            0
        } else {
            let mut skip = 1usize;
            while skip < t && rng.gen::<f64>() < cfg.reply_skip_prob {
                skip += 1;
            }
            t - skip
        };
        parents.push(parent);

        let speaker = if t == 0 {
            participants[rng.gen_range(0..participants.len())]
        } else {
            let parent_speaker = speakers[parent];
            let others: Vec<usize> = participants
                .iter()
                .copied()
                .filter(|&s| s != parent_speaker)
                .collect();
            if others.is_empty() {
                parent_speaker
            } else {
                others[rng.gen_range(0..others.len())]
            }
        };
        speakers.push(speaker);

        let mut words = Vec::new();
        if t > 0 && rng.gen::<f64>() < cfg.mention_prob {
            words.push(format!("{}:", speaker_name(speakers[parent])));
        }
        for _ in 0..cfg.words_per_utterance.sample(rng) {
            if rng.gen::<f64>() < cfg.topic_strength {
                words.push(topics[rng.gen_range(0..topics.len())].clone());
            } else {
                words.push(format!("c{}", rng.gen_range(0..cfg.common_words)));
            }
        }
        texts.push(words.join(" "));
    }
    SessionDraft {
        speakers,
        texts,
        parents,
    }
}

fn speaker_name(k: usize) -> String {
    format!("user{k:02}")
}

/// Generates the corpus; bit-identical for identical configs.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<(Dialogue, ReplyForest)>, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.dialogues);
    let mut topic_base = 0u64;
    for di in 0..cfg.dialogues {
        let num_sessions = cfg.sessions.sample(&mut rng);
        let drafts: Vec<SessionDraft> = (0..num_sessions)
            .map(|_| {
                let d = grow_session(cfg, topic_base, &mut rng);
                topic_base += cfg.topic_words as u64;
                d
            })
            .collect();

        // order-preserving random merge, weighted by remaining length
        let mut cursors = vec![0usize; drafts.len()];
        let total: usize = drafts.iter().map(|d| d.texts.len()).sum();
        let mut global_of: Vec<Vec<usize>> = drafts.iter().map(|d| vec![0; d.texts.len()]).collect();
        let mut utterances = Vec::with_capacity(total);
        let mut parents = Vec::with_capacity(total);
        for next_index in 0..total {
            let remaining: Vec<usize> = drafts
                .iter()
                .enumerate()
                .map(|(s, d)| d.texts.len() - cursors[s])
                .collect();
            let left: usize = remaining.iter().sum();
            let mut pick = rng.gen_range(0..left);
            let mut chosen = 0usize;
            for (s, &r) in remaining.iter().enumerate() {
                if pick < r {
                    chosen = s;
                    break;
                }
                pick -= r;
            }
            let t = cursors[chosen];
            cursors[chosen] += 1;
            global_of[chosen][t] = next_index;
            let draft = &drafts[chosen];
            utterances.push(Utterance {
                index: next_index,
                speaker: speaker_name(draft.speakers[t]),
                text: draft.texts[t].clone(),
                timestamp: None,
            });
            parents.push(if t == 0 {
                next_index
            } else {
                global_of[chosen][draft.parents[t]]
            });
        }
        let dialogue = Dialogue::new(format!("{}-{di:04}", cfg.id_prefix), utterances);
        let forest = ReplyForest::from_parents(parents)
            .expect("session-local parents precede their children");
        out.push((dialogue, forest));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::derive_sessions;
    use crate::encoder::featurize_pair;

    #[test]
    fn single_session_is_one_component() {
        let cfg = SynthConfig {
            dialogues: 10,
            sessions: Span::new(1, 1),
            seed: 5,
            ..SynthConfig::default()
        };
        for (_, forest) in generate(&cfg).unwrap() {
            assert_eq!(derive_sessions(&forest).num_clusters(), 1);
        }
    }

    #[test]
    fn mention_probability_one_fires_featurizer_flags() {
        let cfg = SynthConfig {
            dialogues: 5,
            mention_prob: 1.0,
            seed: 6,
            ..SynthConfig::default()
        };
        for (dialogue, forest) in generate(&cfg).unwrap() {
            for c in 0..dialogue.len() {
                let p = forest.parent(c);
                if p == c {
                    continue;
                }
                let feats =
                    featurize_pair(dialogue.utterance(p), dialogue.utterance(c), &dialogue, 64);
                assert!(
                    feats.current_mentions_candidate,
                    "utterance {c} should name its parent's speaker"
                );
            }
        }
    }

    #[test]
    fn forests_are_valid_and_in_session() {
        let cfg = SynthConfig {
            dialogues: 1000,
            seed: 7,
            ..SynthConfig::default()
        };
        for (dialogue, forest) in generate(&cfg).unwrap() {
            assert_eq!(forest.len(), dialogue.len());
            let sessions = derive_sessions(&forest);
            let labels = sessions.labels();
            for c in 0..forest.len() {
                let p = forest.parent(c);
                assert!(p <= c);
                assert_eq!(labels[p], labels[c], "cross-session reply at {c}");
            }
        }
    }

    #[test]
    fn identical_seeds_identical_corpora() {
        let cfg = SynthConfig {
            dialogues: 8,
            seed: 99,
            ..SynthConfig::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
        let c = generate(&SynthConfig { seed: 100, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn interleaving_preserves_session_order() {
        let cfg = SynthConfig {
            dialogues: 50,
            seed: 8,
            ..SynthConfig::default()
        };
        for (_, forest) in generate(&cfg).unwrap() {
            // within a component, the root is the smallest index and every
            // parent precedes its child, which pins the generation order
            let sessions = derive_sessions(&forest);
            for cluster in sessions.clusters() {
                let root = cluster.iter().find(|&&i| forest.is_root(i)).unwrap();
                assert_eq!(root, &cluster[0]);
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = SynthConfig::default();
        cfg.mention_prob = 1.5;
        assert!(generate(&cfg).is_err());
        let mut cfg = SynthConfig::default();
        cfg.sessions = Span::new(3, 2);
        assert!(generate(&cfg).is_err());
        let mut cfg = SynthConfig::default();
        cfg.speaker_pool = 1;
        assert!(generate(&cfg).is_err());
    }
}
