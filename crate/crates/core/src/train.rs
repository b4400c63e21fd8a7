//! SGD training over synthetic or ingested corpora, checkpoint IO, and the
//! ablation harness.
//!
//! One step = one (dialogue, current utterance) instance: score the window
//! with teacher-forced reply features, build the level losses against the
//! gold forest, backpropagate, and update in place. Plain SGD with a fixed
//! step size; the optimizer choice is recorded in checkpoints.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{DecoderKind, RunConfig};
use crate::corpus::{candidate_levels, derive_sessions, Dialogue, ReplyForest};
use crate::decode::{easy_first_decode, sequential_decode, DecodeTrace};
use crate::encoder::FEATURE_SCHEMA_VERSION;
use crate::graphs::{corrupt_replies, ReplySet};
use crate::loss::{level_losses, total_loss, LevelLosses, LossError};
use crate::metrics::{evaluate_corpus, EvalOptions, MetricReport};
use crate::model::{score_current, Model, StepNoise};
use crate::nn::{NnError, Tape};
use crate::synth::generate;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error(
        "non-finite loss at epoch {epoch}, dialogue {dialogue:?}, utterance {current}: {source}"
    )]
    NonFinite {
        epoch: usize,
        dialogue: String,
        current: usize,
        source: NnError,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Synth(#[from] crate::synth::SynthError),
}

/// Per-step loss record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub dialogue: String,
    pub current: usize,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
}

impl TrainLog {
    pub fn first_total(&self) -> Option<f64> {
        self.steps.first().map(|s| s.total)
    }

    pub fn last_total(&self) -> Option<f64> {
        self.steps.last().map(|s| s.total)
    }

    pub fn epoch_mean(&self, epoch: usize) -> Option<f64> {
        let vals: Vec<f64> = self
            .steps
            .iter()
            .filter(|s| s.epoch == epoch)
            .map(|s| s.total)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Trains from scratch; deterministic in (corpus, config).
pub fn train(
    corpus: &[(Dialogue, ReplyForest)],
    run: &RunConfig,
) -> Result<(Model, TrainLog), TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut model = Model::init(run.model.clone(), run.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed.wrapping_mul(0x5851_f42d_4c95_7f2d));
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let omega = model.config.window;

    let mut step = 0usize;
    for epoch in 0..run.train.epoch_size {
        order.shuffle(&mut rng);
        for &di in &order {
            let (dialogue, forest) = &corpus[di];
            let sessions = derive_sessions(forest);
            let gold = ReplySet::from_forest(forest);
            for c in 0..dialogue.len() {
                let replies =
                    corrupt_replies(&gold, omega, run.train.teacher_forcing_rate, &mut rng);
                let clip = crate::model::node_window(c, dialogue.len(), omega);
                let m = clip.end() - clip.start() + 1;
                let noise = StepNoise::sample(&model.config, m, &mut rng);

                let mut tape = Tape::new();
                let vars = model.bind(&mut tape);
                let ws =
                    score_current(&mut tape, &model, &vars, dialogue, c, &replies, Some(&noise))
                        .map_err(|source| TrainError::NonFinite {
                            epoch,
                            dialogue: dialogue.id.clone(),
                            current: c,
                            source,
                        })?;
                let levels = candidate_levels(c, forest, &sessions, omega);
                let raw = level_losses(&mut tape, &ws.score_map(), &levels)?;
                let losses = LevelLosses {
                    l1: raw.l1,
                    l2: if run.train.disable_l2 {
                        tape.scalar(0.0)
                    } else {
                        raw.l2
                    },
                    l3: if run.train.disable_l3 {
                        tape.scalar(0.0)
                    } else {
                        raw.l3
                    },
                };
                let total = total_loss(&mut tape, &losses, &run.train.weights);

                let grads = tape.backward(total).map_err(|source| TrainError::NonFinite {
                    epoch,
                    dialogue: dialogue.id.clone(),
                    current: c,
                    source,
                })?;
                model.apply_sgd(&vars, &grads, run.train.learning_rate);

                log.steps.push(StepLog {
                    epoch,
                    step,
                    dialogue: dialogue.id.clone(),
                    current: c,
                    l1: tape.item(losses.l1),
                    l2: tape.item(losses.l2),
                    l3: tape.item(losses.l3),
                    total: tape.item(total),
                });
                step += 1;
            }
        }
    }
    Ok((model, log))
}

/// Mean training objective over a corpus under fixed conditions: no dropout
/// noise and uncorrupted gold reply features. Deterministic in (model,
/// corpus), which makes before/after comparisons meaningful.
pub fn corpus_mean_loss(
    model: &Model,
    corpus: &[(Dialogue, ReplyForest)],
    run: &RunConfig,
) -> Result<f64, TrainError> {
    let omega = model.config.window;
    let mut total = 0.0;
    let mut count = 0usize;
    for (dialogue, forest) in corpus {
        let sessions = derive_sessions(forest);
        let gold = ReplySet::from_forest(forest);
        for c in 0..dialogue.len() {
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            let ws = score_current(&mut tape, model, &vars, dialogue, c, &gold, None)?;
            let levels = candidate_levels(c, forest, &sessions, omega);
            let raw = level_losses(&mut tape, &ws.score_map(), &levels)?;
            let losses = LevelLosses {
                l1: raw.l1,
                l2: if run.train.disable_l2 {
                    tape.scalar(0.0)
                } else {
                    raw.l2
                },
                l3: if run.train.disable_l3 {
                    tape.scalar(0.0)
                } else {
                    raw.l3
                },
            };
            let t = total_loss(&mut tape, &losses, &run.train.weights);
            total += tape.item(t);
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

/// Decodes every dialogue with the requested decoder.
pub fn predict_corpus(
    model: &Model,
    dialogues: &[Dialogue],
    decoder: DecoderKind,
    omega: Option<usize>,
) -> Result<Vec<(ReplyForest, DecodeTrace)>, NnError> {
    dialogues
        .iter()
        .map(|d| match decoder {
            DecoderKind::EasyFirst => easy_first_decode(model, d, omega),
            DecoderKind::Sequential => sequential_decode(model, d, omega),
        })
        .collect()
}

/// Serialized model plus everything needed to reproduce and validate it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub feature_schema: String,
    pub optimizer: String,
    pub run: RunConfig,
    pub model: Model,
}

impl Checkpoint {
    pub fn new(model: Model, run: RunConfig) -> Self {
        Checkpoint {
            feature_schema: FEATURE_SCHEMA_VERSION.to_string(),
            optimizer: "sgd".to_string(),
            run,
            model,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let json = serde_json::to_string(self)
            .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        if ckpt.feature_schema != FEATURE_SCHEMA_VERSION {
            return Err(TrainError::Checkpoint(format!(
                "feature schema {:?} does not match this build ({:?})",
                ckpt.feature_schema, FEATURE_SCHEMA_VERSION
            )));
        }
        Ok(ckpt)
    }
}

/// The ablation grid: graph knockouts, loss knockouts, and the sequential
/// decoding order.
pub const ABLATION_ROWS: [&str; 9] = [
    "Full",
    "w/o G^S",
    "w/o G^M",
    "w/o G^D",
    "w/o G^R",
    "w/o ALL",
    "w/o L3",
    "w/o L2&L3",
    "Seq. order",
];

fn config_for_row(base: &RunConfig, row: &str) -> RunConfig {
    let mut run = base.clone();
    match row {
        "Full" | "Seq. order" => {}
        "w/o G^S" => run.model.graphs.speaker = false,
        "w/o G^M" => run.model.graphs.mention = false,
        "w/o G^D" => run.model.graphs.distance = false,
        "w/o G^R" => run.model.graphs.reply = false,
        "w/o ALL" => run.model.graphs = crate::model::GraphSet::none(),
        "w/o L3" => run.train.disable_l3 = true,
        "w/o L2&L3" => {
            run.train.disable_l2 = true;
            run.train.disable_l3 = true;
        }
        other => unreachable!("unknown ablation row {other}"),
    }
    run
}

/// Trains and evaluates every ablation row under a shared seed. "Seq. order"
/// reuses the Full model with sequential decoding; every other row retrains.
pub fn run_ablations(
    train_corpus: &[(Dialogue, ReplyForest)],
    test_corpus: &[(Dialogue, ReplyForest)],
    base: &RunConfig,
    opts: &EvalOptions,
) -> Result<Vec<(String, MetricReport)>, TrainError> {
    let golds: Vec<ReplyForest> = test_corpus.iter().map(|(_, f)| f.clone()).collect();
    let dialogues: Vec<Dialogue> = test_corpus.iter().map(|(d, _)| d.clone()).collect();

    let mut out = Vec::with_capacity(ABLATION_ROWS.len());
    let mut full_model: Option<Model> = None;
    for row in ABLATION_ROWS {
        let run = config_for_row(base, row);
        let (model, decoder) = match row {
            "Seq. order" => (
                full_model.clone().expect("Full precedes Seq. order"),
                DecoderKind::Sequential,
            ),
            _ => {
                let (model, _) = train(train_corpus, &run)?;
                (model, DecoderKind::EasyFirst)
            }
        };
        if row == "Full" {
            full_model = Some(model.clone());
        }
        let preds: Vec<ReplyForest> = predict_corpus(&model, &dialogues, decoder, None)?
            .into_iter()
            .map(|(f, _)| f)
            .collect();
        out.push((row.to_string(), evaluate_corpus(&golds, &preds, opts)));
    }
    Ok(out)
}

/// Generates the train/test splits from the run's generator settings.
pub fn synth_splits(
    run: &RunConfig,
) -> Result<(Vec<(Dialogue, ReplyForest)>, Vec<(Dialogue, ReplyForest)>), TrainError> {
    let train = generate(&run.synth_for_split(false))?;
    let test = generate(&run.synth_for_split(true))?;
    Ok((train, test))
}

/// Always-pick-the-previous-utterance baseline, used to sanity-check that
/// trained models beat pure distance.
pub fn nearest_predecessor_baseline(dialogues: &[Dialogue]) -> Vec<ReplyForest> {
    dialogues
        .iter()
        .map(|d| {
            let parents: Vec<usize> = (0..d.len()).map(|c| c.saturating_sub(1)).collect();
            ReplyForest::from_parents(parents).expect("predecessor precedes child")
        })
        .collect()
}

/// Checks that a predicted forest respects the window mask and totality.
pub fn validate_prediction(dialogue: &Dialogue, forest: &ReplyForest, omega: usize) -> bool {
    forest.len() == dialogue.len()
        && (0..forest.len()).all(|c| {
            let p = forest.parent(c);
            p <= c && crate::corpus::candidate_window(c, omega).contains(&p)
        })
}

/// Sorted set handy for tests and the CLI.
pub fn all_children(n: usize) -> BTreeSet<usize> {
    (0..n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{Span, SynthConfig};

    fn tiny_run() -> RunConfig {
        let mut run = RunConfig::default();
        run.model.hidden = 8;
        run.model.label_dim = 3;
        run.model.egcn_layers = 1;
        run.model.ffnn_hidden = 6;
        run.model.buckets = 64;
        run.model.window = 8;
        run.train.epoch_size = 1;
        run.train.learning_rate = 0.05;
        run.synth = SynthConfig {
            dialogues: 10,
            sessions: Span::new(2, 3),
            utterances_per_session: Span::new(3, 5),
            seed: 0,
            ..SynthConfig::default()
        };
        run.synth_test_dialogues = 4;
        run.seed = 11;
        run
    }

    #[test]
    fn one_epoch_of_training_lowers_the_loss() {
        let run = tiny_run();
        let (corpus, _) = synth_splits(&run).unwrap();
        let untrained = Model::init(run.model.clone(), run.seed);
        let before = corpus_mean_loss(&untrained, &corpus, &run).unwrap();
        let (model, log) = train(&corpus, &run).unwrap();
        let after = corpus_mean_loss(&model, &corpus, &run).unwrap();
        assert!(log.steps.len() > 10);
        // every step carries the three level losses
        assert!(log.steps.iter().all(|s| s.l1 >= 0.0 && s.l2 >= 0.0 && s.l3 >= 0.0));
        assert!(
            after < before,
            "expected one epoch to lower the loss: before {before}, after {after}"
        );
    }

    #[test]
    fn loss_ablation_zeroes_logged_levels() {
        let mut run = tiny_run();
        run.train.disable_l2 = true;
        run.train.disable_l3 = true;
        run.synth.dialogues = 3;
        let (corpus, _) = synth_splits(&run).unwrap();
        let (_, log) = train(&corpus, &run).unwrap();
        assert!(log.steps.iter().all(|s| s.l2 == 0.0 && s.l3 == 0.0));
        assert!(log.steps.iter().any(|s| s.l1 > 0.0));
    }

    #[test]
    fn same_seed_same_checkpoint() {
        let mut run = tiny_run();
        run.synth.dialogues = 4;
        let (corpus, _) = synth_splits(&run).unwrap();
        let (m1, _) = train(&corpus, &run).unwrap();
        let (m2, _) = train(&corpus, &run).unwrap();
        let c1 = serde_json::to_string(&Checkpoint::new(m1, run.clone())).unwrap();
        let c2 = serde_json::to_string(&Checkpoint::new(m2, run.clone())).unwrap();
        assert_eq!(c1, c2);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut run = tiny_run();
        run.synth.dialogues = 2;
        run.train.epoch_size = 1;
        let (corpus, _) = synth_splits(&run).unwrap();
        let (model, _) = train(&corpus, &run).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        Checkpoint::new(model.clone(), run).save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.model, model);
        assert_eq!(loaded.optimizer, "sgd");

        // stale schema is rejected
        let mut raw: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        raw["feature_schema"] = serde_json::json!("pair-features-v0");
        std::fs::write(&path, raw.to_string()).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn predictions_respect_invariants() {
        let mut run = tiny_run();
        run.synth.dialogues = 4;
        let (corpus, test) = synth_splits(&run).unwrap();
        let (model, _) = train(&corpus, &run).unwrap();
        let dialogues: Vec<Dialogue> = test.iter().map(|(d, _)| d.clone()).collect();
        for decoder in [DecoderKind::EasyFirst, DecoderKind::Sequential] {
            let preds = predict_corpus(&model, &dialogues, decoder, None).unwrap();
            for ((forest, trace), dialogue) in preds.iter().zip(&dialogues) {
                assert!(validate_prediction(dialogue, forest, run.model.window));
                assert_eq!(trace.steps.len(), dialogue.len());
                let children: BTreeSet<usize> =
                    trace.steps.iter().map(|s| s.child).collect();
                assert_eq!(children.len(), dialogue.len());
            }
        }
    }

    #[test]
    fn empty_prediction_input_is_empty_output() {
        let run = tiny_run();
        let model = Model::init(run.model.clone(), 1);
        let preds = predict_corpus(&model, &[], DecoderKind::EasyFirst, None).unwrap();
        assert!(preds.is_empty());
    }

    #[test]
    fn ablation_rows_are_complete() {
        let mut run = tiny_run();
        run.synth.dialogues = 3;
        run.synth_test_dialogues = 2;
        run.model.window = 6;
        let (train_c, test_c) = synth_splits(&run).unwrap();
        let rows = run_ablations(&train_c, &test_c, &run, &EvalOptions::default()).unwrap();
        let names: Vec<&str> = rows.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ABLATION_ROWS.to_vec());
        for (_, report) in &rows {
            assert!(report.link.f1 >= 0.0 && report.link.f1 <= 1.0);
        }
    }
}
