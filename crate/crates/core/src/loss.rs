//! Level-ranked training losses.
//!
//! Candidates are grouped into four levels (gold parent, its ancestors,
//! remaining same-session utterances, everything else). Each loss is a
//! grouped log-softmax: the numerator level's mass against the mass of that
//! level and everything ranked below it. A level with an empty numerator
//! contributes zero and stays out of the gradient flow.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CandidateLevels;
use crate::nn::{Tape, VarId};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("empty candidate set for utterance {current}")]
    EmptyCandidates { current: usize },
    #[error("scores do not cover the candidate window: {0}")]
    ScoreMismatch(String),
}

/// Weighting coefficients for the three level losses; each lies in (0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha1: 1.0,
            alpha2: 0.1,
            alpha3: 0.05,
        }
    }
}

/// The three per-level losses of one training instance.
pub struct LevelLosses {
    pub l1: VarId,
    pub l2: VarId,
    pub l3: VarId,
}

fn group_loss(tape: &mut Tape, numerator: &[VarId], denominator: &[VarId]) -> VarId {
    if numerator.is_empty() {
        return tape.scalar(0.0);
    }
    let num = tape.concat(numerator);
    let den = tape.concat(denominator);
    let lse_num = tape.logsumexp(num);
    let lse_den = tape.logsumexp(den);
    tape.sub(lse_den, lse_num)
}

/// Builds the three grouped-softmax losses from per-candidate scores.
///
/// `scores` must map exactly the in-window candidate indices (the union of
/// the four level sets) to score nodes.
pub fn level_losses(
    tape: &mut Tape,
    scores: &BTreeMap<usize, VarId>,
    levels: &CandidateLevels,
) -> Result<LevelLosses, LossError> {
    let all = levels.all();
    if all.is_empty() {
        return Err(LossError::EmptyCandidates {
            current: levels.current,
        });
    }
    if scores.len() != all.len() || !all.iter().all(|i| scores.contains_key(i)) {
        return Err(LossError::ScoreMismatch(format!(
            "scores cover {:?}, window candidates are {:?}",
            scores.keys().collect::<Vec<_>>(),
            all
        )));
    }
    let pick = |set: &std::collections::BTreeSet<usize>| -> Vec<VarId> {
        set.iter().map(|i| scores[i]).collect()
    };

    let r1 = pick(&levels.parent);
    let r2 = pick(&levels.ancestors);
    let r3 = pick(&levels.same_session);
    let r4 = pick(&levels.other);

    let mut den1 = r1.clone();
    den1.extend(&r2);
    den1.extend(&r3);
    den1.extend(&r4);
    let mut den2 = r2.clone();
    den2.extend(&r3);
    den2.extend(&r4);
    let mut den3 = r3.clone();
    den3.extend(&r4);

    Ok(LevelLosses {
        l1: group_loss(tape, &r1, &den1),
        l2: group_loss(tape, &r2, &den2),
        l3: group_loss(tape, &r3, &den3),
    })
}

/// `α1·L1 + α2·L2 + α3·L3`.
pub fn total_loss(tape: &mut Tape, losses: &LevelLosses, weights: &LossWeights) -> VarId {
    let a = tape.scale(losses.l1, weights.alpha1);
    let b = tape.scale(losses.l2, weights.alpha2);
    let c = tape.scale(losses.l3, weights.alpha3);
    let ab = tape.add(a, b);
    tape.add(ab, c)
}
