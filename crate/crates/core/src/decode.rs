//! Easy-first and sequential reply decoding.
//!
//! Easy-first keeps a pool of admitted-but-unresolved utterances, repeatedly
//! commits the globally highest-scoring (child, parent) pair, feeds the new
//! link back into the partial-reply features, and admits the next utterance.
//! Sequential decoding resolves utterances front to back using only links
//! already committed for earlier utterances.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use crate::corpus::{candidate_window, Dialogue, ReplyForest};
use crate::graphs::ReplySet;
use crate::model::{score_current, Model};
use crate::nn::{softmax_candidates, NnError, Tape};

/// Pairwise scores with the window mask applied: an entry is finite exactly
/// when `child - ω < candidate ≤ child`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    omega: usize,
    entries: BTreeMap<(usize, usize), f64>,
}

impl ScoreMatrix {
    pub fn new(omega: usize) -> Self {
        ScoreMatrix {
            omega: omega.max(1),
            entries: BTreeMap::new(),
        }
    }

    pub fn omega(&self) -> usize {
        self.omega
    }

    pub fn insert(&mut self, child: usize, candidate: usize, score: f64) {
        assert!(
            candidate_window(child, self.omega).contains(&candidate),
            "entry ({child}, {candidate}) outside the window mask"
        );
        assert!(score.is_finite(), "scores must be finite; the mask is implicit");
        self.entries.insert((child, candidate), score);
    }

    /// Finite score or negative infinity outside the stored set.
    pub fn get(&self, child: usize, candidate: usize) -> f64 {
        self.entries
            .get(&(child, candidate))
            .copied()
            .unwrap_or(f64::NEG_INFINITY)
    }

    /// Finite entries of one child's row, ascending by candidate.
    pub fn row(&self, child: usize) -> Vec<(usize, f64)> {
        self.entries
            .range((child, 0)..=(child, usize::MAX))
            .map(|(&(_, j), &s)| (j, s))
            .collect()
    }

    pub fn children(&self) -> BTreeSet<usize> {
        self.entries.keys().map(|&(c, _)| c).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// One committed decoding decision.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub step: usize,
    pub child: usize,
    pub parent: usize,
    pub score: f64,
    /// Softmax over the child's finite candidates at decision time.
    pub distribution: Vec<(usize, f64)>,
    /// `-ln p(chosen)`.
    pub entropy: f64,
}

/// Ordered decisions of one decode run; one step per utterance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DecodeTrace {
    pub steps: Vec<TraceStep>,
}

impl DecodeTrace {
    /// JSONL export, one `{step, child, parent, score, entropy}` per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            let line = serde_json::json!({
                "step": s.step,
                "child": s.child,
                "parent": s.parent,
                "score": s.score,
                "entropy": if s.entropy.is_finite() {
                    serde_json::json!(s.entropy)
                } else {
                    serde_json::json!("inf")
                },
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())
    }
}

/// Certainty proxy of a decision: `-ln p(chosen)`; infinite when the chosen
/// candidate has no probability mass.
pub fn decision_entropy(distribution: &[f64], chosen: usize) -> f64 {
    let p = distribution[chosen];
    if p > 0.0 {
        -p.ln()
    } else {
        f64::INFINITY
    }
}

/// Supplies score rows for decoding. Implementations may consult the
/// resolved links (the model does, through the partial-reply graph) or
/// ignore them (frozen matrices).
pub trait ScoreSource {
    /// Number of utterances.
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Window size ω.
    fn omega(&self) -> usize;
    /// Scores of every candidate of `child`, ascending by candidate index.
    fn score_row(&mut self, child: usize, resolved: &ReplySet)
        -> Result<Vec<(usize, f64)>, NnError>;
    /// True when `score_row` ignores `resolved`; lets easy-first skip
    /// rescoring entirely.
    fn depends_on_replies(&self) -> bool {
        true
    }
}

/// Model-backed scorer (inference mode, no noise).
pub struct ModelScorer<'a> {
    model: &'a Model,
    dialogue: &'a Dialogue,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a Model, dialogue: &'a Dialogue) -> Self {
        ModelScorer { model, dialogue }
    }
}

impl ScoreSource for ModelScorer<'_> {
    fn len(&self) -> usize {
        self.dialogue.len()
    }

    fn omega(&self) -> usize {
        self.model.config.window
    }

    fn score_row(
        &mut self,
        child: usize,
        resolved: &ReplySet,
    ) -> Result<Vec<(usize, f64)>, NnError> {
        let mut tape = Tape::new();
        let vars = self.model.bind(&mut tape);
        let ws = score_current(
            &mut tape,
            self.model,
            &vars,
            self.dialogue,
            child,
            resolved,
            None,
        )?;
        Ok(ws.values(&tape))
    }

    fn depends_on_replies(&self) -> bool {
        self.model.config.graphs.reply
    }
}

/// Fixed score matrix; rows never change as links are committed.
pub struct FrozenScorer {
    n: usize,
    matrix: ScoreMatrix,
}

impl FrozenScorer {
    pub fn new(n: usize, matrix: ScoreMatrix) -> Self {
        FrozenScorer { n, matrix }
    }
}

impl ScoreSource for FrozenScorer {
    fn len(&self) -> usize {
        self.n
    }

    fn omega(&self) -> usize {
        self.matrix.omega()
    }

    fn score_row(
        &mut self,
        child: usize,
        _resolved: &ReplySet,
    ) -> Result<Vec<(usize, f64)>, NnError> {
        Ok(self.matrix.row(child))
    }

    fn depends_on_replies(&self) -> bool {
        false
    }
}

/// Scores every active child over its candidate window, with the model's
/// partial-reply features built from `resolved`.
pub fn score_window(
    model: &Model,
    dialogue: &Dialogue,
    resolved: &ReplySet,
    children: &BTreeSet<usize>,
) -> Result<ScoreMatrix, NnError> {
    let mut scorer = ModelScorer::new(model, dialogue);
    let mut matrix = ScoreMatrix::new(scorer.omega());
    for &child in children {
        for (j, s) in scorer.score_row(child, resolved)? {
            matrix.insert(child, j, s);
        }
    }
    Ok(matrix)
}

fn trace_step(
    step: usize,
    child: usize,
    parent: usize,
    row: &[(usize, f64)],
) -> TraceStep {
    let scores: Vec<f64> = row.iter().map(|&(_, s)| s).collect();
    let mask = vec![true; scores.len()];
    let probs = softmax_candidates(&scores, &mask).expect("non-empty candidate row");
    let chosen_pos = row
        .iter()
        .position(|&(j, _)| j == parent)
        .expect("chosen candidate in row");
    TraceStep {
        step,
        child,
        parent,
        score: row[chosen_pos].1,
        distribution: row.iter().map(|&(j, _)| j).zip(probs.iter().copied()).collect(),
        entropy: decision_entropy(&probs, chosen_pos),
    }
}

/// Easy-first decoding over any score source.
///
/// The admitted pool starts with the first ω+1 utterances; each committed
/// pair admits the next unadmitted utterance, so every index is admitted
/// exactly once. Ties break toward the smaller child, then the larger
/// (nearer) candidate.
pub fn easy_first_decode_with(
    source: &mut dyn ScoreSource,
) -> Result<(ReplyForest, DecodeTrace), NnError> {
    let n = source.len();
    let omega = source.omega();
    if n == 0 {
        return Ok((ReplyForest::all_roots(0), DecodeTrace::default()));
    }

    let mut frontier = (omega + 1).min(n);
    let mut active: BTreeSet<usize> = (0..frontier).collect();
    let mut resolved = ReplySet::new();
    let mut rows: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
    for &i in &active {
        rows.insert(i, source.score_row(i, &resolved)?);
    }

    let mut parents = vec![usize::MAX; n];
    let mut trace = DecodeTrace::default();

    while !active.is_empty() {
        // global argmax; rows iterate children ascending and candidates
        // ascending, so replace on strictly-better score or on an equal
        // score with the same child and a larger candidate
        let mut best: Option<(usize, usize, f64)> = None;
        for (&i, row) in &rows {
            for &(j, s) in row {
                let replace = match best {
                    None => true,
                    Some((bi, bj, bs)) => {
                        s > bs || (s == bs && i == bi && j > bj)
                    }
                };
                if replace {
                    best = Some((i, j, s));
                }
            }
        }
        let (child, parent, _) = best.expect("active set implies finite entries");

        let row = rows.remove(&child).unwrap();
        trace
            .steps
            .push(trace_step(trace.steps.len(), child, parent, &row));
        parents[child] = parent;
        resolved.insert(child, parent);
        active.remove(&child);

        let admitted = if frontier < n {
            let a = frontier;
            frontier += 1;
            active.insert(a);
            Some(a)
        } else {
            None
        };

        if source.depends_on_replies() && parent != child {
            // a (child, parent) edge only alters clip graphs of children k
            // with both endpoints inside [k-ω, k+ω]
            let lo = child.saturating_sub(omega);
            let hi = (parent + omega).min(n.saturating_sub(1));
            let affected: Vec<usize> = active
                .range(lo..=hi)
                .copied()
                .filter(|k| admitted != Some(*k))
                .collect();
            for k in affected {
                rows.insert(k, source.score_row(k, &resolved)?);
            }
        }
        if let Some(a) = admitted {
            rows.insert(a, source.score_row(a, &resolved)?);
        }
    }

    Ok((
        ReplyForest::from_parents(parents).expect("decode yields parent ≤ child"),
        trace,
    ))
}

/// Sequential front-to-back decoding: utterance `c` takes the argmax of its
/// row, consulting only links committed for children before `c`. Ties break
/// toward the larger (nearer) candidate.
pub fn sequential_decode_with(
    source: &mut dyn ScoreSource,
) -> Result<(ReplyForest, DecodeTrace), NnError> {
    let n = source.len();
    let mut resolved = ReplySet::new();
    let mut parents = vec![usize::MAX; n];
    let mut trace = DecodeTrace::default();
    for c in 0..n {
        let row = source.score_row(c, &resolved)?;
        let mut best = row[0];
        for &(j, s) in &row[1..] {
            if s >= best.1 {
                best = (j, s);
            }
        }
        trace.steps.push(trace_step(c, c, best.0, &row));
        parents[c] = best.0;
        resolved.insert(c, best.0);
    }
    Ok((
        ReplyForest::from_parents(parents).expect("decode yields parent ≤ child"),
        trace,
    ))
}

/// Easy-first decoding with the trained model.
pub fn easy_first_decode(
    model: &Model,
    dialogue: &Dialogue,
    omega: Option<usize>,
) -> Result<(ReplyForest, DecodeTrace), NnError> {
    with_window(model, omega, |m| {
        easy_first_decode_with(&mut ModelScorer::new(m, dialogue))
    })
}

/// Sequential decoding with the trained model.
pub fn sequential_decode(
    model: &Model,
    dialogue: &Dialogue,
    omega: Option<usize>,
) -> Result<(ReplyForest, DecodeTrace), NnError> {
    with_window(model, omega, |m| {
        sequential_decode_with(&mut ModelScorer::new(m, dialogue))
    })
}

fn with_window<T>(
    model: &Model,
    omega: Option<usize>,
    f: impl FnOnce(&Model) -> T,
) -> T {
    match omega {
        Some(w) if w != model.config.window => {
            let mut m = model.clone();
            m.config.window = w.max(1);
            f(&m)
        }
        _ => f(model),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frozen(n: usize, omega: usize, entries: &[(usize, usize, f64)]) -> FrozenScorer {
        let mut m = ScoreMatrix::new(omega);
        for &(c, j, s) in entries {
            m.insert(c, j, s);
        }
        FrozenScorer::new(n, m)
    }

    fn full_random_matrix(n: usize, omega: usize, rng: &mut impl Rng) -> ScoreMatrix {
        let mut m = ScoreMatrix::new(omega);
        for c in 0..n {
            for j in candidate_window(c, omega) {
                m.insert(c, j, rng.gen_range(-5.0..5.0));
            }
        }
        m
    }

    #[test]
    fn single_utterance_self_links() {
        let mut src = frozen(1, 3, &[(0, 0, 0.5)]);
        let (forest, trace) = easy_first_decode_with(&mut src).unwrap();
        assert_eq!(forest.parents(), &[0]);
        assert_eq!(trace.steps.len(), 1);
        assert_eq!(trace.steps[0].entropy, 0.0);

        let mut src = frozen(1, 3, &[(0, 0, 0.5)]);
        let (forest, trace) = sequential_decode_with(&mut src).unwrap();
        assert_eq!(forest.parents(), &[0]);
        assert_eq!(trace.steps.len(), 1);
    }

    #[test]
    fn easy_first_follows_global_score_order() {
        // s21 is the global max, then s10, then s00
        let mut src = frozen(
            3,
            5,
            &[
                (0, 0, 7.0),
                (1, 0, 8.0),
                (1, 1, 1.0),
                (2, 0, 2.0),
                (2, 1, 9.0),
                (2, 2, 3.0),
            ],
        );
        let (forest, trace) = easy_first_decode_with(&mut src).unwrap();
        let order: Vec<(usize, usize)> =
            trace.steps.iter().map(|s| (s.child, s.parent)).collect();
        assert_eq!(order, vec![(2, 1), (1, 0), (0, 0)]);
        assert_eq!(forest.parents(), &[0, 0, 1]);
    }

    #[test]
    fn easy_first_tie_breaks_smaller_child_then_larger_candidate() {
        let mut src = frozen(
            3,
            5,
            &[
                (0, 0, 1.0),
                (1, 0, 5.0),
                (1, 1, 5.0),
                (2, 0, 5.0),
                (2, 1, 0.0),
                (2, 2, 0.0),
            ],
        );
        let (_, trace) = easy_first_decode_with(&mut src).unwrap();
        // child 1 wins the tie against child 2; within child 1 the larger
        // candidate wins
        assert_eq!((trace.steps[0].child, trace.steps[0].parent), (1, 1));
    }

    #[test]
    fn sequential_tie_breaks_toward_larger_candidate() {
        let mut src = frozen(2, 5, &[(0, 0, 0.0), (1, 0, 2.0), (1, 1, 2.0)]);
        let (forest, _) = sequential_decode_with(&mut src).unwrap();
        assert_eq!(forest.parent(1), 1);
    }

    #[test]
    fn frozen_scores_make_decoders_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        for _ in 0..50 {
            let n = rng.gen_range(1..=20);
            let omega = rng.gen_range(1..=6);
            let matrix = full_random_matrix(n, omega, &mut rng);
            let mut a = FrozenScorer::new(n, matrix.clone());
            let mut b = FrozenScorer::new(n, matrix);
            let (fa, _) = easy_first_decode_with(&mut a).unwrap();
            let (fb, _) = sequential_decode_with(&mut b).unwrap();
            assert_eq!(fa, fb, "frozen scores must make the decoders agree");
        }
    }

    #[test]
    fn easy_first_accepts_global_maximum_each_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        for _ in 0..30 {
            let n = rng.gen_range(1..=25);
            let omega = rng.gen_range(1..=8);
            let matrix = full_random_matrix(n, omega, &mut rng);
            let mut src = FrozenScorer::new(n, matrix.clone());
            let (forest, trace) = easy_first_decode_with(&mut src).unwrap();

            // replay: simulate the admission schedule, checking each
            // accepted score dominates all live finite entries
            let mut frontier = (omega + 1).min(n);
            let mut active: BTreeSet<usize> = (0..frontier).collect();
            for step in &trace.steps {
                let live_max = active
                    .iter()
                    .flat_map(|&i| matrix.row(i))
                    .map(|(_, s)| s)
                    .fold(f64::NEG_INFINITY, f64::max);
                assert!(step.score >= live_max - 1e-12);
                assert!(active.remove(&step.child));
                if frontier < n {
                    active.insert(frontier);
                    frontier += 1;
                }
            }
            assert!(active.is_empty());
            for c in 0..n {
                let w = candidate_window(c, omega);
                assert!(w.contains(&forest.parent(c)));
            }
        }
    }

    #[test]
    fn decision_entropy_examples() {
        assert_eq!(decision_entropy(&[1.0], 0), 0.0);
        let quarter = decision_entropy(&[0.25, 0.25, 0.25, 0.25], 2);
        assert!((quarter - 4f64.ln()).abs() < 1e-12);
        assert!((quarter - 1.3863).abs() < 1e-4);
        assert!(decision_entropy(&[0.0, 1.0], 0).is_infinite());
    }

    #[test]
    fn score_matrix_rejects_out_of_window_entries() {
        let mut m = ScoreMatrix::new(2);
        m.insert(5, 4, 1.0);
        assert!(std::panic::catch_unwind(move || m.insert(5, 2, 1.0)).is_err());
    }

    #[test]
    fn trace_jsonl_has_one_line_per_step() {
        let mut src = frozen(2, 3, &[(0, 0, 1.0), (1, 0, 2.0), (1, 1, 0.0)]);
        let (_, trace) = easy_first_decode_with(&mut src).unwrap();
        let text = trace.to_jsonl();
        assert_eq!(text.lines().count(), 2);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert!(first["step"].is_number());
        assert!(first["entropy"].is_number());
    }
}
