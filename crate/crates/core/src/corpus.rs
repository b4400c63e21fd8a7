//! Transcript ingestion and the reply-forest data model.
//!
//! An annotated dialogue is a chronological utterance list plus a total
//! child→parent map (`ReplyForest`); a self-link marks a session start.
//! Sessions are the connected components of that forest.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("annotation line {line}: parent {parent} comes after child {child}")]
    Annotation {
        line: usize,
        child: usize,
        parent: usize,
    },
    #[error("annotation line {line}: {reason}")]
    AnnotationOther { line: usize, reason: String },
    #[error("record {record}: {detail}")]
    Schema { record: usize, detail: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid reply forest: parent {parent} comes after child {child}")]
    ForestOrder { child: usize, parent: usize },
    #[error("invalid partition: {0}")]
    Partition(String),
}

/// One chat turn. `index` equals the position inside the owning [`Dialogue`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub index: usize,
    pub speaker: String,
    pub text: String,
    pub timestamp: Option<String>,
}

/// Chronologically ordered utterances with a stable id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialogue {
    pub id: String,
    utterances: Vec<Utterance>,
}

impl Dialogue {
    /// Builds a dialogue, reindexing the utterances to 0..n-1.
    pub fn new(id: impl Into<String>, mut utterances: Vec<Utterance>) -> Self {
        for (i, u) in utterances.iter_mut().enumerate() {
            u.index = i;
        }
        Dialogue {
            id: id.into(),
            utterances,
        }
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn utterance(&self, i: usize) -> &Utterance {
        &self.utterances[i]
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    /// Distinct speaker names, in order of first appearance.
    pub fn speakers(&self) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for u in &self.utterances {
            if seen.insert(u.speaker.as_str()) {
                out.push(u.speaker.as_str());
            }
        }
        out
    }
}

/// Total child→parent map over a dialogue; `parent(c) == c` marks a session
/// start. Parents never come after their children.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplyForest {
    parent: Vec<usize>,
}

impl ReplyForest {
    pub fn from_parents(parent: Vec<usize>) -> Result<Self, CorpusError> {
        for (child, &p) in parent.iter().enumerate() {
            if p > child {
                return Err(CorpusError::ForestOrder { child, parent: p });
            }
        }
        Ok(ReplyForest { parent })
    }

    /// All-self-links forest over `n` utterances.
    pub fn all_roots(n: usize) -> Self {
        ReplyForest {
            parent: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn parent(&self, child: usize) -> usize {
        self.parent[child]
    }

    pub fn is_root(&self, child: usize) -> bool {
        self.parent[child] == child
    }

    pub fn parents(&self) -> &[usize] {
        &self.parent
    }

    /// Strict ancestors of `i`: parent, grandparent, ... up to the session
    /// root, excluding `i` itself.
    pub fn ancestors(&self, i: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut cur = i;
        while self.parent[cur] != cur {
            cur = self.parent[cur];
            out.push(cur);
        }
        out
    }

    /// Session root reached by climbing the reply chain.
    pub fn root_of(&self, i: usize) -> usize {
        let mut cur = i;
        while self.parent[cur] != cur {
            cur = self.parent[cur];
        }
        cur
    }
}

/// Disjoint index clusters covering 0..n-1; one cluster per reply-forest
/// component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionPartition {
    clusters: Vec<Vec<usize>>,
    n: usize,
}

impl SessionPartition {
    /// Validates that the clusters are disjoint and cover 0..n-1 for some n.
    pub fn from_clusters(mut clusters: Vec<Vec<usize>>) -> Result<Self, CorpusError> {
        clusters.retain(|c| !c.is_empty());
        for c in &mut clusters {
            c.sort_unstable();
        }
        clusters.sort_by_key(|c| c[0]);
        let n: usize = clusters.iter().map(|c| c.len()).sum();
        let mut seen = vec![false; n];
        for c in &clusters {
            for &i in c {
                if i >= n {
                    return Err(CorpusError::Partition(format!(
                        "index {i} out of range for {n} elements"
                    )));
                }
                if seen[i] {
                    return Err(CorpusError::Partition(format!("index {i} appears twice")));
                }
                seen[i] = true;
            }
        }
        Ok(SessionPartition { clusters, n })
    }

    pub fn clusters(&self) -> &[Vec<usize>] {
        &self.clusters
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_clusters(&self) -> usize {
        self.clusters.len()
    }

    /// Cluster label per element index.
    pub fn labels(&self) -> Vec<usize> {
        let mut labels = vec![0usize; self.n];
        for (k, c) in self.clusters.iter().enumerate() {
            for &i in c {
                labels[i] = k;
            }
        }
        labels
    }
}

/// Derives the session partition as the connected components of the forest.
///
/// The number of clusters equals the number of self-links.
pub fn derive_sessions(forest: &ReplyForest) -> SessionPartition {
    let n = forest.len();
    let mut root = vec![usize::MAX; n];
    for i in 0..n {
        // parent(i) <= i, so the parent's root is already known
        root[i] = if forest.parent(i) == i {
            i
        } else {
            root[forest.parent(i)]
        };
    }
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    let mut cluster_of_root = vec![usize::MAX; n];
    for i in 0..n {
        let r = root[i];
        if cluster_of_root[r] == usize::MAX {
            cluster_of_root[r] = clusters.len();
            clusters.push(Vec::new());
        }
        clusters[cluster_of_root[r]].push(i);
    }
    SessionPartition { clusters, n }
}

/// The four-level partition of a window's parent candidates, relative to a
/// gold forest: the gold parent, its strict ancestors, remaining same-session
/// utterances, and everything else.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateLevels {
    pub current: usize,
    pub parent: BTreeSet<usize>,
    pub ancestors: BTreeSet<usize>,
    pub same_session: BTreeSet<usize>,
    pub other: BTreeSet<usize>,
}

impl CandidateLevels {
    /// All in-window candidates, i.e. the union of the four levels.
    pub fn all(&self) -> BTreeSet<usize> {
        let mut s = self.parent.clone();
        s.extend(&self.ancestors);
        s.extend(&self.same_session);
        s.extend(&self.other);
        s
    }
}

/// Candidate indices for utterance `c` under window `omega`: the half-open
/// range (c-omega, c], clipped at 0. Always contains `c` itself.
pub fn candidate_window(c: usize, omega: usize) -> std::ops::RangeInclusive<usize> {
    (c + 1).saturating_sub(omega.max(1))..=c
}

/// Splits the in-window candidates of `c` into the four ranking levels using
/// the gold forest. Every set is intersected with the window, so the
/// gold-parent level may be empty when the gold parent is out of range.
pub fn candidate_levels(
    c: usize,
    forest: &ReplyForest,
    partition: &SessionPartition,
    omega: usize,
) -> CandidateLevels {
    let window = candidate_window(c, omega);
    let lo = *window.start();
    let in_window = |i: usize| i >= lo && i <= c;

    let gold = forest.parent(c);
    let mut parent = BTreeSet::new();
    if in_window(gold) {
        parent.insert(gold);
    }

    let mut ancestors = BTreeSet::new();
    if gold != c {
        for a in forest.ancestors(gold) {
            if in_window(a) {
                ancestors.insert(a);
            }
        }
    }

    let labels = partition.labels();
    let own = labels[c];
    let mut same_session = BTreeSet::new();
    let mut other = BTreeSet::new();
    for i in lo..=c {
        if parent.contains(&i) || ancestors.contains(&i) {
            continue;
        }
        if labels[i] == own {
            same_session.insert(i);
        } else {
            other.insert(i);
        }
    }

    CandidateLevels {
        current: c,
        parent,
        ancestors,
        same_session,
        other,
    }
}

/// Result of parsing a raw IRC transcript with its annotation file.
#[derive(Debug, Clone)]
pub struct ParsedIrc {
    pub dialogue: Dialogue,
    pub forest: ReplyForest,
    /// Non-fatal anomalies, e.g. a child annotated with several parents.
    pub warnings: Vec<String>,
}

/// Parses raw IRC lines (`"[HH:MM] <nick> message"` or `"[HH:MM] * nick
/// action"`) together with `"child parent"` annotation lines. Children with
/// no annotation become self-links; a child annotated with several distinct
/// parents keeps the nearest (largest) one and a warning is recorded.
pub fn parse_irc(
    id: &str,
    raw_lines: &[&str],
    annotation_lines: &[&str],
) -> Result<ParsedIrc, CorpusError> {
    let mut utterances = Vec::with_capacity(raw_lines.len());
    for (lineno, line) in raw_lines.iter().enumerate() {
        let (timestamp, speaker, text) = parse_irc_line(line).map_err(|reason| {
            CorpusError::Parse {
                line: lineno + 1,
                reason,
            }
        })?;
        utterances.push(Utterance {
            index: utterances.len(),
            speaker,
            text,
            timestamp: Some(timestamp),
        });
    }
    let n = utterances.len();

    let mut parent: Vec<Option<usize>> = vec![None; n];
    let mut warnings = Vec::new();
    for (lineno, line) in annotation_lines.iter().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let (child, p) = match (it.next(), it.next()) {
            (Some(a), Some(b)) => {
                let child: usize = a.parse().map_err(|_| CorpusError::AnnotationOther {
                    line: lineno + 1,
                    reason: format!("expected integer child index, got {a:?}"),
                })?;
                let p: usize = b.parse().map_err(|_| CorpusError::AnnotationOther {
                    line: lineno + 1,
                    reason: format!("expected integer parent index, got {b:?}"),
                })?;
                (child, p)
            }
            _ => {
                return Err(CorpusError::AnnotationOther {
                    line: lineno + 1,
                    reason: "expected \"child parent\" integer pair".to_string(),
                })
            }
        };
        if p > child {
            return Err(CorpusError::Annotation {
                line: lineno + 1,
                child,
                parent: p,
            });
        }
        if child >= n {
            return Err(CorpusError::AnnotationOther {
                line: lineno + 1,
                reason: format!("child {child} out of range for {n} utterances"),
            });
        }
        match parent[child] {
            None => parent[child] = Some(p),
            Some(prev) if prev == p => {}
            Some(prev) => {
                let kept = prev.max(p);
                warnings.push(format!(
                    "child {child} annotated with parents {prev} and {p}; keeping nearest ({kept})"
                ));
                parent[child] = Some(kept);
            }
        }
    }

    let parent: Vec<usize> = parent
        .into_iter()
        .enumerate()
        .map(|(i, p)| p.unwrap_or(i))
        .collect();
    Ok(ParsedIrc {
        dialogue: Dialogue::new(id, utterances),
        forest: ReplyForest::from_parents(parent)?,
        warnings,
    })
}

fn parse_irc_line(line: &str) -> Result<(String, String, String), String> {
    let line = line.trim_end();
    let rest = line
        .strip_prefix('[')
        .ok_or_else(|| "missing [timestamp]".to_string())?;
    let close = rest
        .find(']')
        .ok_or_else(|| "unterminated [timestamp]".to_string())?;
    let timestamp = rest[..close].to_string();
    let body = rest[close + 1..].trim_start();

    if let Some(body) = body.strip_prefix('<') {
        let close = body
            .find('>')
            .ok_or_else(|| "unterminated <speaker> token".to_string())?;
        let speaker = body[..close].trim().to_string();
        if speaker.is_empty() {
            return Err("empty speaker token".to_string());
        }
        let text = body[close + 1..].trim_start().to_string();
        Ok((timestamp, speaker, text))
    } else if let Some(body) = body.strip_prefix('*') {
        // action line: the acting user is the speaker
        let body = body.trim_start();
        let mut it = body.splitn(2, char::is_whitespace);
        let speaker = it.next().unwrap_or("").to_string();
        if speaker.is_empty() {
            return Err("action line without speaker token".to_string());
        }
        let text = it.next().unwrap_or("").trim_start().to_string();
        Ok((timestamp, speaker, text))
    } else {
        Err("no speaker token (expected <nick> or * nick)".to_string())
    }
}

/// One line of the canonical JSONL schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CanonicalRecord {
    dialogue_id: String,
    index: usize,
    speaker: String,
    text: String,
    parent: Option<usize>,
    timestamp: Option<String>,
}

fn records_for(dialogue: &Dialogue, forest: Option<&ReplyForest>) -> Vec<CanonicalRecord> {
    dialogue
        .utterances()
        .iter()
        .map(|u| CanonicalRecord {
            dialogue_id: dialogue.id.clone(),
            index: u.index,
            speaker: u.speaker.clone(),
            text: u.text.clone(),
            parent: forest.map(|f| f.parent(u.index)),
            timestamp: u.timestamp.clone(),
        })
        .collect()
}

/// Serializes one dialogue (and optionally its forest) as canonical JSONL.
pub fn write_canonical(
    dialogue: &Dialogue,
    forest: Option<&ReplyForest>,
    path: impl AsRef<Path>,
) -> Result<(), CorpusError> {
    write_corpus(&[(dialogue.clone(), forest.cloned())], path)
}

/// Serializes several dialogues into one canonical JSONL file.
pub fn write_corpus(
    corpus: &[(Dialogue, Option<ReplyForest>)],
    path: impl AsRef<Path>,
) -> Result<(), CorpusError> {
    let mut out = BufWriter::new(File::create(path)?);
    for (dialogue, forest) in corpus {
        for rec in records_for(dialogue, forest.as_ref()) {
            let line = serde_json::to_string(&rec).expect("canonical record serializes");
            writeln!(out, "{line}")?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a single-dialogue canonical JSONL file.
///
/// The forest is present only when every record carries a parent; a file
/// with all-null parents yields `None`.
pub fn read_canonical(path: impl AsRef<Path>) -> Result<(Dialogue, Option<ReplyForest>), CorpusError> {
    let mut corpus = read_corpus(path)?;
    match corpus.len() {
        1 => Ok(corpus.pop().unwrap()),
        n => Err(CorpusError::Schema {
            record: 0,
            detail: format!("expected exactly one dialogue, found {n}"),
        }),
    }
}

/// Reads a canonical JSONL file holding one or more dialogues. Records of a
/// dialogue must be contiguous and indexed 0..n-1 in order.
pub fn read_corpus(
    path: impl AsRef<Path>,
) -> Result<Vec<(Dialogue, Option<ReplyForest>)>, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut corpus: Vec<(Dialogue, Option<ReplyForest>)> = Vec::new();
    let mut seen_ids: BTreeSet<String> = BTreeSet::new();

    let mut cur_id: Option<String> = None;
    let mut cur_utts: Vec<Utterance> = Vec::new();
    let mut cur_parents: Vec<Option<usize>> = Vec::new();
    let mut recno = 0usize;

    let mut flush = |id: Option<String>,
                     utts: &mut Vec<Utterance>,
                     parents: &mut Vec<Option<usize>>,
                     recno: usize|
     -> Result<(), CorpusError> {
        let Some(id) = id else { return Ok(()) };
        let n = utts.len();
        let with_parent = parents.iter().filter(|p| p.is_some()).count();
        let forest = if with_parent == 0 {
            None
        } else if with_parent == n {
            let ps: Vec<usize> = parents.iter().map(|p| p.unwrap()).collect();
            Some(ReplyForest::from_parents(ps)?)
        } else {
            return Err(CorpusError::Schema {
                record: recno,
                detail: format!(
                    "dialogue {id:?} mixes present and null \"parent\" fields ({with_parent} of {n})"
                ),
            });
        };
        corpus.push((Dialogue::new(id, std::mem::take(utts)), forest));
        parents.clear();
        Ok(())
    };

    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        recno += 1;
        let rec: CanonicalRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::Schema {
                record: recno,
                detail: e.to_string(),
            })?;
        if cur_id.as_deref() != Some(rec.dialogue_id.as_str()) {
            flush(cur_id.take(), &mut cur_utts, &mut cur_parents, recno - 1)?;
            if !seen_ids.insert(rec.dialogue_id.clone()) {
                return Err(CorpusError::Schema {
                    record: recno,
                    detail: format!(
                        "dialogue {:?} appears in two non-contiguous blocks",
                        rec.dialogue_id
                    ),
                });
            }
            cur_id = Some(rec.dialogue_id.clone());
        }
        if rec.index != cur_utts.len() {
            return Err(CorpusError::Schema {
                record: recno,
                detail: format!(
                    "field \"index\": expected {} (contiguous from 0), got {}",
                    cur_utts.len(),
                    rec.index
                ),
            });
        }
        if let Some(p) = rec.parent {
            if p > rec.index {
                return Err(CorpusError::Schema {
                    record: recno,
                    detail: format!(
                        "field \"parent\": {p} comes after child {}",
                        rec.index
                    ),
                });
            }
        }
        if rec.speaker.is_empty() {
            return Err(CorpusError::Schema {
                record: recno,
                detail: "field \"speaker\": must be non-empty".to_string(),
            });
        }
        cur_utts.push(Utterance {
            index: rec.index,
            speaker: rec.speaker,
            text: rec.text,
            timestamp: rec.timestamp,
        });
        cur_parents.push(rec.parent);
    }
    flush(cur_id.take(), &mut cur_utts, &mut cur_parents, recno)?;
    Ok(corpus)
}

/// Renders the forest-level disagreements between two annotations; used by
/// warning paths and debug tooling.
pub fn describe_forest(forest: &ReplyForest) -> String {
    let mut s = String::new();
    for c in 0..forest.len() {
        let _ = write!(s, "{}->{} ", c, forest.parent(c));
    }
    s.trim_end().to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn chain_lines() -> (Vec<&'static str>, Vec<&'static str>) {
        (
            vec![
                "[10:01] <ana> is the mirror down again",
                "[10:02] <bo> ana: works for me",
                "[10:02] * cem shrugs",
            ],
            vec!["0 0", "1 0", "2 1"],
        )
    }

    #[test]
    fn parse_irc_chain() {
        let (raw, ann) = chain_lines();
        let parsed = parse_irc("d0", &raw, &ann).unwrap();
        assert_eq!(parsed.dialogue.len(), 3);
        assert_eq!(parsed.dialogue.utterance(0).speaker, "ana");
        assert_eq!(parsed.dialogue.utterance(2).speaker, "cem");
        assert_eq!(parsed.dialogue.utterance(2).text, "shrugs");
        assert_eq!(parsed.forest.parents(), &[0, 0, 1]);
        assert!(parsed.warnings.is_empty());
    }

    #[test]
    fn parse_irc_rejects_parent_after_child() {
        let raw = vec![
            "[10:01] <ana> one",
            "[10:02] <bo> two",
            "[10:03] <cem> three",
        ];
        let err = parse_irc("d0", &raw, &["2 5"]).unwrap_err();
        match err {
            CorpusError::Annotation { child, parent, .. } => {
                assert_eq!((child, parent), (2, 5));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn parse_irc_rejects_missing_speaker() {
        let err = parse_irc("d0", &["[10:01] no speaker here"], &[]).unwrap_err();
        match err {
            CorpusError::Parse { line, reason } => {
                assert_eq!(line, 1);
                assert!(reason.contains("speaker"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn duplicate_parents_keep_nearest() {
        let raw = vec![
            "[1] <a> u0",
            "[2] <b> u1",
            "[3] <c> u2",
            "[4] <d> u3",
            "[5] <e> u4",
        ];
        let ann = vec!["4 2", "4 3"];
        let parsed = parse_irc("d0", &raw, &ann).unwrap();
        assert_eq!(parsed.forest.parent(4), 3);
        assert_eq!(parsed.warnings.len(), 1);
        assert!(parsed.warnings[0].contains("child 4"));

        // the component structure is the same whichever parent is kept:
        // 2, 3, 4 all join the root component of their chain only via 4's
        // link, and 2 and 3 are separate roots either way
        let sessions = derive_sessions(&parsed.forest);
        let labels = sessions.labels();
        assert_eq!(labels[4], labels[3]);
        assert_ne!(labels[2], labels[3]);
    }

    #[test]
    fn unannotated_lines_become_self_links() {
        let raw = vec!["[1] <a> u0", "[2] <b> u1"];
        let parsed = parse_irc("d0", &raw, &[]).unwrap();
        assert_eq!(parsed.forest.parents(), &[0, 1]);
    }

    #[test]
    fn derive_sessions_two_components() {
        let forest = ReplyForest::from_parents(vec![0, 0, 2, 2]).unwrap();
        let sessions = derive_sessions(&forest);
        assert_eq!(sessions.clusters(), &[vec![0, 1], vec![2, 3]]);
    }

    #[test]
    fn derive_sessions_all_roots() {
        let forest = ReplyForest::all_roots(4);
        let sessions = derive_sessions(&forest);
        assert_eq!(sessions.num_clusters(), 4);
        assert!(sessions.clusters().iter().all(|c| c.len() == 1));
    }

    // independent union-find oracle
    fn union_find_clusters(parents: &[usize]) -> Vec<Vec<usize>> {
        let n = parents.len();
        let mut uf: Vec<usize> = (0..n).collect();
        fn find(uf: &mut Vec<usize>, i: usize) -> usize {
            if uf[i] != i {
                let r = find(uf, uf[i]);
                uf[i] = r;
            }
            uf[i]
        }
        for (c, &p) in parents.iter().enumerate() {
            let (a, b) = (find(&mut uf, c), find(&mut uf, p));
            if a != b {
                uf[a] = b;
            }
        }
        let mut map: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for i in 0..n {
            let r = find(&mut uf, i);
            map.entry(r).or_default().push(i);
        }
        let mut out: Vec<Vec<usize>> = map.into_values().collect();
        out.sort_by_key(|c| c[0]);
        out
    }

    fn random_forest(n: usize, rng: &mut impl rand::Rng) -> ReplyForest {
        let parents: Vec<usize> = (0..n).map(|c| rng.gen_range(0..=c)).collect();
        ReplyForest::from_parents(parents).unwrap()
    }

    #[test]
    fn derive_sessions_matches_union_find() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let n = rng.gen_range(1..=10);
            let forest = random_forest(n, &mut rng);
            let sessions = derive_sessions(&forest);
            assert_eq!(sessions.clusters(), &union_find_clusters(forest.parents())[..]);
            let roots = forest.parents().iter().enumerate().filter(|&(c, &p)| c == p).count();
            assert_eq!(sessions.num_clusters(), roots);
        }
    }

    #[test]
    fn candidate_levels_fig_configuration() {
        // current 5 with gold parent 3; 0 and 1 are ancestors, 4 shares the
        // session, 2 sits in its own session
        let forest = ReplyForest::from_parents(vec![0, 0, 2, 1, 3, 3]).unwrap();
        let sessions = derive_sessions(&forest);
        let lv = candidate_levels(5, &forest, &sessions, 10);
        assert_eq!(lv.parent, BTreeSet::from([3]));
        assert_eq!(lv.ancestors, BTreeSet::from([0, 1]));
        assert_eq!(lv.same_session, BTreeSet::from([4, 5]));
        assert_eq!(lv.other, BTreeSet::from([2]));
        // a wrong prediction inside the session is still the same cluster
        let labels = sessions.labels();
        for wrong in [0, 1, 4] {
            assert_eq!(labels[wrong], labels[5]);
        }
    }

    #[test]
    fn candidate_levels_session_start() {
        let forest = ReplyForest::from_parents(vec![0, 0, 2]).unwrap();
        let sessions = derive_sessions(&forest);
        let lv = candidate_levels(2, &forest, &sessions, 10);
        assert_eq!(lv.parent, BTreeSet::from([2]));
        assert!(lv.ancestors.is_empty());
    }

    #[test]
    fn candidate_levels_chain_walk() {
        // chain 0<-1<-2<-3 with c=3; the second session {4} is after c and
        // thus absent from the window
        let forest = ReplyForest::from_parents(vec![0, 0, 1, 2, 4]).unwrap();
        let sessions = derive_sessions(&forest);
        let lv = candidate_levels(3, &forest, &sessions, 10);
        assert_eq!(lv.parent, BTreeSet::from([2]));
        assert_eq!(lv.ancestors, BTreeSet::from([0, 1]));
        assert_eq!(lv.same_session, BTreeSet::from([3]));
        assert!(lv.other.is_empty());
    }

    #[test]
    fn levels_partition_window_exhaustively() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.gen_range(1..=30);
            let forest = random_forest(n, &mut rng);
            let sessions = derive_sessions(&forest);
            let omega = rng.gen_range(1..=12);
            for c in 0..n {
                let lv = candidate_levels(c, &forest, &sessions, omega);
                let expected: BTreeSet<usize> = candidate_window(c, omega).collect();
                assert_eq!(lv.all(), expected);
                let total = lv.parent.len() + lv.ancestors.len() + lv.same_session.len() + lv.other.len();
                assert_eq!(total, expected.len(), "levels overlap at c={c}");
            }
        }
    }

    #[test]
    fn canonical_round_trip() {
        let (raw, ann) = chain_lines();
        let parsed = parse_irc("d0", &raw, &ann).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d0.jsonl");
        write_canonical(&parsed.dialogue, Some(&parsed.forest), &path).unwrap();
        let (dialogue, forest) = read_canonical(&path).unwrap();
        assert_eq!(dialogue, parsed.dialogue);
        assert_eq!(forest.as_ref(), Some(&parsed.forest));
    }

    #[test]
    fn canonical_forest_omitted() {
        let (raw, ann) = chain_lines();
        let parsed = parse_irc("d0", &raw, &ann).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d0.jsonl");
        write_canonical(&parsed.dialogue, None, &path).unwrap();
        let (dialogue, forest) = read_canonical(&path).unwrap();
        assert_eq!(dialogue, parsed.dialogue);
        assert!(forest.is_none());
    }

    #[test]
    fn canonical_missing_speaker_names_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"dialogue_id\":\"d\",\"index\":0,\"text\":\"x\",\"parent\":null,\"timestamp\":null}\n",
        )
        .unwrap();
        let err = read_corpus(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("speaker"), "error should name the field: {msg}");
        assert!(msg.contains("record 1"), "error should name the record: {msg}");
    }
}
