//! Cluster- and link-level evaluation of predicted reply forests.
//!
//! Cluster metrics compare session partitions (scaled variation of
//! information, adjusted Rand index, normalized mutual information,
//! optimal one-to-one matching, windowed local agreement, Shen's F, exact
//! cluster match, and size-bucketed partial ARI); the link metric compares
//! reply pairs exactly.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{derive_sessions, ReplyForest, SessionPartition};

/// Intersection counts between gold clusters (rows) and predicted clusters
/// (columns), with marginals derived from the table itself.
#[derive(Debug, Clone, PartialEq)]
pub struct ContingencyTable {
    pub counts: Vec<Vec<usize>>,
    pub row_sums: Vec<usize>,
    pub col_sums: Vec<usize>,
    pub n: usize,
}

impl ContingencyTable {
    pub fn new(gold: &SessionPartition, pred: &SessionPartition) -> Self {
        assert_eq!(gold.n(), pred.n(), "partitions cover different sets");
        let gold_sets: Vec<BTreeSet<usize>> = gold
            .clusters()
            .iter()
            .map(|c| c.iter().copied().collect())
            .collect();
        let pred_sets: Vec<BTreeSet<usize>> = pred
            .clusters()
            .iter()
            .map(|c| c.iter().copied().collect())
            .collect();
        Self::from_cluster_sets(&gold_sets, &pred_sets)
    }

    /// Builds the table from arbitrary (not necessarily covering) disjoint
    /// cluster families; marginals and `n` come from the table.
    pub fn from_cluster_sets(gold: &[BTreeSet<usize>], pred: &[BTreeSet<usize>]) -> Self {
        let counts: Vec<Vec<usize>> = gold
            .iter()
            .map(|g| pred.iter().map(|p| g.intersection(p).count()).collect())
            .collect();
        let row_sums: Vec<usize> = counts.iter().map(|r| r.iter().sum()).collect();
        let col_sums: Vec<usize> = (0..pred.len())
            .map(|j| counts.iter().map(|r| r[j]).sum())
            .collect();
        let n = row_sums.iter().sum();
        ContingencyTable {
            counts,
            row_sums,
            col_sums,
            n,
        }
    }

    fn entropy(sums: &[usize], n: usize) -> f64 {
        if n == 0 {
            return 0.0;
        }
        let nf = n as f64;
        -sums
            .iter()
            .filter(|&&s| s > 0)
            .map(|&s| {
                let p = s as f64 / nf;
                p * p.ln()
            })
            .sum::<f64>()
    }

    pub fn gold_entropy(&self) -> f64 {
        Self::entropy(&self.row_sums, self.n)
    }

    pub fn pred_entropy(&self) -> f64 {
        Self::entropy(&self.col_sums, self.n)
    }

    pub fn joint_entropy(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        let nf = self.n as f64;
        -self
            .counts
            .iter()
            .flatten()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / nf;
                p * p.ln()
            })
            .sum::<f64>()
    }

    pub fn mutual_information(&self) -> f64 {
        self.gold_entropy() + self.pred_entropy() - self.joint_entropy()
    }
}

fn comb2(x: usize) -> f64 {
    (x as f64) * (x as f64 - 1.0) / 2.0
}

fn ari_from_table(t: &ContingencyTable) -> f64 {
    let index: f64 = t.counts.iter().flatten().map(|&c| comb2(c)).sum();
    let a: f64 = t.row_sums.iter().map(|&s| comb2(s)).sum();
    let b: f64 = t.col_sums.iter().map(|&s| comb2(s)).sum();
    let total = comb2(t.n);
    if total == 0.0 {
        return 1.0;
    }
    // scaled by `total` so small cases stay exact in floating point
    let numerator = index * total - a * b;
    let denominator = 0.5 * (a + b) * total - a * b;
    if denominator.abs() < 1e-9 {
        // only identical trivial partitions land here
        return 1.0;
    }
    numerator / denominator
}

/// Adjusted Rand index in [-0.5, 1].
pub fn ari(gold: &SessionPartition, pred: &SessionPartition) -> f64 {
    ari_from_table(&ContingencyTable::new(gold, pred))
}

/// `1 − VI/ln n` with `VI = 2H(X,Y) − H(X) − H(Y)`; 1.0 for n ≤ 1.
pub fn scaled_vi(gold: &SessionPartition, pred: &SessionPartition) -> f64 {
    let t = ContingencyTable::new(gold, pred);
    if t.n <= 1 {
        return 1.0;
    }
    let vi = 2.0 * t.joint_entropy() - t.gold_entropy() - t.pred_entropy();
    1.0 - vi / (t.n as f64).ln()
}

/// `2I/(H(X)+H(Y))`, defined as 0 when either partition is trivial.
pub fn nmi(gold: &SessionPartition, pred: &SessionPartition) -> f64 {
    let t = ContingencyTable::new(gold, pred);
    let (hg, hp) = (t.gold_entropy(), t.pred_entropy());
    if hg == 0.0 || hp == 0.0 {
        return 0.0;
    }
    2.0 * t.mutual_information() / (hg + hp)
}

/// Maximum-weight one-to-one cluster matching, as summed overlap over n.
pub fn one_to_one(gold: &SessionPartition, pred: &SessionPartition) -> f64 {
    let t = ContingencyTable::new(gold, pred);
    if t.n == 0 {
        return 1.0;
    }
    let weights: Vec<Vec<f64>> = t
        .counts
        .iter()
        .map(|r| r.iter().map(|&c| c as f64).collect())
        .collect();
    max_weight_assignment(&weights) / t.n as f64
}

/// Maximum total weight of a one-to-one row/column matching (rectangular
/// matrices are padded with zero weight). Classic O(n³) potentials method.
pub fn max_weight_assignment(weights: &[Vec<f64>]) -> f64 {
    let rows = weights.len();
    if rows == 0 {
        return 0.0;
    }
    let cols = weights[0].len();
    if cols == 0 {
        return 0.0;
    }
    let n = rows.max(cols);
    // minimize cost = -weight over a padded square matrix; 1-indexed arrays
    let cost = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            -weights[i][j]
        } else {
            0.0
        }
    };
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1]; // matched_row[j] = row assigned to column j
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut total = 0.0;
    for j in 1..=n {
        let i = matched_row[j];
        if i >= 1 {
            total -= cost(i - 1, j - 1);
        }
    }
    total
}

/// Agreement between predicted and gold same-cluster indicators over the
/// previous `k` utterances.
pub fn local_k(gold: &SessionPartition, pred: &SessionPartition, k: usize) -> f64 {
    assert_eq!(gold.n(), pred.n(), "partitions cover different sets");
    let n = gold.n();
    let (gl, pl) = (gold.labels(), pred.labels());
    let mut agree = 0usize;
    let mut total = 0usize;
    for i in 0..n {
        for j in 1..=k {
            if j > i {
                break;
            }
            total += 1;
            let g_same = gl[i] == gl[i - j];
            let p_same = pl[i] == pl[i - j];
            if g_same == p_same {
                agree += 1;
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        agree as f64 / total as f64
    }
}

/// Shen's cluster alignment score variants. The harmonic-mean form is the
/// default; the squared-numerator form matches a widely circulated but
/// inconsistent rendering and is kept behind this switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ShenVariant {
    #[default]
    HarmonicMean,
    SquaredNumerator,
}

/// `Σ_i (n_i/n) · max_j 2·n_ij/(n_i + n_j)` over gold clusters i and
/// predicted clusters j.
pub fn shen_f(gold: &SessionPartition, pred: &SessionPartition) -> f64 {
    shen_f_variant(gold, pred, ShenVariant::HarmonicMean)
}

pub fn shen_f_variant(
    gold: &SessionPartition,
    pred: &SessionPartition,
    variant: ShenVariant,
) -> f64 {
    let t = ContingencyTable::new(gold, pred);
    if t.n == 0 {
        return 1.0;
    }
    let mut total = 0.0;
    for (i, row) in t.counts.iter().enumerate() {
        let ni = t.row_sums[i] as f64;
        let best = row
            .iter()
            .enumerate()
            .map(|(j, &nij)| {
                let nj = t.col_sums[j] as f64;
                let num = match variant {
                    ShenVariant::HarmonicMean => 2.0 * nij as f64,
                    ShenVariant::SquaredNumerator => 2.0 * (nij * nij) as f64,
                };
                num / (ni + nj)
            })
            .fold(0.0, f64::max);
        total += ni / t.n as f64 * best;
    }
    total
}

/// Precision/recall/F1 triple; `f1 = 2PR/(P+R)` whenever `P+R > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_counts(tp: usize, pred_total: usize, gold_total: usize) -> Self {
        if pred_total == 0 && gold_total == 0 {
            return Prf {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
            };
        }
        let p = if pred_total == 0 {
            0.0
        } else {
            tp as f64 / pred_total as f64
        };
        let r = if gold_total == 0 {
            0.0
        } else {
            tp as f64 / gold_total as f64
        };
        Prf::from_pr(p, r)
    }

    fn from_pr(p: f64, r: f64) -> Self {
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        Prf {
            precision: p,
            recall: r,
            f1,
        }
    }
}

fn cluster_match_counts(gold: &SessionPartition, pred: &SessionPartition) -> (usize, usize, usize) {
    let gold_sets: BTreeSet<Vec<usize>> = gold.clusters().iter().cloned().collect();
    let pred_sets: BTreeSet<Vec<usize>> = pred.clusters().iter().cloned().collect();
    let tp = gold_sets.intersection(&pred_sets).count();
    (tp, pred_sets.len(), gold_sets.len())
}

/// Exact cluster match: a predicted cluster scores iff it is identical to a
/// gold cluster.
pub fn exact_clusters(gold: &SessionPartition, pred: &SessionPartition) -> Prf {
    let (tp, pred_total, gold_total) = cluster_match_counts(gold, pred);
    Prf::from_counts(tp, pred_total, gold_total)
}

fn link_pairs(forest: &ReplyForest, include_self: bool) -> BTreeSet<(usize, usize)> {
    (0..forest.len())
        .map(|c| (c, forest.parent(c)))
        .filter(|&(c, p)| include_self || c != p)
        .collect()
}

fn link_match_counts(
    gold: &ReplyForest,
    pred: &ReplyForest,
    include_self: bool,
) -> (usize, usize, usize) {
    let g = link_pairs(gold, include_self);
    let p = link_pairs(pred, include_self);
    (g.intersection(&p).count(), p.len(), g.len())
}

/// Exact reply-pair match. Self-links are excluded unless `include_self`;
/// with the flag on a self-link counts only when both forests mark it.
pub fn exact_links(gold: &ReplyForest, pred: &ReplyForest, include_self: bool) -> Prf {
    assert_eq!(gold.len(), pred.len(), "forests cover different sets");
    let (tp, pred_total, gold_total) = link_match_counts(gold, pred, include_self);
    Prf::from_counts(tp, pred_total, gold_total)
}

/// Inclusive size range of gold clusters, e.g. 1-4 or 20+.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeBucket {
    pub lo: usize,
    pub hi: Option<usize>,
}

impl SizeBucket {
    pub fn contains(&self, size: usize) -> bool {
        size >= self.lo && self.hi.map_or(true, |h| size <= h)
    }

    pub fn label(&self) -> String {
        match self.hi {
            Some(h) if h == self.lo => format!("{}", self.lo),
            Some(h) => format!("{}-{}", self.lo, h),
            None => format!("{}+", self.lo),
        }
    }
}

pub fn default_buckets() -> Vec<SizeBucket> {
    vec![
        SizeBucket { lo: 1, hi: Some(4) },
        SizeBucket { lo: 5, hi: Some(9) },
        SizeBucket { lo: 10, hi: Some(19) },
        SizeBucket { lo: 20, hi: None },
    ]
}

/// ARI restricted to the gold clusters of each size bucket and the predicted
/// clusters overlapping them; buckets with no gold clusters are absent.
pub fn partial_ari(
    gold: &SessionPartition,
    pred: &SessionPartition,
    buckets: &[SizeBucket],
) -> BTreeMap<String, f64> {
    assert_eq!(gold.n(), pred.n(), "partitions cover different sets");
    let pred_sets: Vec<BTreeSet<usize>> = pred
        .clusters()
        .iter()
        .map(|c| c.iter().copied().collect())
        .collect();
    let mut out = BTreeMap::new();
    for bucket in buckets {
        let selected: Vec<BTreeSet<usize>> = gold
            .clusters()
            .iter()
            .filter(|c| bucket.contains(c.len()))
            .map(|c| c.iter().copied().collect())
            .collect();
        if selected.is_empty() {
            continue;
        }
        let covered: BTreeSet<usize> = selected.iter().flatten().copied().collect();
        let overlapping: Vec<BTreeSet<usize>> = pred_sets
            .iter()
            .filter(|p| p.iter().any(|e| covered.contains(e)))
            .cloned()
            .collect();
        let table = ContingencyTable::from_cluster_sets(&selected, &overlapping);
        out.insert(bucket.label(), ari_from_table(&table));
    }
    out
}

/// Micro pools contingency/link counts across dialogues; macro averages the
/// per-dialogue scores (macro F1 recombines averaged P and R).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Micro,
    Macro,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub include_self_links: bool,
    pub aggregation: Aggregation,
    pub local_k: usize,
    pub buckets: Vec<SizeBucket>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            include_self_links: false,
            aggregation: Aggregation::Micro,
            local_k: 3,
            buckets: default_buckets(),
        }
    }
}

/// The full metric suite for one gold/predicted comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scaled_vi: f64,
    pub ari: f64,
    pub nmi: f64,
    pub one_to_one: f64,
    pub local_3: f64,
    pub shen_f: f64,
    pub cluster: Prf,
    pub link: Prf,
    pub partial_ari: BTreeMap<String, f64>,
    pub aggregation: Aggregation,
}

impl MetricReport {
    /// Aligned plain-text table.
    pub fn table(&self) -> String {
        let mut rows: Vec<(String, String)> = vec![
            ("1-VI".into(), format!("{:.4}", self.scaled_vi)),
            ("ARI".into(), format!("{:.4}", self.ari)),
            ("NMI".into(), format!("{:.4}", self.nmi)),
            ("1-1".into(), format!("{:.4}", self.one_to_one)),
            ("Local_3".into(), format!("{:.4}", self.local_3)),
            ("Shen-F".into(), format!("{:.4}", self.shen_f)),
            ("Cluster P".into(), format!("{:.4}", self.cluster.precision)),
            ("Cluster R".into(), format!("{:.4}", self.cluster.recall)),
            ("Cluster F1".into(), format!("{:.4}", self.cluster.f1)),
            ("Link P".into(), format!("{:.4}", self.link.precision)),
            ("Link R".into(), format!("{:.4}", self.link.recall)),
            ("Link F1".into(), format!("{:.4}", self.link.f1)),
        ];
        for (k, v) in &self.partial_ari {
            rows.push((format!("Par-ARI {k}"), format!("{v:.4}")));
        }
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        rows.iter()
            .map(|(k, v)| format!("{k:<width$}  {v}\n"))
            .collect()
    }
}

/// Evaluates one forest pair.
pub fn evaluate_forests(gold: &ReplyForest, pred: &ReplyForest, opts: &EvalOptions) -> MetricReport {
    assert_eq!(gold.len(), pred.len(), "forests cover different sets");
    let g = derive_sessions(gold);
    let p = derive_sessions(pred);
    MetricReport {
        scaled_vi: scaled_vi(&g, &p),
        ari: ari(&g, &p),
        nmi: nmi(&g, &p),
        one_to_one: one_to_one(&g, &p),
        local_3: local_k(&g, &p, opts.local_k),
        shen_f: shen_f(&g, &p),
        cluster: exact_clusters(&g, &p),
        link: exact_links(gold, pred, opts.include_self_links),
        partial_ari: partial_ari(&g, &p, &opts.buckets),
        aggregation: opts.aggregation,
    }
}

/// Corpus evaluation over aligned forest lists.
pub fn evaluate_corpus(
    golds: &[ReplyForest],
    preds: &[ReplyForest],
    opts: &EvalOptions,
) -> MetricReport {
    assert_eq!(golds.len(), preds.len(), "corpus size mismatch");
    assert!(!golds.is_empty(), "empty corpus");
    match opts.aggregation {
        Aggregation::Micro => {
            // merge into one big partition pair with offset indices
            let mut gold_clusters: Vec<Vec<usize>> = Vec::new();
            let mut pred_clusters: Vec<Vec<usize>> = Vec::new();
            let mut offset = 0usize;
            let (mut link_tp, mut link_p, mut link_g) = (0usize, 0usize, 0usize);
            let (mut cl_tp, mut cl_p, mut cl_g) = (0usize, 0usize, 0usize);
            for (gold, pred) in golds.iter().zip(preds) {
                assert_eq!(gold.len(), pred.len(), "forest length mismatch");
                let gp = derive_sessions(gold);
                let pp = derive_sessions(pred);
                for c in gp.clusters() {
                    gold_clusters.push(c.iter().map(|&i| i + offset).collect());
                }
                for c in pp.clusters() {
                    pred_clusters.push(c.iter().map(|&i| i + offset).collect());
                }
                let (tp, pt, gt) = link_match_counts(gold, pred, opts.include_self_links);
                link_tp += tp;
                link_p += pt;
                link_g += gt;
                let (tp, pt, gt) = cluster_match_counts(&gp, &pp);
                cl_tp += tp;
                cl_p += pt;
                cl_g += gt;
                offset += gold.len();
            }
            let g = SessionPartition::from_clusters(gold_clusters).expect("disjoint by offset");
            let p = SessionPartition::from_clusters(pred_clusters).expect("disjoint by offset");
            MetricReport {
                scaled_vi: scaled_vi(&g, &p),
                ari: ari(&g, &p),
                nmi: nmi(&g, &p),
                one_to_one: one_to_one(&g, &p),
                local_3: local_k(&g, &p, opts.local_k),
                shen_f: shen_f(&g, &p),
                cluster: Prf::from_counts(cl_tp, cl_p, cl_g),
                link: Prf::from_counts(link_tp, link_p, link_g),
                partial_ari: partial_ari(&g, &p, &opts.buckets),
                aggregation: Aggregation::Micro,
            }
        }
        Aggregation::Macro => {
            let reports: Vec<MetricReport> = golds
                .iter()
                .zip(preds)
                .map(|(g, p)| evaluate_forests(g, p, opts))
                .collect();
            let k = reports.len() as f64;
            let mean = |f: &dyn Fn(&MetricReport) -> f64| {
                reports.iter().map(|r| f(r)).sum::<f64>() / k
            };
            let mut buckets: BTreeMap<String, (f64, usize)> = BTreeMap::new();
            for r in &reports {
                for (label, v) in &r.partial_ari {
                    let e = buckets.entry(label.clone()).or_insert((0.0, 0));
                    e.0 += v;
                    e.1 += 1;
                }
            }
            MetricReport {
                scaled_vi: mean(&|r| r.scaled_vi),
                ari: mean(&|r| r.ari),
                nmi: mean(&|r| r.nmi),
                one_to_one: mean(&|r| r.one_to_one),
                local_3: mean(&|r| r.local_3),
                shen_f: mean(&|r| r.shen_f),
                cluster: Prf::from_pr(
                    mean(&|r| r.cluster.precision),
                    mean(&|r| r.cluster.recall),
                ),
                link: Prf::from_pr(mean(&|r| r.link.precision), mean(&|r| r.link.recall)),
                partial_ari: buckets
                    .into_iter()
                    .map(|(k, (sum, cnt))| (k, sum / cnt as f64))
                    .collect(),
                aggregation: Aggregation::Macro,
            }
        }
    }
}

/// Per-dialogue reports for external analysis.
pub fn evaluate_each(
    golds: &[ReplyForest],
    preds: &[ReplyForest],
    opts: &EvalOptions,
) -> Vec<MetricReport> {
    golds
        .iter()
        .zip(preds)
        .map(|(g, p)| evaluate_forests(g, p, opts))
        .collect()
}
