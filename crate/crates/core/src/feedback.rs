//! Feedback propagation: exemplar selection, precision/recall sweeps, the
//! force multiplier, and the non-neural baselines.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Category, Task, CORRECT, INCORRECT};
use crate::dsl::{Ast, CanonicalId, NodeKind};
use crate::numcore::rng;

#[derive(Debug, Error, PartialEq)]
pub enum FeedbackError {
    #[error("asked for {k} items from {n}")]
    TooMany { k: usize, n: usize },
    #[error("unknown selection strategy `{0}`")]
    UnknownStrategy(String),
}

pub const TARGET_PRECISION: f64 = 0.9;
pub const KMEANS_MAX_ITERS: usize = 100;
pub const COMPLEXITY_BINS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    KmeansCentroids,
    RandomUniform,
    MostCommon,
}

impl fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionStrategy::KmeansCentroids => "kmeans_centroids",
            SelectionStrategy::RandomUniform => "random_uniform",
            SelectionStrategy::MostCommon => "most_common",
        })
    }
}

impl FromStr for SelectionStrategy {
    type Err = FeedbackError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "kmeans_centroids" | "kmeans" => Ok(SelectionStrategy::KmeansCentroids),
            "random_uniform" | "random" => Ok(SelectionStrategy::RandomUniform),
            "most_common" => Ok(SelectionStrategy::MostCommon),
            other => Err(FeedbackError::UnknownStrategy(other.to_string())),
        }
    }
}

// ---- k-means -------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    /// Per cluster, the index of the member nearest the cluster mean.
    pub centroids: Vec<usize>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances to the means after each assignment step.
    pub objective: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(p, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding and Lloyd iterations until the assignment is a fixed
/// point or the iteration cap is reached. Empty clusters take the point
/// farthest from its mean (from a cluster with more than one member).
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeans, FeedbackError> {
    let n = points.len();
    if k > n || k == 0 {
        return Err(FeedbackError::TooMany { k, n });
    }
    let mut r = rng(seed);
    let mut chosen = vec![r.gen_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut x = r.gen_range(0.0..total);
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if x < d {
                    pick = i;
                    break;
                }
                x -= d;
            }
            pick
        } else {
            // All remaining points coincide with a chosen one.
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[r.gen_range(0..free.len())]
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &points[next]));
        }
    }
    let mut centers: Vec<Vec<f64>> = chosen.iter().map(|&i| points[i].clone()).collect();
    let mut assignments: Vec<usize> = Vec::new();
    let mut objective = Vec::new();
    for _ in 0..KMEANS_MAX_ITERS {
        let mut next: Vec<usize> = Vec::with_capacity(n);
        let mut dist: Vec<f64> = Vec::with_capacity(n);
        for p in points {
            let (c, d) = nearest(p, &centers);
            next.push(c);
            dist.push(d);
        }
        let mut sizes = vec![0usize; k];
        for &c in &next {
            sizes[c] += 1;
        }
        for empty in 0..k {
            if sizes[empty] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| sizes[next[i]] > 1)
                .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                .expect("k <= n leaves a multi-member cluster");
            sizes[next[far]] -= 1;
            next[far] = empty;
            sizes[empty] = 1;
            dist[far] = 0.0;
            centers[empty] = points[far].clone();
        }
        let converged = next == assignments;
        assignments = next;
        objective.push(
            points
                .iter()
                .zip(&assignments)
                .map(|(p, &c)| sq_dist(p, &centers[c]))
                .sum(),
        );
        // Update means.
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        for (p, &c) in points.iter().zip(&assignments) {
            for (s, x) in sums[c].iter_mut().zip(p) {
                *s += x;
            }
        }
        for (c, s) in sums.into_iter().enumerate() {
            centers[c] = s.into_iter().map(|x| x / sizes[c] as f64).collect();
        }
        if converged {
            break;
        }
    }
    let centroids = (0..k)
        .map(|c| {
            (0..n)
                .filter(|&i| assignments[i] == c)
                .min_by(|&a, &b| {
                    sq_dist(&points[a], &centers[c])
                        .total_cmp(&sq_dist(&points[b], &centers[c]))
                        .then(a.cmp(&b))
                })
                .expect("clusters are non-empty")
        })
        .collect();
    Ok(KMeans { centroids, assignments, objective })
}

/// Indices of the `k` programs to annotate.
pub fn select_exemplars(
    frequencies: &[u64],
    embeddings: &[Vec<f64>],
    k: usize,
    strategy: SelectionStrategy,
    seed: u64,
) -> Result<Vec<usize>, FeedbackError> {
    let n = frequencies.len();
    if k > n {
        return Err(FeedbackError::TooMany { k, n });
    }
    Ok(match strategy {
        SelectionStrategy::KmeansCentroids => {
            if k == 0 {
                Vec::new()
            } else {
                kmeans(embeddings, k, seed)?.centroids
            }
        }
        SelectionStrategy::RandomUniform => sample(&mut rng(seed), n, k).into_vec(),
        SelectionStrategy::MostCommon => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| frequencies[b].cmp(&frequencies[a]));
            order.truncate(k);
            order
        }
    })
}

// ---- precision / recall ------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Points of a threshold sweep, thresholds strictly increasing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
}

impl PrCurve {
    /// Best recall among operating points meeting the precision target;
    /// None when no threshold reaches it.
    pub fn recall_at(&self, precision: f64) -> Option<f64> {
        self.best_point(precision).map(|p| p.recall)
    }

    fn best_point(&self, precision: f64) -> Option<&PrPoint> {
        self.points
            .iter()
            .filter(|p| p.precision >= precision)
            .max_by(|a, b| a.recall.total_cmp(&b.recall).then(b.threshold.total_cmp(&a.threshold)))
    }

    /// Threshold of the best operating point at the target precision.
    pub fn threshold_at(&self, precision: f64) -> Option<f64> {
        self.best_point(precision).map(|p| p.threshold)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Pool every (program, label) pair.
    #[default]
    Micro,
    /// Average precision and recall over labels.
    Macro,
}

/// Sweeps one global threshold over every distinct probability. A pair is
/// asserted iff `p ≥ τ`; counts are weighted by program frequency.
pub fn pr_sweep(probs: &[Vec<f64>], truth: &[Vec<bool>], weights: &[u64], averaging: Averaging) -> PrCurve {
    let mut thresholds: Vec<f64> = probs.iter().flatten().copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let labels = probs.first().map_or(0, Vec::len);
    // Pairs sorted by descending probability.
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, row) in probs.iter().enumerate() {
        for (l, &p) in row.iter().enumerate() {
            pairs.push((p, i, l));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut positives = vec![0.0; labels];
    for (row, &w) in truth.iter().zip(weights) {
        for (l, &y) in row.iter().enumerate() {
            if y {
                positives[l] += w as f64;
            }
        }
    }
    let total_pos: f64 = positives.iter().sum();
    let mut asserted = vec![0.0; labels];
    let mut hits = vec![0.0; labels];
    let mut points = Vec::with_capacity(thresholds.len());
    let mut j = 0;
    for &tau in thresholds.iter().rev() {
        while j < pairs.len() && pairs[j].0 >= tau {
            let (_, i, l) = pairs[j];
            let w = weights[i] as f64;
            asserted[l] += w;
            if truth[i][l] {
                hits[l] += w;
            }
            j += 1;
        }
        let (precision, recall) = match averaging {
            Averaging::Micro => {
                let a: f64 = asserted.iter().sum();
                let h: f64 = hits.iter().sum();
                (if a > 0.0 { h / a } else { 1.0 }, if total_pos > 0.0 { h / total_pos } else { 0.0 })
            }
            Averaging::Macro => {
                let prec: Vec<f64> = (0..labels).filter(|&l| asserted[l] > 0.0).map(|l| hits[l] / asserted[l]).collect();
                let rec: Vec<f64> = (0..labels).filter(|&l| positives[l] > 0.0).map(|l| hits[l] / positives[l]).collect();
                let mean = |v: &[f64], empty: f64| if v.is_empty() { empty } else { v.iter().sum::<f64>() / v.len() as f64 };
                (mean(&prec, 1.0), mean(&rec, 0.0))
            }
        };
        points.push(PrPoint { threshold: tau, precision, recall });
    }
    points.reverse();
    PrCurve { points }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Propagation {
    pub curve: PrCurve,
    /// Recall at the target precision; 0 when unreachable.
    pub recall: f64,
    pub reached_target: bool,
    pub force_multiplier: f64,
}

/// Micro-averaged sweep plus the force multiplier: frequency mass of
/// programs receiving at least one label at the target operating point,
/// divided by the exemplar frequency mass.
pub fn propagate_and_sweep(
    probs: &[Vec<f64>],
    truth: &[Vec<bool>],
    weights: &[u64],
    exemplar_mass: u64,
    averaging: Averaging,
) -> Propagation {
    let curve = pr_sweep(probs, truth, weights, averaging);
    let tau = curve.threshold_at(TARGET_PRECISION);
    let reached = tau.is_some();
    let covered: u64 = match tau {
        Some(t) => probs
            .iter()
            .zip(weights)
            .filter(|(row, _)| row.iter().any(|&p| p >= t))
            .map(|(_, &w)| w)
            .sum(),
        None => 0,
    };
    Propagation {
        recall: curve.recall_at(TARGET_PRECISION).unwrap_or(0.0),
        reached_target: reached,
        force_multiplier: if exemplar_mass > 0 { covered as f64 / exemplar_mass as f64 } else { 0.0 },
        curve,
    }
}

// ---- bag of trees ----------------------------------------------------------------

/// Bernoulli Naive Bayes over the presence of subtree ids, one binary
/// classifier per label, Laplace smoothing α = 1.
#[derive(Clone, Debug)]
pub struct BagOfTrees {
    /// Per label: (log prior ratio, per-class base Σ log(1-θ), per-class counts, class sizes).
    labels: Vec<NbLabel>,
    vocab: HashMap<CanonicalId, usize>,
}

#[derive(Clone, Debug)]
struct NbLabel {
    class_sizes: [f64; 2],
    /// counts[v][class]
    counts: Vec<[f64; 2]>,
    base: [f64; 2],
    prior: f64,
}

const ALPHA: f64 = 1.0;

impl BagOfTrees {
    pub fn fit(exemplars: &[BTreeSet<CanonicalId>], truth: &[Vec<bool>]) -> Self {
        let mut vocab = HashMap::new();
        for set in exemplars {
            for id in set {
                let next = vocab.len();
                vocab.entry(*id).or_insert(next);
            }
        }
        let n_labels = truth.first().map_or(0, Vec::len);
        let n = exemplars.len() as f64;
        let labels = (0..n_labels)
            .map(|l| {
                let mut counts = vec![[0.0; 2]; vocab.len()];
                let mut class_sizes = [0.0; 2];
                for (set, row) in exemplars.iter().zip(truth) {
                    let c = usize::from(row[l]);
                    class_sizes[c] += 1.0;
                    for id in set {
                        counts[vocab[id]][c] += 1.0;
                    }
                }
                let mut base = [0.0; 2];
                for cnt in &counts {
                    for c in 0..2 {
                        base[c] += (1.0 - theta(cnt[c], class_sizes[c])).ln();
                    }
                }
                NbLabel { class_sizes, counts, base, prior: (class_sizes[1] + ALPHA) / (n + 2.0 * ALPHA) }
            })
            .collect();
        BagOfTrees { labels, vocab }
    }

    pub fn predict(&self, subtrees: &BTreeSet<CanonicalId>) -> Vec<f64> {
        self.labels
            .iter()
            .map(|lab| {
                if lab.class_sizes[0] == 0.0 || lab.class_sizes[1] == 0.0 {
                    return lab.prior;
                }
                let mut score = [lab.prior.ln() * 0.0 + (1.0 - lab.prior).ln(), lab.prior.ln()];
                for c in 0..2 {
                    score[c] += lab.base[c];
                }
                for id in subtrees {
                    for c in 0..2 {
                        let t = match self.vocab.get(id) {
                            Some(&v) => {
                                let t = theta(lab.counts[v][c], lab.class_sizes[c]);
                                score[c] -= (1.0 - t).ln();
                                t
                            }
                            None => theta(0.0, lab.class_sizes[c]),
                        };
                        score[c] += t.ln();
                    }
                }
                crate::numcore::sigmoid(score[1] - score[0])
            })
            .collect()
    }
}

fn theta(count: f64, size: f64) -> f64 {
    (count + ALPHA) / (size + 2.0 * ALPHA)
}

// ---- tree edit distance ------------------------------------------------------

/// Postorder view of a tree for the edit-distance dynamic program.
struct Postorder {
    labels: Vec<u32>,
    /// Leftmost leaf descendant of each node (postorder index).
    lml: Vec<usize>,
    keyroots: Vec<usize>,
}

fn node_label(kind: &NodeKind) -> String {
    match kind {
        NodeKind::Def(name) => format!("DEF:{name}"),
        NodeKind::Call(name) => format!("CALL:{name}"),
        k => k.tag(),
    }
}

/// Interns node labels to small integers.
#[derive(Default)]
pub struct LabelTable(HashMap<String, u32>);

impl LabelTable {
    fn intern(&mut self, kind: &NodeKind) -> u32 {
        let next = self.0.len() as u32;
        *self.0.entry(node_label(kind)).or_insert(next)
    }
}

impl Postorder {
    fn new(ast: &Ast, table: &mut LabelTable) -> Postorder {
        fn go(a: &Ast, table: &mut LabelTable, labels: &mut Vec<u32>, lml: &mut Vec<usize>) -> usize {
            let mut first = None;
            for c in &a.children {
                let l = go(c, table, labels, lml);
                first.get_or_insert(l);
            }
            let me = labels.len();
            labels.push(table.intern(&a.kind));
            let leftmost = first.unwrap_or(me);
            lml.push(leftmost);
            leftmost
        }
        let mut labels = Vec::new();
        let mut lml = Vec::new();
        go(ast, table, &mut labels, &mut lml);
        let n = labels.len();
        // Keyroots: the highest node for each distinct leftmost leaf.
        let mut seen = HashMap::new();
        for i in (0..n).rev() {
            seen.entry(lml[i]).or_insert(i);
        }
        let mut keyroots: Vec<usize> = seen.into_values().collect();
        keyroots.sort_unstable();
        Postorder { labels, lml, keyroots }
    }
}

/// Ordered tree edit distance with unit insert, delete and relabel costs
/// (Zhang–Shasha).
pub fn tree_edit_distance(a: &Ast, b: &Ast) -> usize {
    let mut table = LabelTable::default();
    let pa = Postorder::new(a, &mut table);
    let pb = Postorder::new(b, &mut table);
    zhang_shasha(&pa, &pb)
}

fn zhang_shasha(a: &Postorder, b: &Postorder) -> usize {
    let (n, m) = (a.labels.len(), b.labels.len());
    let mut td = vec![vec![0usize; m]; n];
    let mut fd = vec![vec![0usize; m + 1]; n + 1];
    for &i in &a.keyroots {
        for &j in &b.keyroots {
            let (li, lj) = (a.lml[i], b.lml[j]);
            // fd indexed with offset: row x ↔ node li+x-1, col y ↔ node lj+y-1
            fd[0][0] = 0;
            for x in 1..=i - li + 1 {
                fd[x][0] = fd[x - 1][0] + 1;
            }
            for y in 1..=j - lj + 1 {
                fd[0][y] = fd[0][y - 1] + 1;
            }
            for x in 1..=i - li + 1 {
                let i1 = li + x - 1;
                for y in 1..=j - lj + 1 {
                    let j1 = lj + y - 1;
                    let del = fd[x - 1][y] + 1;
                    let ins = fd[x][y - 1] + 1;
                    if a.lml[i1] == li && b.lml[j1] == lj {
                        let rel = fd[x - 1][y - 1] + usize::from(a.labels[i1] != b.labels[j1]);
                        fd[x][y] = del.min(ins).min(rel);
                        td[i1][j1] = fd[x][y];
                    } else {
                        let px = a.lml[i1] - li;
                        let py = b.lml[j1] - lj;
                        fd[x][y] = del.min(ins).min(fd[px][py] + td[i1][j1]);
                    }
                }
            }
        }
    }
    td[n - 1][m - 1]
}

/// 1-nearest-neighbour propagation under tree edit distance on surface
/// trees. The nearest exemplar's labels get confidence `1/(1+d)`.
pub struct KnnEdit {
    exemplars: Vec<(Postorder, CanonicalId, Vec<bool>)>,
    table: LabelTable,
}

impl KnnEdit {
    pub fn new(exemplars: &[(&Ast, CanonicalId, Vec<bool>)]) -> Self {
        let mut table = LabelTable::default();
        let exemplars = exemplars
            .iter()
            .map(|(ast, id, truth)| (Postorder::new(ast, &mut table), *id, truth.clone()))
            .collect();
        KnnEdit { exemplars, table }
    }

    /// (nearest distance, nearest id, probabilities).
    pub fn predict(&mut self, ast: &Ast) -> (usize, CanonicalId, Vec<f64>) {
        let p = Postorder::new(ast, &mut self.table);
        let (d, id, truth) = self
            .exemplars
            .iter()
            .map(|(e, id, truth)| (zhang_shasha(&p, e), *id, truth))
            .min_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)))
            .expect("at least one exemplar");
        let conf = 1.0 / (1.0 + d as f64);
        (d, id, truth.iter().map(|&y| if y { conf } else { 0.0 }).collect())
    }
}

// ---- unit tests ------------------------------------------------------------------

/// `correct` iff every unit test passes, `incorrect` otherwise, nothing else.
pub fn unit_test_probabilities(pass_fraction: f64, labels: &[String]) -> Vec<f64> {
    let correct = pass_fraction == 1.0;
    labels
        .iter()
        .map(|l| match l.as_str() {
            CORRECT if correct => 1.0,
            INCORRECT if !correct => 1.0,
            _ => 0.0,
        })
        .collect()
}

// ---- breakdowns --------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct LabelRecall {
    pub label: String,
    pub category: Category,
    pub recall: f64,
    pub reached: bool,
    pub positives: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategoryRecall {
    pub category: Category,
    /// Mean of the per-label recalls in this category.
    pub mean_recall: f64,
    /// Recall of one sweep pooled over the category's labels.
    pub pooled_recall: f64,
    pub labels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexityBin {
    pub bin: usize,
    pub programs: usize,
    pub min_complexity: usize,
    pub max_complexity: usize,
    pub recall: f64,
    pub postcondition_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Breakdown {
    pub labels: Vec<LabelRecall>,
    pub categories: Vec<CategoryRecall>,
    pub bins: Vec<ComplexityBin>,
}

fn columns(rows: &[Vec<f64>], keep: &[usize]) -> Vec<Vec<f64>> {
    rows.iter().map(|r| keep.iter().map(|&l| r[l]).collect()).collect()
}

fn columns_bool(rows: &[Vec<bool>], keep: &[usize]) -> Vec<Vec<bool>> {
    rows.iter().map(|r| keep.iter().map(|&l| r[l]).collect()).collect()
}

/// Splits `0..n` into `bins` contiguous groups of (near) equal size.
pub fn equal_bins(n: usize, bins: usize) -> Vec<std::ops::Range<usize>> {
    (0..bins).map(|b| (b * n / bins)..((b + 1) * n / bins)).collect()
}

/// Recall at the target precision per label, per category, and per
/// complexity decile (programs stably sorted by complexity).
pub fn breakdown_by_category(
    probs: &[Vec<f64>],
    truth: &[Vec<bool>],
    weights: &[u64],
    task: &Task,
    complexity: &[usize],
    postcondition_accuracy: Option<&[f64]>,
) -> Breakdown {
    let recall_of = |keep: &[usize], rows: Option<&[usize]>| -> (f64, bool) {
        let (p, t, w): (Vec<Vec<f64>>, Vec<Vec<bool>>, Vec<u64>) = match rows {
            Some(rows) => (
                rows.iter().map(|&i| keep.iter().map(|&l| probs[i][l]).collect()).collect(),
                rows.iter().map(|&i| keep.iter().map(|&l| truth[i][l]).collect()).collect(),
                rows.iter().map(|&i| weights[i]).collect(),
            ),
            None => (columns(probs, keep), columns_bool(truth, keep), weights.to_vec()),
        };
        if p.is_empty() {
            return (0.0, false);
        }
        let r = pr_sweep(&p, &t, &w, Averaging::Micro).recall_at(TARGET_PRECISION);
        (r.unwrap_or(0.0), r.is_some())
    };
    let labels: Vec<LabelRecall> = task
        .rubric
        .iter()
        .enumerate()
        .map(|(l, rule)| {
            let (recall, reached) = recall_of(&[l], None);
            LabelRecall {
                label: rule.label.to_string(),
                category: rule.category,
                recall,
                reached,
                positives: truth.iter().zip(weights).filter(|(t, _)| t[l]).map(|(_, &w)| w).sum(),
            }
        })
        .collect();
    let categories = Category::ALL
        .iter()
        .map(|&cat| {
            let keep: Vec<usize> = (0..task.rubric.len()).filter(|&l| task.rubric[l].category == cat).collect();
            let mean = if keep.is_empty() {
                0.0
            } else {
                keep.iter().map(|&l| labels[l].recall).sum::<f64>() / keep.len() as f64
            };
            CategoryRecall { category: cat, mean_recall: mean, pooled_recall: recall_of(&keep, None).0, labels: keep.len() }
        })
        .collect();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by_key(|&i| complexity[i]);
    let all: Vec<usize> = (0..task.rubric.len()).collect();
    let bins = equal_bins(order.len(), COMPLEXITY_BINS)
        .into_iter()
        .enumerate()
        .map(|(b, range)| {
            let rows = &order[range];
            ComplexityBin {
                bin: b,
                programs: rows.len(),
                min_complexity: rows.iter().map(|&i| complexity[i]).min().unwrap_or(0),
                max_complexity: rows.iter().map(|&i| complexity[i]).max().unwrap_or(0),
                recall: recall_of(&all, Some(rows)).0,
                postcondition_accuracy: postcondition_accuracy.and_then(|acc| {
                    let vals: Vec<f64> = rows.iter().map(|&i| acc[i]).filter(|x| !x.is_nan()).collect();
                    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
                }),
            }
        })
        .collect();
    Breakdown { labels, categories, bins }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse;

    #[test]
    fn kmeans_k_equals_n() {
        let pts: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let km = kmeans(&pts, 6, 3).unwrap();
        let mut c = km.centroids.clone();
        c.sort_unstable();
        assert_eq!(c, (0..6).collect::<Vec<_>>());
        let distinct: BTreeSet<usize> = km.assignments.iter().copied().collect();
        assert_eq!(distinct.len(), 6);
        assert!(kmeans(&pts, 7, 0).is_err());
    }

    #[test]
    fn kmeans_separates_blobs() {
        let mut r = rng(5);
        let mut pts = Vec::new();
        for blob in 0..2 {
            let cx = if blob == 0 { -10.0 } else { 10.0 };
            for _ in 0..40 {
                pts.push(vec![cx + r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)]);
            }
        }
        let km = kmeans(&pts, 2, 1).unwrap();
        for i in 0..80 {
            assert_eq!(km.assignments[i] == km.assignments[0], i < 40);
        }
        assert!(km.objective.windows(2).all(|w| w[1] <= w[0] + 1e-9));
    }

    #[test]
    fn kmeans_handles_duplicates() {
        let pts = vec![vec![1.0, 1.0]; 5];
        let km = kmeans(&pts, 3, 2).unwrap();
        let distinct: BTreeSet<usize> = km.centroids.iter().copied().collect();
        assert_eq!(distinct.len(), 3);
    }

    #[test]
    fn selection_strategies() {
        let freqs = vec![5, 9, 1, 9, 3];
        let emb: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
        for s in [SelectionStrategy::KmeansCentroids, SelectionStrategy::RandomUniform, SelectionStrategy::MostCommon] {
            let mut all = select_exemplars(&freqs, &emb, 5, s, 1).unwrap();
            all.sort_unstable();
            assert_eq!(all, vec![0, 1, 2, 3, 4]);
            assert_eq!(select_exemplars(&freqs, &emb, 3, s, 7).unwrap(), select_exemplars(&freqs, &emb, 3, s, 7).unwrap());
        }
        assert_eq!(select_exemplars(&freqs, &emb, 3, SelectionStrategy::MostCommon, 0).unwrap(), vec![1, 3, 0]);
        assert!(select_exemplars(&freqs, &emb, 6, SelectionStrategy::RandomUniform, 0).is_err());
    }

    #[test]
    fn perfect_predictor_curve() {
        let truth = vec![vec![true, false], vec![false, true], vec![true, true]];
        let probs: Vec<Vec<f64>> = truth.iter().map(|r| r.iter().map(|&y| if y { 0.9 } else { 0.1 }).collect()).collect();
        let curve = pr_sweep(&probs, &truth, &[1, 2, 3], Averaging::Micro);
        assert_eq!(curve.points.len(), 2);
        assert_eq!(curve.points[1], PrPoint { threshold: 0.9, precision: 1.0, recall: 1.0 });
        assert_eq!(curve.recall_at(0.9), Some(1.0));
        assert!(curve.points.windows(2).all(|w| w[0].threshold < w[1].threshold));
    }

    #[test]
    fn force_multiplier_counts_frequency() {
        let truth = vec![vec![true], vec![false]];
        let probs = vec![vec![0.8], vec![0.2]];
        let res = propagate_and_sweep(&probs, &truth, &[10, 5], 2, Averaging::Micro);
        assert!(res.reached_target);
        assert_eq!(res.recall, 1.0);
        assert_eq!(res.force_multiplier, 5.0);
        let bad = propagate_and_sweep(&[vec![0.5], vec![0.5]], &[vec![true], vec![false]], &[1, 1], 1, Averaging::Micro);
        assert!(!bad.reached_target);
        assert_eq!(bad.recall, 0.0);
    }

    #[test]
    fn macro_averaging_differs_from_micro() {
        let truth = vec![vec![true, false], vec![true, true]];
        let probs = vec![vec![0.9, 0.8], vec![0.9, 0.1]];
        let micro = pr_sweep(&probs, &truth, &[1, 1], Averaging::Micro);
        let mac = pr_sweep(&probs, &truth, &[1, 1], Averaging::Macro);
        assert_ne!(micro, mac);
    }

    fn ids(srcs: &[&str]) -> BTreeSet<CanonicalId> {
        srcs.iter().map(|s| crate::dsl::canonical_id(&parse(s).unwrap())).collect()
    }

    #[test]
    fn bag_of_trees_prior_when_label_universal() {
        let ex = vec![ids(&["move"]), ids(&["turn_left", "move"])];
        let truth = vec![vec![true, true], vec![true, false]];
        let nb = BagOfTrees::fit(&ex, &truth);
        let prior = (2.0 + 1.0) / (2.0 + 2.0);
        for prog in [ids(&["move"]), ids(&["put_beeper"]), BTreeSet::new()] {
            assert!(nb.predict(&prog)[0] >= prior - 1e-12);
        }
        let p = nb.predict(&ids(&["turn_left", "move"]));
        assert!(p[1] < 0.5);
        let q = nb.predict(&ids(&["move"]));
        assert!(q[1] > p[1]);
    }

    #[test]
    fn bag_of_trees_matches_direct_formula() {
        let ex = vec![ids(&["move", "turn_left"]), ids(&["move"]), ids(&["put_beeper"])];
        let truth = vec![vec![true], vec![true], vec![false]];
        let nb = BagOfTrees::fit(&ex, &truth);
        let x = ids(&["move", "pick_beeper"]);
        // Vocabulary {move, turn_left, put_beeper} plus the unseen pick_beeper.
        let th = |c: f64, n: f64| (c + 1.0) / (n + 2.0);
        let l1 = (3.0f64 / 5.0).ln() + th(2.0, 2.0).ln() + (1.0 - th(1.0, 2.0)).ln() + (1.0 - th(0.0, 2.0)).ln() + th(0.0, 2.0).ln();
        let l0 = (2.0f64 / 5.0).ln() + th(0.0, 1.0).ln() + (1.0 - th(0.0, 1.0)).ln() + (1.0 - th(1.0, 1.0)).ln() + th(0.0, 1.0).ln();
        let expect = 1.0 / (1.0 + (l0 - l1).exp());
        assert!((nb.predict(&x)[0] - expect).abs() < 1e-12);
    }

    /// Forest edit distance by direct recursion on the rightmost roots.
    fn brute_force(a: &Ast, b: &Ast) -> usize {
        fn forest(f: &[&Ast], g: &[&Ast], memo: &mut HashMap<(String, String), usize>) -> usize {
            let key = (
                f.iter().map(|t| String::from_utf8(t.canonical_bytes()).unwrap()).collect::<Vec<_>>().join("|"),
                g.iter().map(|t| String::from_utf8(t.canonical_bytes()).unwrap()).collect::<Vec<_>>().join("|"),
            );
            if let Some(&v) = memo.get(&key) {
                return v;
            }
            let size = |h: &[&Ast]| h.iter().map(|t| t.node_count()).sum::<usize>();
            let v = match (f.split_last(), g.split_last()) {
                (None, _) => size(g),
                (_, None) => size(f),
                (Some((v, frest)), Some((w, grest))) => {
                    let mut f_del: Vec<&Ast> = frest.to_vec();
                    f_del.extend(v.children.iter());
                    let mut g_ins: Vec<&Ast> = grest.to_vec();
                    g_ins.extend(w.children.iter());
                    let vc: Vec<&Ast> = v.children.iter().collect();
                    let wc: Vec<&Ast> = w.children.iter().collect();
                    let del = forest(&f_del, g, memo) + 1;
                    let ins = forest(f, &g_ins, memo) + 1;
                    let rel = forest(&vc, &wc, memo)
                        + forest(frest, grest, memo)
                        + usize::from(node_label(&v.kind) != node_label(&w.kind));
                    del.min(ins).min(rel)
                }
            };
            memo.insert(key, v);
            v
        }
        forest(&[a], &[b], &mut HashMap::new())
    }

    #[test]
    fn edit_distance_examples() {
        let mv = Ast::mv();
        assert_eq!(tree_edit_distance(&mv, &mv), 0);
        let two = Ast::seq(vec![Ast::mv(), Ast::mv()]);
        assert_eq!(tree_edit_distance(&mv, &two), 2);
        assert_eq!(brute_force(&mv, &two), 2);
        let srcs = [
            "move turn_left move",
            "repeat(2){ move } turn_left",
            "while(front_is_clear){ move if(left_is_clear){ turn_left } }",
            "if(not beepers_present){ put_beeper } else { pick_beeper move }",
            "turn_left",
            "def f { move move } f() turn_left f()",
        ];
        for a in srcs {
            for b in srcs {
                let (ta, tb) = (parse(a).unwrap(), parse(b).unwrap());
                assert_eq!(tree_edit_distance(&ta, &tb), brute_force(&ta, &tb), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn knn_picks_nearest_with_digest_ties() {
        let a = parse("move move").unwrap();
        let b = parse("turn_left turn_left").unwrap();
        let ida = crate::dsl::canonical_id(&a);
        let idb = crate::dsl::canonical_id(&b);
        let mut knn = KnnEdit::new(&[(&a, ida, vec![true, false]), (&b, idb, vec![false, true])]);
        let (d, id, p) = knn.predict(&parse("move move move").unwrap());
        assert_eq!((d, id), (1, ida));
        assert_eq!(p, vec![0.5, 0.0]);
        let (_, tie, _) = knn.predict(&parse("move turn_left").unwrap());
        assert_eq!(tie, ida.min(idb));
    }

    #[test]
    fn unit_test_baseline() {
        let labels: Vec<String> = ["correct", "incorrect", "crashes"].iter().map(|s| s.to_string()).collect();
        assert_eq!(unit_test_probabilities(1.0, &labels), vec![1.0, 0.0, 0.0]);
        assert_eq!(unit_test_probabilities(0.4, &labels), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn equal_size_bins() {
        let bins = equal_bins(20, 10);
        assert!(bins.iter().all(|r| r.len() == 2));
        assert_eq!(bins[9], 18..20);
        let bins = equal_bins(25, 10);
        assert_eq!(bins.iter().map(|r| r.len()).sum::<usize>(), 25);
    }

    #[test]
    fn breakdown_shapes() {
        let task = crate::corpus::bundled_task("maze").unwrap();
        let n = 30;
        let l = task.rubric.len();
        let truth: Vec<Vec<bool>> = (0..n).map(|i| (0..l).map(|j| (i + j) % 3 == 0).collect()).collect();
        let probs: Vec<Vec<f64>> = truth.iter().map(|r| r.iter().map(|&y| if y { 0.8 } else { 0.3 }).collect()).collect();
        let b = breakdown_by_category(&probs, &truth, &vec![1; n], &task, &vec![2; n], None);
        assert_eq!(b.labels.len(), l);
        assert_eq!(b.categories.len(), 3);
        assert_eq!(b.bins.len(), 10);
        assert!(b.bins.iter().all(|x| x.programs == 3));
        assert!(b.labels.iter().all(|x| x.recall == 1.0));
    }
}
