//! Acquisition strategies.
//!
//! Uncertainty strategies turn per-token distributions into one score per
//! sentence (higher = acquired first) and are ranked by [`rank_and_take`].
//! Diversity strategies pick directly from sentence embeddings.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ProbTensor;
use crate::seed;

pub const DEFAULT_EPSILON: f64 = 1e-12;
pub const DEFAULT_MC_PASSES: usize = 10;
const KMEANS_MAX_ITER: usize = 100;

#[derive(Debug, Error, PartialEq)]
pub enum StrategyError {
    #[error("no valid tokens to score")]
    NoValidTokens,
    #[error("margin needs at least 2 labels")]
    TooFewLabels,
    #[error("MC passes have mismatched shapes")]
    ShapeMismatch,
    #[error("budget {budget} exceeds pool of {pool}")]
    BudgetExceedsPool { budget: usize, pool: usize },
    #[error("embedding rows differ in dimension or contain NaN")]
    BadEmbeddings,
}

/// The acquisition strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Random,
    LeastConfidence,
    #[serde(rename = "mlc")]
    ModifiedLeastConfidence,
    Margin,
    Entropy,
    #[serde(rename = "bald")]
    BaldBatch,
    #[serde(rename = "coreset")]
    CoreSet,
    ClusterPlus,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 8] = [
        StrategyKind::Random,
        StrategyKind::LeastConfidence,
        StrategyKind::ModifiedLeastConfidence,
        StrategyKind::Margin,
        StrategyKind::Entropy,
        StrategyKind::BaldBatch,
        StrategyKind::CoreSet,
        StrategyKind::ClusterPlus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Random => "random",
            StrategyKind::LeastConfidence => "least_confidence",
            StrategyKind::ModifiedLeastConfidence => "mlc",
            StrategyKind::Margin => "margin",
            StrategyKind::Entropy => "entropy",
            StrategyKind::BaldBatch => "bald",
            StrategyKind::CoreSet => "coreset",
            StrategyKind::ClusterPlus => "cluster_plus",
        }
    }

    pub fn valid_names() -> String {
        Self::ALL.map(|s| s.name()).join(", ")
    }

    /// Uses per-token probabilities rather than embeddings.
    pub fn is_uncertainty(self) -> bool {
        matches!(
            self,
            StrategyKind::LeastConfidence
                | StrategyKind::ModifiedLeastConfidence
                | StrategyKind::Margin
                | StrategyKind::Entropy
                | StrategyKind::BaldBatch
        )
    }

    pub fn needs_embeddings(self) -> bool {
        matches!(self, StrategyKind::CoreSet | StrategyKind::ClusterPlus)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown strategy {s:?}; valid names: {}", Self::valid_names()))
    }
}

/// Sentence id with its oriented score (higher = acquired first).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSentence {
    pub id: usize,
    pub score: f64,
}

fn row_max(row: ArrayView1<f64>) -> f64 {
    row.fold(f64::NEG_INFINITY, |a, &b| a.max(b))
}

fn token_entropy(row: ArrayView1<f64>, epsilon: f64) -> f64 {
    -row.iter().filter(|&&p| p > epsilon).map(|&p| p * p.ln()).sum::<f64>()
}

fn mean_over_valid(
    probs: &ProbTensor,
    f: impl Fn(ArrayView1<f64>) -> f64,
) -> Result<f64, StrategyError> {
    let (sum, n) = probs
        .valid_rows()
        .fold((0.0, 0usize), |(s, n), row| (s + f(row), n + 1));
    if n == 0 {
        return Err(StrategyError::NoValidTokens);
    }
    Ok(sum / n as f64)
}

/// Mean of `1 - max_k p` over valid tokens.
pub fn score_least_confidence(probs: &ProbTensor) -> Result<f64, StrategyError> {
    mean_over_valid(probs, |row| 1.0 - row_max(row))
}

/// Number of least-confident tokens averaged for a sentence of `len` tokens:
/// `round(sqrt(len / 2))`, clamped to `[1, len]`.
pub fn mlc_token_count(len: usize) -> usize {
    ((len as f64 / 2.0).sqrt().round() as usize).clamp(1, len.max(1))
}

/// Length-normalized least confidence over the `N` least confident tokens.
pub fn score_mlc(probs: &ProbTensor) -> Result<f64, StrategyError> {
    let mut maxes: Vec<f64> = probs.valid_rows().map(row_max).collect();
    if maxes.is_empty() {
        return Err(StrategyError::NoValidTokens);
    }
    maxes.sort_by(|a, b| a.total_cmp(b));
    let n = mlc_token_count(maxes.len());
    Ok(maxes[..n].iter().map(|m| 1.0 - m).sum::<f64>() / n as f64)
}

/// Mean gap between the two most probable labels. Smaller is more uncertain.
pub fn score_margin(probs: &ProbTensor) -> Result<f64, StrategyError> {
    if probs.num_labels() < 2 {
        return Err(StrategyError::TooFewLabels);
    }
    mean_over_valid(probs, |row| {
        let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &p in row {
            if p > first {
                second = first;
                first = p;
            } else if p > second {
                second = p;
            }
        }
        first - second
    })
}

/// Mean token entropy (natural log), ignoring entries `<= epsilon`.
pub fn score_entropy(probs: &ProbTensor, epsilon: f64) -> Result<f64, StrategyError> {
    mean_over_valid(probs, |row| token_entropy(row, epsilon))
}

/// Mean per-token mutual information between prediction and dropout mask:
/// entropy of the mean distribution minus the mean per-pass entropy.
pub fn score_bald(passes: &[ProbTensor], epsilon: f64) -> Result<f64, StrategyError> {
    let first = passes.first().ok_or(StrategyError::ShapeMismatch)?;
    if passes.len() < 2
        || passes
            .iter()
            .any(|p| p.probs.dim() != first.probs.dim() || p.valid_mask != first.valid_mask)
    {
        return Err(StrategyError::ShapeMismatch);
    }
    let t = passes.len() as f64;
    let (len, _) = first.probs.dim();
    let mut sum = 0.0;
    let mut n = 0;
    for pos in (0..len).filter(|&p| first.valid_mask[p]) {
        let mut mean: Array1<f64> = Array1::zeros(first.num_labels());
        let mut expected = 0.0;
        for pass in passes {
            let row = pass.probs.row(pos);
            mean += &row;
            expected += token_entropy(row, epsilon);
        }
        mean /= t;
        sum += token_entropy(mean.view(), epsilon) - expected / t;
        n += 1;
    }
    if n == 0 {
        return Err(StrategyError::NoValidTokens);
    }
    Ok(sum / n as f64)
}

/// Top `n` by score; ties go to the lower id.
pub fn rank_and_take(scores: &[ScoredSentence], n: usize) -> Result<Vec<usize>, StrategyError> {
    if n > scores.len() {
        return Err(StrategyError::BudgetExceedsPool {
            budget: n,
            pool: scores.len(),
        });
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.id.cmp(&b.id)));
    Ok(sorted[..n].iter().map(|s| s.id).collect())
}

/// Uniform sample of `n` ids without replacement.
pub fn select_random(pool: &[usize], n: usize, seed: u64) -> Result<Vec<usize>, StrategyError> {
    if n > pool.len() {
        return Err(StrategyError::BudgetExceedsPool {
            budget: n,
            pool: pool.len(),
        });
    }
    let mut rng = seed::rng(seed);
    Ok(pool.choose_multiple(&mut rng, n).copied().collect())
}

/// Sentence embeddings, one row per id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub ids: Vec<usize>,
    pub rows: Array2<f64>,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<usize>, rows: Array2<f64>) -> Result<Self, StrategyError> {
        if ids.len() != rows.nrows() || rows.iter().any(|v| v.is_nan()) {
            return Err(StrategyError::BadEmbeddings);
        }
        Ok(Self { ids, rows })
    }

    pub fn from_vectors(ids: Vec<usize>, vectors: &[Array1<f64>]) -> Result<Self, StrategyError> {
        let dim = vectors.first().map_or(0, |v| v.len());
        if vectors.iter().any(|v| v.len() != dim) {
            return Err(StrategyError::BadEmbeddings);
        }
        let mut rows = Array2::zeros((vectors.len(), dim));
        for (mut row, v) in rows.rows_mut().into_iter().zip(vectors) {
            row.assign(v);
        }
        Self::new(ids, rows)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Rows restricted to `ids`, in the order given.
    pub fn subset(&self, ids: &[usize]) -> EmbeddingMatrix {
        let pos: std::collections::HashMap<usize, usize> =
            self.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let mut rows = Array2::zeros((ids.len(), self.rows.ncols()));
        for (r, id) in ids.iter().enumerate() {
            rows.row_mut(r).assign(&self.rows.row(pos[id]));
        }
        EmbeddingMatrix {
            ids: ids.to_vec(),
            rows,
        }
    }
}

/// `1 - cos(a, b)`; a zero vector is at distance 1 from everything.
pub fn cosine_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - a.dot(&b) / (na * nb)
}

/// Greedy k-center selection under cosine distance.
pub fn select_coreset(
    labeled: &EmbeddingMatrix,
    pool: &EmbeddingMatrix,
    n: usize,
    seed: u64,
) -> Result<Vec<usize>, StrategyError> {
    if n > pool.len() {
        return Err(StrategyError::BudgetExceedsPool {
            budget: n,
            pool: pool.len(),
        });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut picked = Vec::with_capacity(n);
    let mut taken = vec![false; pool.len()];
    // Distance from each pool row to its nearest center so far.
    let mut nearest = vec![f64::INFINITY; pool.len()];
    let add_center = |center: ArrayView1<f64>, nearest: &mut Vec<f64>| {
        for (i, row) in pool.rows.rows().into_iter().enumerate() {
            nearest[i] = nearest[i].min(cosine_distance(row, center));
        }
    };
    for row in labeled.rows.rows() {
        add_center(row, &mut nearest);
    }
    if labeled.is_empty() {
        let first = seed::rng(seed).random_range(0..pool.len());
        taken[first] = true;
        picked.push(pool.ids[first]);
        add_center(pool.rows.row(first), &mut nearest);
    }
    while picked.len() < n {
        let mut best: Option<usize> = None;
        for i in (0..pool.len()).filter(|&i| !taken[i]) {
            best = match best {
                None => Some(i),
                Some(b) if nearest[i] > nearest[b]
                    || (nearest[i] == nearest[b] && pool.ids[i] < pool.ids[b]) =>
                {
                    Some(i)
                }
                keep => keep,
            };
        }
        let i = best.expect("pool has unpicked rows");
        taken[i] = true;
        picked.push(pool.ids[i]);
        add_center(pool.rows.row(i), &mut nearest);
    }
    Ok(picked)
}

/// Cluster count for a pool of `pool` sentences and budget `budget`:
/// `round(sqrt(pool / 2))` raised to at least 5, then capped by the budget
/// and the pool size.
pub fn cluster_count(pool: usize, budget: usize) -> usize {
    ((pool as f64 / 2.0).sqrt().round() as usize)
        .max(5)
        .min(budget)
        .min(pool)
}

/// Outcome of k-means over a pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub assignments: Vec<usize>,
    pub centers: Array2<f64>,
    pub iterations: usize,
}

fn unit_rows(rows: &Array2<f64>) -> Array2<f64> {
    let mut out = rows.clone();
    for mut row in out.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    out
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding then Lloyd iterations until assignments stop changing
/// (at most 100 rounds). Rows are used as given.
pub fn kmeans(points: &Array2<f64>, k: usize, rng: &mut impl Rng) -> Clustering {
    let n = points.nrows();
    assert!(k >= 1 && k <= n, "k must lie in [1, n]");
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(rng),
            // Every remaining point coincides with a center.
            Err(_) => {
                let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
                *free.choose(rng).unwrap()
            }
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    let mut centers = Array2::zeros((k, points.ncols()));
    for (c, &i) in chosen.iter().enumerate() {
        centers.row_mut(c).assign(&points.row(i));
    }

    let assign = |centers: &Array2<f64>| -> Vec<usize> {
        (0..n)
            .map(|i| {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for c in 0..k {
                    let d = sq_dist(points.row(i), centers.row(c));
                    if d < best_d {
                        best_d = d;
                        best = c;
                    }
                }
                best
            })
            .collect()
    };
    let mut assignments = assign(&centers);
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITER {
        iterations += 1;
        let mut sums = Array2::<f64>::zeros(centers.raw_dim());
        let mut counts = vec![0usize; k];
        for (i, &c) in assignments.iter().enumerate() {
            sums.row_mut(c).scaled_add(1.0, &points.row(i));
            counts[c] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                let mean = sums.row(c).mapv(|v| v / counts[c] as f64);
                centers.row_mut(c).assign(&mean);
            }
        }
        let next = assign(&centers);
        if next == assignments {
            break;
        }
        assignments = next;
    }
    Clustering {
        assignments,
        centers,
        iterations,
    }
}

/// Picks and the cluster of every pool row.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSelection {
    pub picked: Vec<usize>,
    pub k: usize,
    /// Cluster per pool row, aligned with the pool's ids.
    pub clusters: Vec<usize>,
}

/// Clusters the unit-normalized pool embeddings and draws round-robin from
/// the clusters until `n` sentences are collected.
pub fn select_cluster_plus(
    pool: &EmbeddingMatrix,
    n: usize,
    seed: u64,
) -> Result<ClusterSelection, StrategyError> {
    if n > pool.len() {
        return Err(StrategyError::BudgetExceedsPool {
            budget: n,
            pool: pool.len(),
        });
    }
    if n == 0 {
        return Ok(ClusterSelection {
            picked: Vec::new(),
            k: 0,
            clusters: vec![0; pool.len()],
        });
    }
    let k = cluster_count(pool.len(), n);
    let mut rng = seed::rng(seed);
    let clustering = kmeans(&unit_rows(&pool.rows), k, &mut rng);

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &c) in clustering.assignments.iter().enumerate() {
        members[c].push(i);
    }
    let mut order: Vec<usize> = (0..k).filter(|&c| !members[c].is_empty()).collect();
    order.shuffle(&mut rng);
    let mut picked = Vec::with_capacity(n);
    while picked.len() < n {
        for &c in &order {
            if picked.len() == n {
                break;
            }
            let bucket = &mut members[c];
            if bucket.is_empty() {
                continue;
            }
            let j = rng.random_range(0..bucket.len());
            picked.push(pool.ids[bucket.swap_remove(j)]);
        }
    }
    Ok(ClusterSelection {
        picked,
        k,
        clusters: clustering.assignments,
    })
}

/// Asserts selector output is duplicate-free; used by callers in debug paths.
pub fn has_duplicates(ids: &[usize]) -> bool {
    let mut seen = HashSet::with_capacity(ids.len());
    ids.iter().any(|id| !seen.insert(*id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn tensor(rows: &[&[f64]]) -> ProbTensor {
        let k = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        ProbTensor::new(Array2::from_shape_vec((rows.len(), k), flat).unwrap())
    }

    fn with_maxes(maxes: &[f64]) -> ProbTensor {
        let rows: Vec<Vec<f64>> = maxes.iter().map(|&m| vec![m, 1.0 - m]).collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        tensor(&refs)
    }

    #[test]
    fn least_confidence_examples() {
        assert!((score_least_confidence(&tensor(&[&[0.9, 0.1]])).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(score_least_confidence(&tensor(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap(), 0.0);
        assert!((score_least_confidence(&with_maxes(&[0.9, 0.5])).unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn mlc_examples() {
        let p = with_maxes(&[0.9, 0.5, 0.7, 0.95, 0.99, 0.8, 0.85, 0.9]);
        assert_eq!(mlc_token_count(8), 2);
        assert!((score_mlc(&p).unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(mlc_token_count(32), 4);
        assert_eq!(mlc_token_count(1), 1);
        assert_eq!(mlc_token_count(2), 1);
        // N = L for one token: MLC equals plain least confidence.
        let short = with_maxes(&[0.6]);
        assert_eq!(score_mlc(&short).unwrap(), score_least_confidence(&short).unwrap());
    }

    #[test]
    fn margin_examples() {
        assert!((score_margin(&tensor(&[&[0.6, 0.3, 0.1]])).unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(score_margin(&tensor(&[&[0.5, 0.5]])).unwrap(), 0.0);
        assert_eq!(score_margin(&tensor(&[&[0.0, 1.0, 0.0]])).unwrap(), 1.0);
        assert_eq!(score_margin(&tensor(&[&[1.0]])), Err(StrategyError::TooFewLabels));
    }

    #[test]
    fn entropy_examples() {
        let u = 1.0 / 3.0;
        assert!((score_entropy(&tensor(&[&[u, u, u]]), DEFAULT_EPSILON).unwrap() - 3f64.ln()).abs() < 1e-12);
        assert_eq!(score_entropy(&tensor(&[&[0.0, 1.0, 0.0]]), DEFAULT_EPSILON).unwrap(), 0.0);
        let floored = score_entropy(&tensor(&[&[0.5, 0.5, 1e-15]]), 1e-12).unwrap();
        assert_eq!(floored, 2f64.ln());
    }

    #[test]
    fn bald_examples() {
        let a = tensor(&[&[0.2, 0.8]]);
        assert_eq!(score_bald(&[a.clone(), a.clone(), a], DEFAULT_EPSILON).unwrap(), 0.0);
        let opposing = [tensor(&[&[1.0, 0.0]]), tensor(&[&[0.0, 1.0]])];
        assert!((score_bald(&opposing, DEFAULT_EPSILON).unwrap() - 2f64.ln()).abs() < 1e-12);
        let bad = [tensor(&[&[1.0, 0.0]]), tensor(&[&[1.0, 0.0], &[0.0, 1.0]])];
        assert_eq!(score_bald(&bad, DEFAULT_EPSILON), Err(StrategyError::ShapeMismatch));
    }

    #[test]
    fn scores_need_valid_tokens() {
        let mut p = tensor(&[&[0.5, 0.5]]);
        p.valid_mask = vec![false];
        assert_eq!(score_least_confidence(&p), Err(StrategyError::NoValidTokens));
        assert_eq!(score_mlc(&p), Err(StrategyError::NoValidTokens));
        assert_eq!(score_entropy(&p, 1e-12), Err(StrategyError::NoValidTokens));
    }

    #[test]
    fn invalid_positions_are_ignored() {
        let mut p = tensor(&[&[0.9, 0.1], &[0.5, 0.5]]);
        p.valid_mask = vec![true, false];
        assert!((score_least_confidence(&p).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn ranking() {
        let s = |id, score| ScoredSentence { id, score };
        assert_eq!(rank_and_take(&[s(0, 0.9), s(1, 0.1)], 1).unwrap(), vec![0]);
        assert_eq!(rank_and_take(&[s(5, 0.2), s(2, 0.2), s(9, 0.2)], 3).unwrap(), vec![2, 5, 9]);
        assert_eq!(rank_and_take(&[s(1, 0.1), s(2, 0.5), s(3, 0.3)], 3).unwrap(), vec![2, 3, 1]);
        assert!(rank_and_take(&[s(1, 0.1)], 2).is_err());
    }

    #[test]
    fn random_selection() {
        let pool: Vec<usize> = (10..20).collect();
        let mut all = select_random(&pool, 10, 4).unwrap();
        all.sort_unstable();
        assert_eq!(all, pool);
        assert_eq!(select_random(&pool, 3, 9).unwrap(), select_random(&pool, 3, 9).unwrap());
        assert!(select_random(&pool, 11, 0).is_err());
    }

    #[test]
    fn coreset_prefers_orthogonal() {
        let labeled = EmbeddingMatrix::new(vec![100], array![[1.0, 0.0]]).unwrap();
        let pool = EmbeddingMatrix::new(vec![0, 1, 2], array![[1.0, 0.0], [0.0, 1.0], [0.7, 0.7]]).unwrap();
        assert_eq!(select_coreset(&labeled, &pool, 1, 0).unwrap(), vec![1]);
        let d = cosine_distance(pool.rows.row(2), labeled.rows.row(0));
        assert!((d - (1.0 - 0.7 / 0.98f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn coreset_identical_pool_in_id_order() {
        let labeled = EmbeddingMatrix::new(vec![99], array![[0.0, 1.0]]).unwrap();
        let pool = EmbeddingMatrix::new(vec![7, 3, 5], Array2::from_elem((3, 2), 1.0)).unwrap();
        assert_eq!(select_coreset(&labeled, &pool, 3, 0).unwrap(), vec![3, 5, 7]);
    }

    #[test]
    fn zero_vectors_are_far_from_everything() {
        assert_eq!(cosine_distance(array![0.0, 0.0].view(), array![1.0, 0.0].view()), 1.0);
        assert_eq!(cosine_distance(array![0.0, 0.0].view(), array![0.0, 0.0].view()), 1.0);
    }

    #[test]
    fn cluster_count_examples() {
        assert_eq!(cluster_count(200, 20), 10);
        assert_eq!(cluster_count(10_000, 50), 50);
        assert_eq!(cluster_count(40, 20), 5);
        assert_eq!(cluster_count(3, 3), 3);
        assert_eq!(cluster_count(100, 2), 2);
    }

    #[test]
    fn cluster_plus_covers_singletons() {
        // Five well-separated directions, one point each: k = n = 5.
        let rows = Array2::from_shape_fn((5, 5), |(i, j)| if i == j { 1.0 } else { 0.0 });
        let pool = EmbeddingMatrix::new(vec![10, 11, 12, 13, 14], rows).unwrap();
        let sel = select_cluster_plus(&pool, 5, 3).unwrap();
        let mut picked = sel.picked.clone();
        picked.sort_unstable();
        assert_eq!(picked, vec![10, 11, 12, 13, 14]);
        assert_eq!(sel.k, 5);
    }

    #[test]
    fn cluster_plus_draws_from_every_cluster() {
        // Three tight groups; each must be represented when n >= k.
        let mut rows = Vec::new();
        for g in 0..3 {
            for j in 0..10 {
                let mut v = vec![0.01 * j as f64; 3];
                v[g] = 1.0;
                rows.extend(v);
            }
        }
        let pool = EmbeddingMatrix::new((0..30).collect(), Array2::from_shape_vec((30, 3), rows).unwrap()).unwrap();
        let sel = select_cluster_plus(&pool, 6, 1).unwrap();
        assert_eq!(sel.picked.len(), 6);
        assert!(!has_duplicates(&sel.picked));
        let groups: HashSet<usize> = sel.picked.iter().map(|id| id / 10).collect();
        assert_eq!(groups.len(), 3);
    }

    #[test]
    fn kmeans_handles_duplicate_points() {
        let points = Array2::from_elem((6, 2), 1.0);
        let c = kmeans(&points, 3, &mut seed::rng(0));
        assert_eq!(c.assignments.len(), 6);
    }

    #[test]
    fn strategy_names_parse() {
        for k in StrategyKind::ALL {
            assert_eq!(k.name().parse::<StrategyKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.name()));
        }
        let err = "nope".parse::<StrategyKind>().unwrap_err();
        assert!(err.contains("entropy"));
    }

    fn prob_rows(k: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(0.001f64..1.0, k), 1..6).prop_map(|rows| {
            rows.into_iter()
                .map(|r| {
                    let s: f64 = r.iter().sum();
                    r.into_iter().map(|v| v / s).collect()
                })
                .collect()
        })
    }

    fn to_tensor(rows: &[Vec<f64>]) -> ProbTensor {
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        tensor(&refs)
    }

    proptest! {
        #[test]
        fn bald_is_nonnegative(passes in prop::collection::vec(prob_rows(3), 2..5)) {
            let len = passes[0].len();
            let tensors: Vec<ProbTensor> = passes
                .iter()
                .map(|p| to_tensor(&p.iter().cycle().take(len).cloned().collect::<Vec<_>>()))
                .collect();
            prop_assert!(score_bald(&tensors, DEFAULT_EPSILON).unwrap() >= -1e-9);
        }

        #[test]
        fn entropy_and_bald_ignore_label_order(a in prob_rows(4), b in prob_rows(4)) {
            let len = a.len().min(b.len());
            let (a, b) = (&a[..len], &b[..len]);
            let permute = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
                rows.iter().map(|r| vec![r[2], r[0], r[3], r[1]]).collect()
            };
            let (pa, pb) = (to_tensor(a), to_tensor(b));
            let (qa, qb) = (to_tensor(&permute(a)), to_tensor(&permute(b)));
            let h = score_entropy(&pa, DEFAULT_EPSILON).unwrap();
            let h_perm = score_entropy(&qa, DEFAULT_EPSILON).unwrap();
            prop_assert!((h - h_perm).abs() < 1e-12);
            let mi = score_bald(&[pa, pb], DEFAULT_EPSILON).unwrap();
            let mi_perm = score_bald(&[qa, qb], DEFAULT_EPSILON).unwrap();
            prop_assert!((mi - mi_perm).abs() < 1e-12);
        }

        #[test]
        fn monotone_transform_preserves_ranking(maxes in prop::collection::vec(0.5f64..1.0, 2..12)) {
            // One token per sentence, so a sentence's score is a monotone
            // function of its token's max-probability.
            let rank = |f: &dyn Fn(f64) -> f64, score: &dyn Fn(&ProbTensor) -> f64| {
                let scored: Vec<ScoredSentence> = maxes
                    .iter()
                    .enumerate()
                    .map(|(id, &m)| ScoredSentence { id, score: score(&with_maxes(&[f(m)])) })
                    .collect();
                rank_and_take(&scored, scored.len()).unwrap()
            };
            let lc = |p: &ProbTensor| score_least_confidence(p).unwrap();
            let mlc = |p: &ProbTensor| score_mlc(p).unwrap();
            prop_assert_eq!(rank(&|x| x, &lc), rank(&f64::sqrt, &lc));
            prop_assert_eq!(rank(&|x| x, &mlc), rank(&f64::sqrt, &mlc));
        }

        #[test]
        fn token_order_does_not_change_scores(mut maxes in prop::collection::vec(0.34f64..1.0, 1..20)) {
            let before = (score_least_confidence(&with_maxes(&maxes)).unwrap(), score_mlc(&with_maxes(&maxes)).unwrap());
            maxes.reverse();
            let after = (score_least_confidence(&with_maxes(&maxes)).unwrap(), score_mlc(&with_maxes(&maxes)).unwrap());
            prop_assert!((before.0 - after.0).abs() < 1e-12);
            prop_assert_eq!(before.1, after.1);
        }
    }
}
