//! Linear-chain CRF inference: forward-backward in log space and Viterbi.
//!
//! A path `y` over an `L x K` emission matrix `e` scores
//! `start[y0] + sum_t e[t][y_t] + sum_t trans[y_{t-1}][y_t] + end[y_{L-1}]`.

use ndarray::{Array1, Array2, ArrayView2};
use thiserror::Error;

/// Per-token label scores, `L x K`.
pub type EmissionMatrix = Array2<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum CrfError {
    #[error("non-finite score in {0}")]
    NonFiniteScore(&'static str),
    #[error("empty sequence")]
    EmptySequence,
}

/// Label transition scores. `matrix[[i, j]]` scores label `j` following `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Transitions {
    pub matrix: Array2<f64>,
    pub start: Array1<f64>,
    pub end: Array1<f64>,
}

impl Transitions {
    pub fn zeros(k: usize) -> Self {
        Self {
            matrix: Array2::zeros((k, k)),
            start: Array1::zeros(k),
            end: Array1::zeros(k),
        }
    }

    pub fn num_labels(&self) -> usize {
        self.start.len()
    }

    fn check_finite(&self) -> Result<(), CrfError> {
        if self.matrix.iter().chain(&self.start).chain(&self.end).all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(CrfError::NonFiniteScore("transitions"))
        }
    }
}

/// Result of forward-backward.
#[derive(Debug, Clone)]
pub struct Posterior {
    pub log_partition: f64,
    /// `marginals[[t, k]] = P(y_t = k | x)`.
    pub marginals: Array2<f64>,
    /// Expected transition counts, summed over positions.
    pub pair_marginals: Array2<f64>,
}

pub fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn forward_backward(
    emissions: ArrayView2<f64>,
    trans: &Transitions,
) -> Result<Posterior, CrfError> {
    let (len, k) = emissions.dim();
    if len == 0 {
        return Err(CrfError::EmptySequence);
    }
    if !emissions.iter().all(|v| v.is_finite()) {
        return Err(CrfError::NonFiniteScore("emissions"));
    }
    trans.check_finite()?;

    let mut alpha = Array2::<f64>::zeros((len, k));
    for j in 0..k {
        alpha[[0, j]] = trans.start[j] + emissions[[0, j]];
    }
    for t in 1..len {
        for j in 0..k {
            let prev = (0..k).map(|i| alpha[[t - 1, i]] + trans.matrix[[i, j]]);
            alpha[[t, j]] = log_sum_exp(prev) + emissions[[t, j]];
        }
    }
    let log_partition = log_sum_exp((0..k).map(|j| alpha[[len - 1, j]] + trans.end[j]));

    let mut beta = Array2::<f64>::zeros((len, k));
    for i in 0..k {
        beta[[len - 1, i]] = trans.end[i];
    }
    for t in (0..len - 1).rev() {
        for i in 0..k {
            let next =
                (0..k).map(|j| trans.matrix[[i, j]] + emissions[[t + 1, j]] + beta[[t + 1, j]]);
            beta[[t, i]] = log_sum_exp(next);
        }
    }

    let mut marginals = Array2::<f64>::zeros((len, k));
    for t in 0..len {
        for j in 0..k {
            marginals[[t, j]] = (alpha[[t, j]] + beta[[t, j]] - log_partition).exp();
        }
    }
    let mut pair_marginals = Array2::<f64>::zeros((k, k));
    for t in 0..len - 1 {
        for i in 0..k {
            for j in 0..k {
                pair_marginals[[i, j]] += (alpha[[t, i]]
                    + trans.matrix[[i, j]]
                    + emissions[[t + 1, j]]
                    + beta[[t + 1, j]]
                    - log_partition)
                    .exp();
            }
        }
    }
    if !log_partition.is_finite() {
        return Err(CrfError::NonFiniteScore("log partition"));
    }
    Ok(Posterior {
        log_partition,
        marginals,
        pair_marginals,
    })
}

pub fn path_score(emissions: ArrayView2<f64>, trans: &Transitions, path: &[usize]) -> f64 {
    let mut score = trans.start[path[0]] + trans.end[path[path.len() - 1]];
    for (t, &y) in path.iter().enumerate() {
        score += emissions[[t, y]];
        if t > 0 {
            score += trans.matrix[[path[t - 1], y]];
        }
    }
    score
}

/// Best-scoring path and its score. Ties go to the lower label index at the
/// final position and at every backtrack step.
pub fn viterbi(emissions: ArrayView2<f64>, trans: &Transitions) -> (Vec<usize>, f64) {
    let (len, k) = emissions.dim();
    assert!(len > 0, "viterbi on an empty sequence");
    let mut delta: Vec<f64> = (0..k).map(|j| trans.start[j] + emissions[[0, j]]).collect();
    let mut back = vec![vec![0usize; k]; len];
    for t in 1..len {
        let mut next = vec![0.0; k];
        for j in 0..k {
            let mut best_i = 0;
            let mut best = delta[0] + trans.matrix[[0, j]];
            for i in 1..k {
                let s = delta[i] + trans.matrix[[i, j]];
                if s > best {
                    best = s;
                    best_i = i;
                }
            }
            next[j] = best + emissions[[t, j]];
            back[t][j] = best_i;
        }
        delta = next;
    }
    let mut last = 0;
    let mut best = delta[0] + trans.end[0];
    for j in 1..k {
        let s = delta[j] + trans.end[j];
        if s > best {
            best = s;
            last = j;
        }
    }
    let mut path = vec![0; len];
    path[len - 1] = last;
    for t in (1..len).rev() {
        path[t - 1] = back[t][path[t]];
    }
    // Rescored in path order so the value matches `path_score` bit for bit.
    let score = path_score(emissions, trans, &path);
    (path, score)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Every label path of length `len` over `k` labels.
    fn all_paths(len: usize, k: usize) -> Vec<Vec<usize>> {
        let mut paths = vec![vec![]];
        for _ in 0..len {
            paths = paths
                .into_iter()
                .flat_map(|p| {
                    (0..k).map(move |y| {
                        let mut q = p.clone();
                        q.push(y);
                        q
                    })
                })
                .collect();
        }
        paths
    }

    fn random_instance(rng: &mut ChaCha8Rng) -> (Array2<f64>, Transitions) {
        let len = rng.random_range(1..=6);
        let k = rng.random_range(1..=4);
        let mut draw = || rng.random_range(-3.0..3.0);
        let e = Array2::from_shape_fn((len, k), |_| draw());
        let trans = Transitions {
            matrix: Array2::from_shape_fn((k, k), |_| draw()),
            start: Array1::from_shape_fn(k, |_| draw()),
            end: Array1::from_shape_fn(k, |_| draw()),
        };
        (e, trans)
    }

    #[test]
    fn uniform_potentials() {
        let e = Array2::zeros((2, 2));
        let post = forward_backward(e.view(), &Transitions::zeros(2)).unwrap();
        assert!((post.log_partition - 4f64.ln()).abs() < 1e-12);
        assert!(post.marginals.iter().all(|&m| (m - 0.5).abs() < 1e-12));
    }

    #[test]
    fn matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let (e, trans) = random_instance(&mut rng);
            let (len, k) = e.dim();
            let paths = all_paths(len, k);
            let scores: Vec<f64> = paths.iter().map(|p| path_score(e.view(), &trans, p)).collect();
            let log_z = log_sum_exp(scores.iter().copied());
            let post = forward_backward(e.view(), &trans).unwrap();
            assert!((post.log_partition - log_z).abs() < 1e-8);
            for t in 0..len {
                for y in 0..k {
                    let m: f64 = paths
                        .iter()
                        .zip(&scores)
                        .filter(|(p, _)| p[t] == y)
                        .map(|(_, s)| (s - log_z).exp())
                        .sum();
                    assert!((post.marginals[[t, y]] - m).abs() < 1e-8);
                }
                assert!((post.marginals.row(t).sum() - 1.0).abs() < 1e-9);
            }
            let (best, best_score) = viterbi(e.view(), &trans);
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(best_score, max);
            assert_eq!(path_score(e.view(), &trans, &best), max);
        }
    }

    #[test]
    fn viterbi_follows_one_hot_emissions() {
        let e = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let (path, _) = viterbi(e.view(), &Transitions::zeros(3));
        assert_eq!(path, vec![0, 1]);
    }

    #[test]
    fn viterbi_ties_pick_lowest_label() {
        let e = Array2::from_elem((5, 3), 0.7);
        let (path, _) = viterbi(e.view(), &Transitions::zeros(3));
        assert_eq!(path, vec![0; 5]);
    }

    #[test]
    fn rejects_non_finite_scores() {
        let e = array![[f64::NAN, 0.0]];
        assert_eq!(
            forward_backward(e.view(), &Transitions::zeros(2)).unwrap_err(),
            CrfError::NonFiniteScore("emissions")
        );
        let mut trans = Transitions::zeros(2);
        trans.end[1] = f64::INFINITY;
        assert!(forward_backward(Array2::zeros((1, 2)).view(), &trans).is_err());
    }

    #[test]
    fn pair_marginals_sum_to_transition_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (e, trans) = random_instance(&mut rng);
            let post = forward_backward(e.view(), &trans).unwrap();
            let expected = (e.nrows() - 1) as f64;
            assert!((post.pair_marginals.sum() - expected).abs() < 1e-9);
        }
    }
}
