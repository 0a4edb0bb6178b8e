//! Stratified batch construction.
//!
//! The pool is split into groups by gold label content (entity presence for
//! products, number of distinct roles for role blocks), each group gets a
//! quota proportional to its size, and the strategy runs independently inside
//! every group.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{distinct_role_count, entity_presence, LabelScheme, SentenceBlock, TaskKind};
use crate::model::{ModelError, ProbMode, Tagger};
use crate::seed;
use crate::strategies::{
    self, EmbeddingMatrix, ScoredSentence, StrategyError, StrategyKind, DEFAULT_EPSILON,
    DEFAULT_MC_PASSES,
};

#[derive(Debug, Error)]
pub enum SelectError {
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Stratification key of a block.
pub fn group_key(block: &SentenceBlock, scheme: &LabelScheme) -> usize {
    match scheme.task {
        TaskKind::ProductExtraction => usize::from(entity_presence(block)),
        TaskKind::RoleLabeling => distinct_role_count(block, scheme),
    }
}

/// Largest-remainder apportionment of `budget` over groups, then at least one
/// pick for every non-empty group when the budget allows it.
pub fn allocate_quotas(
    sizes: &BTreeMap<usize, usize>,
    budget: usize,
) -> Result<BTreeMap<usize, usize>, StrategyError> {
    let total: usize = sizes.values().sum();
    if budget > total {
        return Err(StrategyError::BudgetExceedsPool {
            budget,
            pool: total,
        });
    }
    let mut quotas: BTreeMap<usize, usize> = sizes.keys().map(|&g| (g, 0)).collect();
    if budget == 0 {
        return Ok(quotas);
    }
    // Exact share budget*size/total as quotient and integer remainder.
    let mut remainders = Vec::with_capacity(sizes.len());
    let mut assigned = 0;
    for (&g, &size) in sizes {
        let scaled = budget * size;
        quotas.insert(g, scaled / total);
        assigned += scaled / total;
        remainders.push((scaled % total, g));
    }
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, g) in remainders.iter().take(budget - assigned) {
        *quotas.get_mut(&g).unwrap() += 1;
    }

    let non_empty: Vec<usize> = sizes.iter().filter(|(_, &s)| s > 0).map(|(&g, _)| g).collect();
    if budget >= non_empty.len() {
        for &g in &non_empty {
            if quotas[&g] == 0 {
                // Largest quota, lowest key on ties.
                let (&donor, _) = quotas
                    .iter()
                    .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                    .unwrap();
                *quotas.get_mut(&donor).unwrap() -= 1;
                *quotas.get_mut(&g).unwrap() += 1;
            }
        }
    }
    Ok(quotas)
}

/// Strategy plus its knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcquisitionConfig {
    pub strategy: StrategyKind,
    /// MC-dropout passes for BALD.
    pub mc_passes: usize,
    /// Probabilities at or below this are dropped from entropies.
    pub epsilon: f64,
    pub prob_mode: ProbMode,
    /// Apply the strategy per label group; off runs it on the whole pool.
    pub stratify: bool,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        Self {
            strategy: StrategyKind::Random,
            mc_passes: DEFAULT_MC_PASSES,
            epsilon: DEFAULT_EPSILON,
            prob_mode: ProbMode::EmissionSoftmax,
            stratify: true,
        }
    }
}

/// One acquired sentence, as written to the selection log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionEntry {
    pub id: usize,
    pub group: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strategy_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub entries: Vec<SelectionEntry>,
    pub quotas: BTreeMap<usize, usize>,
    /// Oriented score of every pool sentence (uncertainty strategies).
    pub scores: Vec<ScoredSentence>,
    /// Cluster of every pool sentence (CLUSTER+), ids unique across groups.
    pub clusters: HashMap<usize, usize>,
}

impl Selection {
    pub fn ids(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.id).collect()
    }
}

/// A frozen model with the pool and labeled set it selects against.
pub struct Acquisition<'a> {
    pub tagger: &'a Tagger,
    pub pool: &'a [&'a SentenceBlock],
    pub labeled: &'a [&'a SentenceBlock],
    pub config: AcquisitionConfig,
    /// Base seed for MC-dropout passes.
    pub mc_seed: u64,
}

impl Acquisition<'_> {
    /// Oriented score of one sentence, averaged over its label columns.
    pub fn sentence_score(&self, block: &SentenceBlock) -> Result<f64, SelectError> {
        let cfg = &self.config;
        let columns = block.num_columns().max(1);
        let mut total = 0.0;
        for column in 0..columns {
            let score = if cfg.strategy == StrategyKind::BaldBatch {
                let base = seed::substream(self.mc_seed, block.id as u64);
                let passes = self
                    .tagger
                    .mc_passes(block, column, cfg.mc_passes, base, cfg.prob_mode)?;
                strategies::score_bald(&passes, cfg.epsilon)?
            } else {
                let probs = self.tagger.predict_probs(block, column, cfg.prob_mode)?;
                match cfg.strategy {
                    StrategyKind::LeastConfidence => strategies::score_least_confidence(&probs)?,
                    StrategyKind::ModifiedLeastConfidence => strategies::score_mlc(&probs)?,
                    StrategyKind::Margin => -strategies::score_margin(&probs)?,
                    StrategyKind::Entropy => strategies::score_entropy(&probs, cfg.epsilon)?,
                    other => unreachable!("{other} is not an uncertainty strategy"),
                }
            };
            total += score;
        }
        Ok(total / columns as f64)
    }

    fn embeddings(&self, blocks: &[&SentenceBlock]) -> Result<EmbeddingMatrix, StrategyError> {
        let vectors: Vec<_> = blocks.iter().map(|b| self.tagger.sentence_embedding(b)).collect();
        let ids = blocks.iter().map(|b| b.id).collect();
        if vectors.is_empty() {
            let dim = self.tagger.features.hidden_dim;
            return EmbeddingMatrix::new(ids, ndarray::Array2::zeros((0, dim)));
        }
        EmbeddingMatrix::from_vectors(ids, &vectors)
    }

    /// Selects exactly `budget` distinct pool sentences.
    pub fn select(&self, budget: usize, seed: u64) -> Result<Selection, SelectError> {
        let scheme = &self.tagger.scheme;
        let groups: Vec<usize> = self.pool.iter().map(|b| group_key(b, scheme)).collect();
        let group_of: HashMap<usize, usize> =
            self.pool.iter().zip(&groups).map(|(b, &g)| (b.id, g)).collect();

        // Strata: real groups, or a single stratum keyed 0 when unstratified.
        let stratum = |g: usize| if self.config.stratify { g } else { 0 };
        let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (b, &g) in self.pool.iter().zip(&groups) {
            members.entry(stratum(g)).or_default().push(b.id);
        }
        let sizes: BTreeMap<usize, usize> = members.iter().map(|(&g, m)| (g, m.len())).collect();
        let quotas = allocate_quotas(&sizes, budget)?;

        let strategy = self.config.strategy;
        let mut scores = Vec::new();
        let mut score_of = HashMap::new();
        if strategy.is_uncertainty() {
            for block in self.pool {
                let s = self.sentence_score(block)?;
                if !s.is_finite() {
                    return Err(ModelError::Crf(crate::crf::CrfError::NonFiniteScore("acquisition score")).into());
                }
                scores.push(ScoredSentence { id: block.id, score: s });
                score_of.insert(block.id, s);
            }
        }
        let (pool_emb, labeled_emb) = if strategy.needs_embeddings() {
            (Some(self.embeddings(self.pool)?), Some(self.embeddings(self.labeled)?))
        } else {
            (None, None)
        };

        let mut entries = Vec::with_capacity(budget);
        let mut clusters = HashMap::new();
        let mut cluster_offset = 0;
        for (&g, ids) in &members {
            let quota = quotas[&g];
            let group_seed = seed::substream(seed, g as u64);
            let picked = match strategy {
                StrategyKind::Random => strategies::select_random(ids, quota, group_seed)?,
                StrategyKind::CoreSet => strategies::select_coreset(
                    labeled_emb.as_ref().unwrap(),
                    &pool_emb.as_ref().unwrap().subset(ids),
                    quota,
                    group_seed,
                )?,
                StrategyKind::ClusterPlus => {
                    let sel = strategies::select_cluster_plus(
                        &pool_emb.as_ref().unwrap().subset(ids),
                        quota,
                        group_seed,
                    )?;
                    for (&id, &c) in ids.iter().zip(&sel.clusters) {
                        clusters.insert(id, cluster_offset + c);
                    }
                    cluster_offset += sel.k.max(1);
                    sel.picked
                }
                _ => {
                    let group_scores: Vec<ScoredSentence> = ids
                        .iter()
                        .map(|id| ScoredSentence {
                            id: *id,
                            score: score_of[id],
                        })
                        .collect();
                    strategies::rank_and_take(&group_scores, quota)?
                }
            };
            entries.extend(picked.into_iter().map(|id| SelectionEntry {
                id,
                group: group_of[&id],
                strategy_score: score_of.get(&id).copied(),
            }));
        }
        debug_assert_eq!(entries.len(), budget);
        Ok(Selection {
            entries,
            quotas,
            scores,
            clusters,
        })
    }
}
