//! Pool-based active-learning simulation.
//!
//! Round `r` (1-based) scores the pool with the model from round `r - 1`
//! (round 0 is the seeded initialization), moves the selected sentences into
//! the labeled set, retrains from the previous parameters on the whole
//! labeled set, and evaluates on the fixed validation and test splits.
//!
//! Seeds come from [`seed::derive`]`(master_seed, round, purpose)`:
//! `Init` at round 0, then `Select`, `McDropout` and `Train` for each round.
//! The passive baseline trains with the round-1 `Train` seed.

use std::collections::HashSet;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, SentenceBlock, TaskKind};
use crate::eval::{self, Metrics};
use crate::model::{FeatureConfig, ModelError, ProbMode, Tagger, TrainConfig, Vocab};
use crate::report::{self, ProjectionSnapshot, ReportError, RoundState};
use crate::seed::{self, Purpose};
use crate::stratified::{Acquisition, AcquisitionConfig, SelectError, Selection};
use crate::strategies::{StrategyKind, DEFAULT_EPSILON, DEFAULT_MC_PASSES};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("{0}")]
    Observer(String),
}

fn default_rounds() -> usize {
    10
}

fn default_fraction() -> f64 {
    0.10
}

fn default_mc() -> usize {
    DEFAULT_MC_PASSES
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub strategy: StrategyKind,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_fraction")]
    pub budget_fraction: f64,
    #[serde(default = "default_mc")]
    pub mc_passes: usize,
    #[serde(default = "default_epsilon")]
    pub entropy_epsilon: f64,
    #[serde(default)]
    pub prob_mode: ProbMode,
    #[serde(default = "default_true")]
    pub stratify: bool,
    /// Training knobs; batch size defaults per task when omitted.
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub emit_embeddings: bool,
}

impl ExperimentConfig {
    pub fn new(task: TaskKind, strategy: StrategyKind) -> Self {
        Self {
            task,
            strategy,
            rounds: default_rounds(),
            budget_fraction: default_fraction(),
            mc_passes: DEFAULT_MC_PASSES,
            entropy_epsilon: DEFAULT_EPSILON,
            prob_mode: ProbMode::EmissionSoftmax,
            stratify: true,
            train: None,
            features: FeatureConfig::default(),
            master_seed: 0,
            emit_embeddings: false,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        self.train.unwrap_or_else(|| TrainConfig::for_task(self.task))
    }

    pub fn acquisition(&self) -> AcquisitionConfig {
        AcquisitionConfig {
            strategy: self.strategy,
            mc_passes: self.mc_passes,
            epsilon: self.entropy_epsilon,
            prob_mode: self.prob_mode,
            stratify: self.stratify,
        }
    }

    pub fn validate(&self, train_size: usize) -> Result<Vec<usize>, ExperimentError> {
        let bad = |m: String| Err(ExperimentError::ConfigInvalid(m));
        if !(self.budget_fraction > 0.0 && self.budget_fraction <= 1.0) {
            return bad(format!("budget_fraction {} not in (0, 1]", self.budget_fraction));
        }
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if self.strategy == StrategyKind::BaldBatch && self.mc_passes < 2 {
            return bad(format!("bald needs mc_passes >= 2, got {}", self.mc_passes));
        }
        if self.entropy_epsilon.is_nan() || self.entropy_epsilon < 0.0 {
            return bad("entropy_epsilon must be non-negative".into());
        }
        self.features
            .validate()
            .map_err(|e| ExperimentError::ConfigInvalid(e.to_string()))?;
        self.train_config()
            .validate()
            .map_err(|e| ExperimentError::ConfigInvalid(e.to_string()))?;
        budget_schedule(train_size, self.budget_fraction, self.rounds)
    }
}

/// `max(1, round(fraction * train_size))`, halves rounded up.
pub fn per_round_budget(train_size: usize, fraction: f64) -> usize {
    ((fraction * train_size as f64).round() as usize).max(1)
}

/// Budget of every round. The last round takes whatever is left when the
/// pool runs short; a round with nothing left is a configuration error.
pub fn budget_schedule(
    train_size: usize,
    fraction: f64,
    rounds: usize,
) -> Result<Vec<usize>, ExperimentError> {
    let per_round = per_round_budget(train_size, fraction);
    let mut remaining = train_size;
    let mut schedule = Vec::with_capacity(rounds);
    for r in 1..=rounds {
        let b = per_round.min(remaining);
        if b == 0 {
            return Err(ExperimentError::ConfigInvalid(format!(
                "pool of {train_size} is exhausted before round {r} of {rounds}"
            )));
        }
        remaining -= b;
        schedule.push(b);
    }
    Ok(schedule)
}

/// Pool/labeled bookkeeping over the train split.
#[derive(Debug, Clone)]
pub struct PoolLedger {
    order: Vec<usize>,
    labeled: HashSet<usize>,
}

impl PoolLedger {
    pub fn new(train_ids: Vec<usize>) -> Self {
        Self {
            order: train_ids,
            labeled: HashSet::new(),
        }
    }

    /// Unlabeled ids, in train-split order.
    pub fn pool(&self) -> Vec<usize> {
        self.order.iter().copied().filter(|id| !self.labeled.contains(id)).collect()
    }

    /// Labeled ids, in train-split order.
    pub fn labeled(&self) -> Vec<usize> {
        self.order.iter().copied().filter(|id| self.labeled.contains(id)).collect()
    }

    pub fn labeled_set(&self) -> &HashSet<usize> {
        &self.labeled
    }

    pub fn n_labeled(&self) -> usize {
        self.labeled.len()
    }

    /// Moves ids from the pool into the labeled set.
    pub fn acquire(&mut self, ids: &[usize]) {
        for id in ids {
            assert!(self.order.contains(id), "id {id} is not in the train split");
            assert!(self.labeled.insert(*id), "id {id} acquired twice");
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub selected: Vec<usize>,
    pub n_labeled: usize,
    pub test: Metrics,
    pub val_f1: f64,
    /// Checkpoint path relative to the run directory.
    pub checkpoint: String,
}

pub fn checkpoint_name(round: usize) -> String {
    format!("checkpoints/round_{round}.params")
}

/// Everything produced by one round, handed to a [`RoundObserver`].
pub struct RoundOutcome<'a> {
    pub record: &'a RoundRecord,
    pub selection: &'a Selection,
    /// Model after this round's training.
    pub tagger: &'a Tagger,
    pub snapshot: Option<&'a ProjectionSnapshot>,
    pub wall_time: Duration,
}

/// Receives round results as soon as they exist.
pub trait RoundObserver {
    fn on_init(&mut self, _tagger: &Tagger) -> Result<(), ExperimentError> {
        Ok(())
    }

    fn on_round(&mut self, outcome: &RoundOutcome) -> Result<(), ExperimentError>;
}

pub struct NoObserver;

impl RoundObserver for NoObserver {
    fn on_round(&mut self, _: &RoundOutcome) -> Result<(), ExperimentError> {
        Ok(())
    }
}

/// Seeded round-0 model.
pub fn initial_tagger(corpus: &Corpus, config: &ExperimentConfig) -> Result<Tagger, ExperimentError> {
    if corpus.scheme.task != config.task {
        return Err(ExperimentError::ConfigInvalid("corpus task differs from config task".into()));
    }
    Ok(Tagger::new(
        corpus.scheme.clone(),
        config.features,
        Vocab::from_blocks(&corpus.train),
        seed::derive(config.master_seed, 0, Purpose::Init),
    )?)
}

fn blocks_by_id<'a>(corpus: &'a Corpus, ids: &[usize]) -> Vec<&'a SentenceBlock> {
    let wanted: HashSet<usize> = ids.iter().copied().collect();
    corpus.train.iter().filter(|b| wanted.contains(&b.id)).collect()
}

/// Acquisition for round `round` against `snapshot`.
pub fn select_round(
    corpus: &Corpus,
    config: &ExperimentConfig,
    snapshot: &Tagger,
    ledger: &PoolLedger,
    round: usize,
    budget: usize,
) -> Result<Selection, ExperimentError> {
    let pool = blocks_by_id(corpus, &ledger.pool());
    let labeled = blocks_by_id(corpus, &ledger.labeled());
    let acquisition = Acquisition {
        tagger: snapshot,
        pool: &pool,
        labeled: &labeled,
        config: config.acquisition(),
        mc_seed: seed::derive(config.master_seed, round, Purpose::McDropout),
    };
    Ok(acquisition.select(budget, seed::derive(config.master_seed, round, Purpose::Select))?)
}

/// Projection of all train embeddings with this round's statuses.
pub fn round_snapshot(
    corpus: &Corpus,
    snapshot: &Tagger,
    labeled_before: &HashSet<usize>,
    selection: &Selection,
    round: usize,
) -> Result<ProjectionSnapshot, ExperimentError> {
    let vectors: Vec<_> = corpus.train.iter().map(|b| snapshot.sentence_embedding(b)).collect();
    let ids = corpus.train.iter().map(|b| b.id).collect();
    let emb = crate::strategies::EmbeddingMatrix::from_vectors(ids, &vectors)
        .map_err(SelectError::from)?;
    let selected: HashSet<usize> = selection.ids().into_iter().collect();
    Ok(report::selection_snapshot(&RoundState {
        round,
        embeddings: Some(&emb),
        labeled_before,
        selected: &selected,
        clusters: &selection.clusters,
    })?)
}

/// Evaluates a trained model into a round record.
pub fn evaluate_round(
    corpus: &Corpus,
    tagger: &Tagger,
    round: usize,
    selected: Vec<usize>,
    n_labeled: usize,
) -> Result<RoundRecord, ExperimentError> {
    let test = eval::evaluate(tagger, &corpus.test)?;
    let val = eval::evaluate(tagger, &corpus.val)?;
    Ok(RoundRecord {
        round,
        selected,
        n_labeled,
        test,
        val_f1: val.f1,
        checkpoint: checkpoint_name(round),
    })
}

pub fn run_experiment(corpus: &Corpus, config: &ExperimentConfig) -> Result<Vec<RoundRecord>, ExperimentError> {
    run_experiment_with(corpus, config, &mut NoObserver)
}

pub fn run_experiment_with(
    corpus: &Corpus,
    config: &ExperimentConfig,
    observer: &mut dyn RoundObserver,
) -> Result<Vec<RoundRecord>, ExperimentError> {
    let schedule = config.validate(corpus.train.len())?;
    let train_cfg = config.train_config();
    let mut tagger = initial_tagger(corpus, config)?;
    observer.on_init(&tagger)?;
    let mut ledger = PoolLedger::new(corpus.train.iter().map(|b| b.id).collect());
    let mut records = Vec::with_capacity(schedule.len());

    for (i, &budget) in schedule.iter().enumerate() {
        let round = i + 1;
        let started = Instant::now();
        let selection = select_round(corpus, config, &tagger, &ledger, round, budget)?;
        let selected = selection.ids();
        let snapshot = if config.emit_embeddings {
            Some(round_snapshot(corpus, &tagger, ledger.labeled_set(), &selection, round)?)
        } else {
            None
        };
        ledger.acquire(&selected);
        let labeled = blocks_by_id(corpus, &ledger.labeled());
        let trained = tagger.train(
            &labeled,
            &train_cfg,
            seed::derive(config.master_seed, round, Purpose::Train),
        )?;
        let record = evaluate_round(corpus, &trained, round, selected, ledger.n_labeled())?;
        log::info!(
            "{} round {round}: labeled={} test_f1={:.4} val_f1={:.4}",
            config.strategy,
            record.n_labeled,
            record.test.f1,
            record.val_f1
        );
        observer.on_round(&RoundOutcome {
            record: &record,
            selection: &selection,
            tagger: &trained,
            snapshot: snapshot.as_ref(),
            wall_time: started.elapsed(),
        })?;
        tagger = trained;
        records.push(record);
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PassiveResult {
    pub test: Metrics,
    pub val_f1: f64,
    pub tagger: Tagger,
}

/// Trains on the whole train split for `rounds * epochs_per_round` epochs.
pub fn run_passive(corpus: &Corpus, config: &ExperimentConfig) -> Result<PassiveResult, ExperimentError> {
    config.validate(corpus.train.len())?;
    let train_cfg = config.train_config();
    let init = initial_tagger(corpus, config)?;
    let all: Vec<&SentenceBlock> = corpus.train.iter().collect();
    let tagger = init.train_epochs(
        &all,
        &train_cfg,
        config.rounds * train_cfg.epochs_per_round,
        seed::derive(config.master_seed, 1, Purpose::Train),
        |_, _| Ok(()),
    )?;
    let test = eval::evaluate(&tagger, &corpus.test)?;
    let val = eval::evaluate(&tagger, &corpus.val)?;
    Ok(PassiveResult {
        test,
        val_f1: val.f1,
        tagger,
    })
}
