//! CRF sequence tagger over learned windowed token features.
//!
//! Each token's input is the concatenation of the embeddings of the tokens in
//! a `[-window, +window]` context (out-of-range positions use the padding
//! row). One `tanh` hidden layer maps it to a feature vector; in the role task
//! the hidden pre-activation also receives `span_flag` when the token lies in
//! the conditioning product span. Emissions are an affine map of the
//! (optionally dropped-out) hidden layer, decoded by a linear-chain CRF.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{LabelScheme, SentenceBlock, TaskKind};
use crate::crf::{self, CrfError, EmissionMatrix, Transitions};
use crate::seed;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
const PAD: usize = 0;
const UNK: usize = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("column {column} out of range for sentence {sentence}")]
    IndexOutOfRange { sentence: usize, column: usize },
    #[error(transparent)]
    Crf(#[from] CrfError),
    #[error("training needs at least one labeled sentence")]
    EmptyLabeledSet,
    #[error("MC dropout needs at least 2 passes, got {0}")]
    InvalidT(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub dropout_rate: f64,
    pub window: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden_dim: 64,
            dropout_rate: 0.1,
            window: 1,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(ModelError::InvalidConfig("dimensions must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::InvalidConfig("dropout_rate must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn input_dim(&self) -> usize {
        (2 * self.window + 1) * self.embed_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_per_round: usize,
    pub batch_size: usize,
    /// Step size for transition, start and end scores.
    pub lr_crf: f64,
    /// Step size for every other parameter.
    pub lr_features: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_task(TaskKind::ProductExtraction)
    }
}

impl TrainConfig {
    pub fn for_task(task: TaskKind) -> Self {
        Self {
            epochs_per_round: 2,
            batch_size: match task {
                TaskKind::ProductExtraction => 16,
                TaskKind::RoleLabeling => 6,
            },
            lr_crf: 5e-3,
            lr_features: 1e-2,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.epochs_per_round == 0 || self.batch_size == 0 {
            return Err(ModelError::InvalidConfig("epochs and batch size must be positive".into()));
        }
        if !(self.lr_crf >= 0.0 && self.lr_features >= 0.0) {
            return Err(ModelError::InvalidConfig("learning rates must be non-negative".into()));
        }
        Ok(())
    }
}

/// How per-token distributions are read off the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbMode {
    /// Row-wise softmax of the emission scores.
    #[default]
    EmissionSoftmax,
    /// CRF posterior marginals from forward-backward.
    CrfMarginal,
}

/// Per-token label distributions for one sentence column.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbTensor {
    pub probs: Array2<f64>,
    pub valid_mask: Vec<bool>,
}

impl ProbTensor {
    pub fn new(probs: Array2<f64>) -> Self {
        let valid_mask = vec![true; probs.nrows()];
        Self { probs, valid_mask }
    }

    pub fn num_labels(&self) -> usize {
        self.probs.ncols()
    }

    /// Rows at valid positions.
    pub fn valid_rows(&self) -> impl Iterator<Item = ndarray::ArrayView1<'_, f64>> {
        self.probs
            .rows()
            .into_iter()
            .zip(&self.valid_mask)
            .filter(|(_, &v)| v)
            .map(|(r, _)| r)
    }
}

/// Token to embedding-row map. Rows 0 and 1 are padding and unknown.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut distinct: Vec<&str> = tokens.into_iter().collect();
        distinct.sort_unstable();
        distinct.dedup();
        let mut all = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        all.extend(
            distinct
                .into_iter()
                .filter(|t| *t != PAD_TOKEN && *t != UNK_TOKEN)
                .map(str::to_string),
        );
        Self::from_list(all)
    }

    pub fn from_blocks(blocks: &[SentenceBlock]) -> Self {
        Self::from_tokens(blocks.iter().flat_map(|b| b.tokens.iter().map(String::as_str)))
    }

    fn from_list(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }
}

/// Trainable state. Also used as the gradient container, with the same
/// shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub token_embeddings: Array2<f64>,
    pub hidden_weights: Array2<f64>,
    pub hidden_bias: Array1<f64>,
    /// Added to the hidden pre-activation of tokens inside the conditioning
    /// product span. Empty for the product task.
    pub span_flag: Array1<f64>,
    pub emission_weights: Array2<f64>,
    pub emission_bias: Array1<f64>,
    pub transitions: Transitions,
}

pub const PARAM_BLOCKS: [&str; 9] = [
    "token_embeddings",
    "hidden_weights",
    "hidden_bias",
    "span_flag",
    "emission_weights",
    "emission_bias",
    "transitions",
    "start",
    "end",
];

impl ModelParams {
    fn init(
        vocab: usize,
        labels: usize,
        task: TaskKind,
        cfg: &FeatureConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let mut uniform = |shape: (usize, usize), bound: f64| {
            Array2::from_shape_simple_fn(shape, || rng.random_range(-bound..bound))
        };
        let mut token_embeddings = uniform((vocab, cfg.embed_dim), 0.5);
        token_embeddings.row_mut(PAD).fill(0.0);
        let d = cfg.input_dim();
        let h = cfg.hidden_dim;
        let hidden_weights = uniform((h, d), (6.0 / (d + h) as f64).sqrt());
        let emission_weights = uniform((labels, h), (6.0 / (h + labels) as f64).sqrt());
        let span_flag = match task {
            TaskKind::ProductExtraction => Array1::zeros(0),
            TaskKind::RoleLabeling => uniform((1, h), 0.5).row(0).to_owned(),
        };
        Self {
            token_embeddings,
            hidden_weights,
            hidden_bias: Array1::zeros(h),
            span_flag,
            emission_weights,
            emission_bias: Array1::zeros(labels),
            transitions: Transitions::zeros(labels),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            token_embeddings: Array2::zeros(self.token_embeddings.raw_dim()),
            hidden_weights: Array2::zeros(self.hidden_weights.raw_dim()),
            hidden_bias: Array1::zeros(self.hidden_bias.len()),
            span_flag: Array1::zeros(self.span_flag.len()),
            emission_weights: Array2::zeros(self.emission_weights.raw_dim()),
            emission_bias: Array1::zeros(self.emission_bias.len()),
            transitions: Transitions::zeros(self.transitions.num_labels()),
        }
    }

    /// Parameter blocks in [`PARAM_BLOCKS`] order, with their shapes.
    pub fn blocks(&self) -> Vec<(&'static str, (usize, usize), &[f64])> {
        let m = |a: &Array2<f64>| a.dim();
        let v = |a: &Array1<f64>| (1, a.len());
        vec![
            ("token_embeddings", m(&self.token_embeddings), self.token_embeddings.as_slice().unwrap()),
            ("hidden_weights", m(&self.hidden_weights), self.hidden_weights.as_slice().unwrap()),
            ("hidden_bias", v(&self.hidden_bias), self.hidden_bias.as_slice().unwrap()),
            ("span_flag", v(&self.span_flag), self.span_flag.as_slice().unwrap()),
            ("emission_weights", m(&self.emission_weights), self.emission_weights.as_slice().unwrap()),
            ("emission_bias", v(&self.emission_bias), self.emission_bias.as_slice().unwrap()),
            ("transitions", m(&self.transitions.matrix), self.transitions.matrix.as_slice().unwrap()),
            ("start", v(&self.transitions.start), self.transitions.start.as_slice().unwrap()),
            ("end", v(&self.transitions.end), self.transitions.end.as_slice().unwrap()),
        ]
    }

    pub fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("token_embeddings", self.token_embeddings.as_slice_mut().unwrap()),
            ("hidden_weights", self.hidden_weights.as_slice_mut().unwrap()),
            ("hidden_bias", self.hidden_bias.as_slice_mut().unwrap()),
            ("span_flag", self.span_flag.as_slice_mut().unwrap()),
            ("emission_weights", self.emission_weights.as_slice_mut().unwrap()),
            ("emission_bias", self.emission_bias.as_slice_mut().unwrap()),
            ("transitions", self.transitions.matrix.as_slice_mut().unwrap()),
            ("start", self.transitions.start.as_slice_mut().unwrap()),
            ("end", self.transitions.end.as_slice_mut().unwrap()),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|(_, _, v)| v.iter().all(|x| x.is_finite()))
    }

    fn is_crf_block(name: &str) -> bool {
        matches!(name, "transitions" | "start" | "end")
    }

    fn sgd_step(&mut self, grad: &ModelParams, lr_crf: f64, lr_features: f64) {
        for ((name, p), (_, _, g)) in self.blocks_mut().into_iter().zip(grad.blocks()) {
            let lr = if Self::is_crf_block(name) { lr_crf } else { lr_features };
            if lr == 0.0 {
                continue;
            }
            for (p, g) in p.iter_mut().zip(g) {
                *p -= lr * g;
            }
        }
    }
}

/// Dropout to apply on the hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dropout {
    Off,
    /// Inverted dropout with a mask drawn from this seed.
    Mask(u64),
}

/// Everything computed on the way to the emissions of one sentence column.
struct Activations {
    /// Embedding row per (position, window slot).
    window_ids: Vec<usize>,
    inputs: Array2<f64>,
    hidden: Array2<f64>,
    /// Scaled keep-mask, when dropout is active.
    mask: Option<Array2<f64>>,
    flags: Vec<f64>,
    emissions: EmissionMatrix,
}

/// A CRF tagger: label scheme, features, vocabulary and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Tagger {
    pub scheme: LabelScheme,
    pub features: FeatureConfig,
    pub vocab: Vocab,
    pub params: ModelParams,
}

impl Tagger {
    /// Seeded random initialization.
    pub fn new(
        scheme: LabelScheme,
        features: FeatureConfig,
        vocab: Vocab,
        seed: u64,
    ) -> Result<Self, ModelError> {
        features.validate()?;
        let mut rng = seed::rng(seed);
        let params =
            ModelParams::init(vocab.len(), scheme.num_labels(), scheme.task, &features, &mut rng);
        Ok(Self {
            scheme,
            features,
            vocab,
            params,
        })
    }

    pub fn num_labels(&self) -> usize {
        self.scheme.num_labels()
    }

    fn span_flags(&self, block: &SentenceBlock, column: Option<usize>) -> Result<Vec<f64>, ModelError> {
        let n = block.len();
        match (self.scheme.task, column) {
            (TaskKind::RoleLabeling, Some(c)) => {
                let flags = block.span_flags(c).ok_or(ModelError::IndexOutOfRange {
                    sentence: block.id,
                    column: c,
                })?;
                Ok(flags.into_iter().map(|f| if f { 1.0 } else { 0.0 }).collect())
            }
            (TaskKind::ProductExtraction, Some(c)) if c >= block.num_columns().max(1) => {
                Err(ModelError::IndexOutOfRange {
                    sentence: block.id,
                    column: c,
                })
            }
            _ => Ok(vec![0.0; n]),
        }
    }

    fn activate(
        &self,
        block: &SentenceBlock,
        column: Option<usize>,
        dropout: Dropout,
    ) -> Result<Activations, ModelError> {
        let p = &self.params;
        let cfg = &self.features;
        let len = block.len();
        let w = cfg.window as isize;
        let e = cfg.embed_dim;
        let ids: Vec<usize> = block.tokens.iter().map(|t| self.vocab.lookup(t)).collect();

        let slots = 2 * cfg.window + 1;
        let mut window_ids = Vec::with_capacity(len * slots);
        let mut inputs = Array2::<f64>::zeros((len, cfg.input_dim()));
        for t in 0..len {
            for (slot, offset) in (-w..=w).enumerate() {
                let pos = t as isize + offset;
                let id = if pos < 0 || pos >= len as isize {
                    PAD
                } else {
                    ids[pos as usize]
                };
                window_ids.push(id);
                inputs
                    .slice_mut(s![t, slot * e..(slot + 1) * e])
                    .assign(&p.token_embeddings.row(id));
            }
        }

        let flags = self.span_flags(block, column)?;
        let mut hidden = inputs.dot(&p.hidden_weights.t());
        hidden += &p.hidden_bias;
        if !p.span_flag.is_empty() {
            for (t, &f) in flags.iter().enumerate() {
                if f != 0.0 {
                    hidden.row_mut(t).scaled_add(f, &p.span_flag);
                }
            }
        }
        hidden.mapv_inplace(f64::tanh);

        let mask = match dropout {
            Dropout::Mask(seed) if cfg.dropout_rate > 0.0 => {
                let mut rng = seed::rng(seed);
                let keep = 1.0 / (1.0 - cfg.dropout_rate);
                Some(Array2::from_shape_simple_fn(hidden.raw_dim(), || {
                    if rng.random::<f64>() < cfg.dropout_rate {
                        0.0
                    } else {
                        keep
                    }
                }))
            }
            _ => None,
        };
        let dropped = match &mask {
            Some(m) => &hidden * m,
            None => hidden.clone(),
        };
        let mut emissions = dropped.dot(&p.emission_weights.t());
        emissions += &p.emission_bias;
        Ok(Activations {
            window_ids,
            inputs,
            hidden,
            mask,
            flags,
            emissions,
        })
    }

    /// Hidden-layer feature vectors, one row per token, after dropout.
    pub fn featurize(
        &self,
        block: &SentenceBlock,
        column: usize,
        dropout: Dropout,
    ) -> Result<Array2<f64>, ModelError> {
        let act = self.activate(block, Some(column), dropout)?;
        Ok(match act.mask {
            Some(m) => act.hidden * m,
            None => act.hidden,
        })
    }

    pub fn emissions(
        &self,
        block: &SentenceBlock,
        column: usize,
        dropout: Dropout,
    ) -> Result<EmissionMatrix, ModelError> {
        Ok(self.activate(block, Some(column), dropout)?.emissions)
    }

    /// Negative log-likelihood of the gold columns and its exact gradient.
    pub fn nll_and_gradient(
        &self,
        batch: &[(&SentenceBlock, usize)],
    ) -> Result<(f64, ModelParams), ModelError> {
        self.nll_and_gradient_with(batch, |_| Dropout::Off)
    }

    fn nll_and_gradient_with(
        &self,
        batch: &[(&SentenceBlock, usize)],
        dropout_for: impl Fn(usize) -> Dropout,
    ) -> Result<(f64, ModelParams), ModelError> {
        let p = &self.params;
        let mut grad = p.zeros_like();
        let mut loss = 0.0;
        let e = self.features.embed_dim;
        let slots = 2 * self.features.window + 1;
        for (i, &(block, column)) in batch.iter().enumerate() {
            if block.is_empty() {
                continue;
            }
            let gold = block.label_columns.get(column).ok_or(ModelError::IndexOutOfRange {
                sentence: block.id,
                column,
            })?;
            let act = self.activate(block, Some(column), dropout_for(i))?;
            let post = crf::forward_backward(act.emissions.view(), &p.transitions)?;
            let gold_score = crf::path_score(act.emissions.view(), &p.transitions, gold);
            loss += post.log_partition - gold_score;

            // CRF part.
            let mut d_emissions = post.marginals;
            for (t, &y) in gold.iter().enumerate() {
                d_emissions[[t, y]] -= 1.0;
            }
            grad.transitions.matrix += &post.pair_marginals;
            for pair in gold.windows(2) {
                grad.transitions.matrix[[pair[0], pair[1]]] -= 1.0;
            }
            // Start/end gradients are the first/last marginal rows minus gold.
            grad.transitions.start += &d_emissions.row(0);
            grad.transitions.end += &d_emissions.row(gold.len() - 1);

            // Emission layer.
            let dropped = match &act.mask {
                Some(m) => &act.hidden * m,
                None => act.hidden.clone(),
            };
            grad.emission_weights += &d_emissions.t().dot(&dropped);
            grad.emission_bias += &d_emissions.sum_axis(Axis(0));
            let mut d_hidden = d_emissions.dot(&p.emission_weights);
            if let Some(m) = &act.mask {
                d_hidden *= m;
            }

            // Hidden layer.
            let d_pre = d_hidden * act.hidden.mapv(|h| 1.0 - h * h);
            grad.hidden_weights += &d_pre.t().dot(&act.inputs);
            grad.hidden_bias += &d_pre.sum_axis(Axis(0));
            if !p.span_flag.is_empty() {
                for (t, &f) in act.flags.iter().enumerate() {
                    if f != 0.0 {
                        grad.span_flag.scaled_add(f, &d_pre.row(t));
                    }
                }
            }
            let d_inputs = d_pre.dot(&p.hidden_weights);
            for t in 0..block.len() {
                for slot in 0..slots {
                    let id = act.window_ids[t * slots + slot];
                    grad.token_embeddings
                        .row_mut(id)
                        .scaled_add(1.0, &d_inputs.slice(s![t, slot * e..(slot + 1) * e]));
                }
            }
        }
        Ok((loss, grad))
    }

    /// Summed NLL over every column of `blocks`, dropout off.
    pub fn total_nll(&self, blocks: &[&SentenceBlock]) -> Result<f64, ModelError> {
        let mut loss = 0.0;
        for block in blocks {
            for column in 0..block.num_columns() {
                let em = self.emissions(block, column, Dropout::Off)?;
                let post = crf::forward_backward(em.view(), &self.params.transitions)?;
                let gold = crf::path_score(em.view(), &self.params.transitions, &block.label_columns[column]);
                loss += post.log_partition - gold;
            }
        }
        Ok(loss)
    }

    /// Seeded minibatch SGD for `config.epochs_per_round` epochs. Returns the
    /// updated tagger; `self` is left untouched.
    pub fn train(
        &self,
        blocks: &[&SentenceBlock],
        config: &TrainConfig,
        seed: u64,
    ) -> Result<Tagger, ModelError> {
        self.train_epochs(blocks, config, config.epochs_per_round, seed, |_, _| Ok(()))
    }

    /// Like [`Tagger::train`], returning the full-data NLL before training and
    /// after every epoch.
    pub fn train_logged(
        &self,
        blocks: &[&SentenceBlock],
        config: &TrainConfig,
        seed: u64,
    ) -> Result<(Tagger, Vec<f64>), ModelError> {
        let mut history = vec![self.total_nll(blocks)?];
        let trained = self.train_epochs(blocks, config, config.epochs_per_round, seed, |m, _| {
            history.push(m.total_nll(blocks)?);
            Ok(())
        })?;
        Ok((trained, history))
    }

    pub(crate) fn train_epochs(
        &self,
        blocks: &[&SentenceBlock],
        config: &TrainConfig,
        epochs: usize,
        seed: u64,
        mut after_epoch: impl FnMut(&Tagger, usize) -> Result<(), ModelError>,
    ) -> Result<Tagger, ModelError> {
        config.validate()?;
        // One example per (sentence, column).
        let examples: Vec<(&SentenceBlock, usize)> = blocks
            .iter()
            .flat_map(|b| (0..b.num_columns()).map(move |c| (*b, c)))
            .filter(|(b, _)| !b.is_empty())
            .collect();
        if examples.is_empty() {
            return Err(ModelError::EmptyLabeledSet);
        }
        let mut model = self.clone();
        let mut rng = seed::rng(seed);
        let mut order: Vec<usize> = (0..examples.len()).collect();
        for epoch in 0..epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(config.batch_size) {
                let batch: Vec<(&SentenceBlock, usize)> = chunk.iter().map(|&i| examples[i]).collect();
                let batch_seed: u64 = rng.random();
                let (_, grad) = model.nll_and_gradient_with(&batch, |i| {
                    Dropout::Mask(seed::substream(batch_seed, i as u64))
                })?;
                model.params.sgd_step(&grad, config.lr_crf, config.lr_features);
            }
            if !model.params.is_finite() {
                return Err(ModelError::Crf(CrfError::NonFiniteScore("parameters after update")));
            }
            after_epoch(&model, epoch)?;
        }
        Ok(model)
    }

    pub fn predict_probs(
        &self,
        block: &SentenceBlock,
        column: usize,
        mode: ProbMode,
    ) -> Result<ProbTensor, ModelError> {
        self.probs_with(block, column, mode, Dropout::Off)
    }

    fn probs_with(
        &self,
        block: &SentenceBlock,
        column: usize,
        mode: ProbMode,
        dropout: Dropout,
    ) -> Result<ProbTensor, ModelError> {
        let em = self.emissions(block, column, dropout)?;
        let probs = match mode {
            ProbMode::EmissionSoftmax => softmax_rows(&em),
            ProbMode::CrfMarginal => {
                crf::forward_backward(em.view(), &self.params.transitions)?.marginals
            }
        };
        Ok(ProbTensor::new(probs))
    }

    /// `passes` stochastic forward passes; pass `t` uses mask seed
    /// `base_seed + t`.
    pub fn mc_passes(
        &self,
        block: &SentenceBlock,
        column: usize,
        passes: usize,
        base_seed: u64,
        mode: ProbMode,
    ) -> Result<Vec<ProbTensor>, ModelError> {
        if passes < 2 {
            return Err(ModelError::InvalidT(passes));
        }
        (0..passes)
            .map(|t| {
                self.probs_with(block, column, mode, Dropout::Mask(base_seed.wrapping_add(t as u64)))
            })
            .collect()
    }

    /// Mean of the hidden-layer vectors over tokens, dropout off, no span
    /// conditioning.
    pub fn sentence_embedding(&self, block: &SentenceBlock) -> Array1<f64> {
        if block.is_empty() {
            return Array1::zeros(self.features.hidden_dim);
        }
        let act = self
            .activate(block, None, Dropout::Off)
            .expect("unconditioned activation cannot fail");
        act.hidden.mean_axis(Axis(0)).unwrap()
    }

    pub fn decode(&self, block: &SentenceBlock, column: usize) -> Result<Vec<usize>, ModelError> {
        if block.is_empty() {
            return Ok(Vec::new());
        }
        let em = self.emissions(block, column, Dropout::Off)?;
        Ok(crf::viterbi(em.view(), &self.params.transitions).0)
    }

    /// Text checkpoint: header, vocabulary, then each parameter block with its
    /// shape. Floats use the shortest representation that round-trips.
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::new();
        let task = match self.scheme.task {
            TaskKind::ProductExtraction => "product",
            TaskKind::RoleLabeling => "role",
        };
        let f = &self.features;
        let _ = writeln!(out, "seqal-tagger v1");
        let _ = writeln!(out, "task {task}");
        let _ = writeln!(
            out,
            "features {} {} {} {}",
            f.embed_dim, f.hidden_dim, f.dropout_rate, f.window
        );
        let _ = writeln!(out, "vocab {}", self.vocab.len());
        for token in &self.vocab.tokens {
            let _ = writeln!(out, "{token}");
        }
        for (name, (rows, cols), values) in self.params.blocks() {
            let _ = writeln!(out, "array {name} {rows} {cols}");
            for r in 0..rows {
                let row = &values[r * cols..(r + 1) * cols];
                let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                let _ = writeln!(out, "{}", line.join(" "));
            }
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Tagger, ModelError> {
        let bad = |msg: &str| ModelError::Checkpoint(msg.to_string());
        let mut lines = text.lines();
        if lines.next() != Some("seqal-tagger v1") {
            return Err(bad("missing header"));
        }
        let task = match lines.next() {
            Some("task product") => TaskKind::ProductExtraction,
            Some("task role") => TaskKind::RoleLabeling,
            _ => return Err(bad("bad task line")),
        };
        let feat: Vec<&str> = lines
            .next()
            .and_then(|l| l.strip_prefix("features "))
            .ok_or_else(|| bad("bad features line"))?
            .split(' ')
            .collect();
        if feat.len() != 4 {
            return Err(bad("bad features line"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad integer"));
        let features = FeatureConfig {
            embed_dim: num(feat[0])?,
            hidden_dim: num(feat[1])?,
            dropout_rate: feat[2].parse().map_err(|_| bad("bad dropout rate"))?,
            window: num(feat[3])?,
        };
        let n_vocab = num(lines
            .next()
            .and_then(|l| l.strip_prefix("vocab "))
            .ok_or_else(|| bad("bad vocab line"))?)?;
        let mut tokens = Vec::with_capacity(n_vocab);
        for _ in 0..n_vocab {
            tokens.push(lines.next().ok_or_else(|| bad("truncated vocabulary"))?.to_string());
        }
        let scheme = LabelScheme::for_task(task);
        let vocab = Vocab::from_list(tokens);
        let mut tagger = Tagger {
            params: ModelParams::init(vocab.len(), scheme.num_labels(), task, &features, &mut seed::rng(0)),
            scheme,
            features,
            vocab,
        };
        let expected: Vec<(usize, usize)> = tagger.params.blocks().iter().map(|b| b.1).collect();
        for ((name, dest), (rows, cols)) in tagger.params.blocks_mut().into_iter().zip(expected) {
            let header = lines.next().ok_or_else(|| bad("truncated arrays"))?;
            if header != format!("array {name} {rows} {cols}") {
                return Err(ModelError::Checkpoint(format!("expected block {name} {rows}x{cols}, found {header:?}")));
            }
            let mut k = 0;
            for _ in 0..rows {
                let line = lines.next().ok_or_else(|| bad("truncated array"))?;
                for v in line.split(' ').filter(|s| !s.is_empty()) {
                    if k >= dest.len() {
                        return Err(bad("too many values"));
                    }
                    dest[k] = v.parse().map_err(|_| bad("bad float"))?;
                    k += 1;
                }
            }
            if k != dest.len() {
                return Err(ModelError::Checkpoint(format!("block {name}: expected {} values, found {k}", dest.len())));
            }
        }
        Ok(tagger)
    }
}

pub fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SynthSpec};

    fn small_tagger(task: TaskKind, features: FeatureConfig) -> (Tagger, Vec<SentenceBlock>) {
        let spec = SynthSpec {
            task,
            entity_rate: 0.5,
            length_range: (2, 6),
            n_sentences: crate::corpus::SplitSizes { train: 20, val: 0, test: 0 },
            vocab_size: 30,
            ..SynthSpec::default()
        };
        let corpus = generate_synthetic(&spec).unwrap();
        let vocab = Vocab::from_blocks(&corpus.train);
        let tagger = Tagger::new(corpus.scheme.clone(), features, vocab, 3).unwrap();
        (tagger, corpus.train)
    }

    fn tiny_features() -> FeatureConfig {
        FeatureConfig {
            embed_dim: 4,
            hidden_dim: 5,
            dropout_rate: 0.2,
            window: 1,
        }
    }

    #[test]
    fn zero_rate_dropout_is_identity() {
        let (mut tagger, blocks) = small_tagger(TaskKind::ProductExtraction, tiny_features());
        tagger.features.dropout_rate = 0.0;
        let a = tagger.featurize(&blocks[0], 0, Dropout::Off).unwrap();
        let b = tagger.featurize(&blocks[0], 0, Dropout::Mask(99)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn same_mask_seed_same_features() {
        let (tagger, blocks) = small_tagger(TaskKind::ProductExtraction, tiny_features());
        let a = tagger.featurize(&blocks[1], 0, Dropout::Mask(5)).unwrap();
        let b = tagger.featurize(&blocks[1], 0, Dropout::Mask(5)).unwrap();
        assert_eq!(a, b);
        let c = tagger.featurize(&blocks[1], 0, Dropout::Mask(6)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn identical_context_gives_identical_features() {
        let (tagger, _) = small_tagger(TaskKind::ProductExtraction, tiny_features());
        let block = SentenceBlock {
            id: 0,
            tokens: ["w1", "w1", "w1", "w1"].map(String::from).to_vec(),
            label_columns: vec![vec![0; 4]],
            product_spans: vec![],
        };
        let f = tagger.featurize(&block, 0, Dropout::Off).unwrap();
        assert_eq!(f.row(1), f.row(2));
        assert_ne!(f.row(0), f.row(1));
    }

    #[test]
    fn role_task_needs_a_span_per_column() {
        let (tagger, blocks) = small_tagger(TaskKind::RoleLabeling, tiny_features());
        let b = &blocks[0];
        let err = tagger.featurize(b, b.num_columns(), Dropout::Off).unwrap_err();
        assert!(matches!(err, ModelError::IndexOutOfRange { .. }));
    }

    #[test]
    fn span_flag_changes_features_only_in_span() {
        let (tagger, blocks) = small_tagger(TaskKind::RoleLabeling, tiny_features());
        let b = blocks.iter().find(|b| b.num_columns() == 2).expect("a two-product block");
        let f0 = tagger.featurize(b, 0, Dropout::Off).unwrap();
        let f1 = tagger.featurize(b, 1, Dropout::Off).unwrap();
        let (s0, e0) = b.product_spans[0];
        let (s1, e1) = b.product_spans[1];
        for t in 0..b.len() {
            let inside = (s0..=e0).contains(&t) || (s1..=e1).contains(&t);
            assert_eq!(f0.row(t) != f1.row(t), inside, "token {t}");
        }
    }

    #[test]
    fn loss_is_nonnegative_and_additive() {
        let (tagger, blocks) = small_tagger(TaskKind::ProductExtraction, tiny_features());
        let (one, _) = tagger.nll_and_gradient(&[(&blocks[0], 0)]).unwrap();
        let (two, _) = tagger.nll_and_gradient(&[(&blocks[0], 0), (&blocks[0], 0)]).unwrap();
        assert!(one >= 0.0);
        assert!((two - 2.0 * one).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rates_leave_params_unchanged() {
        let (tagger, blocks) = small_tagger(TaskKind::ProductExtraction, tiny_features());
        let refs: Vec<&SentenceBlock> = blocks.iter().collect();
        let cfg = TrainConfig {
            lr_crf: 0.0,
            lr_features: 0.0,
            ..TrainConfig::default()
        };
        let trained = tagger.train(&refs, &cfg, 1).unwrap();
        assert_eq!(trained.params, tagger.params);
    }

    #[test]
    fn training_is_deterministic() {
        let (tagger, blocks) = small_tagger(TaskKind::RoleLabeling, tiny_features());
        let refs: Vec<&SentenceBlock> = blocks.iter().collect();
        let cfg = TrainConfig::for_task(TaskKind::RoleLabeling);
        let a = tagger.train(&refs, &cfg, 8).unwrap();
        let b = tagger.train(&refs, &cfg, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params, tagger.params);
    }

    #[test]
    fn empty_labeled_set_is_rejected() {
        let (tagger, _) = small_tagger(TaskKind::ProductExtraction, tiny_features());
        assert!(matches!(
            tagger.train(&[], &TrainConfig::default(), 0),
            Err(ModelError::EmptyLabeledSet)
        ));
    }

    #[test]
    fn uniform_emissions_give_uniform_probs() {
        let (mut tagger, blocks) = small_tagger(TaskKind::ProductExtraction, tiny_features());
        tagger.params.emission_weights.fill(0.0);
        for mode in [ProbMode::EmissionSoftmax, ProbMode::CrfMarginal] {
            let p = tagger.predict_probs(&blocks[0], 0, mode).unwrap();
            for v in p.probs.iter() {
                assert!((v - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn modes_coincide_without_transitions() {
        let (tagger, blocks) = small_tagger(TaskKind::RoleLabeling, tiny_features());
        for b in &blocks {
            for c in 0..b.num_columns() {
                let a = tagger.predict_probs(b, c, ProbMode::EmissionSoftmax).unwrap();
                let m = tagger.predict_probs(b, c, ProbMode::CrfMarginal).unwrap();
                for (x, y) in a.probs.iter().zip(m.probs.iter()) {
                    assert!((x - y).abs() < 1e-9);
                }
                for row in a.probs.rows() {
                    assert!((row.sum() - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn mc_passes_contract() {
        let (tagger, blocks) = small_tagger(TaskKind::ProductExtraction, tiny_features());
        let b = &blocks[2];
        assert!(matches!(
            tagger.mc_passes(b, 0, 1, 0, ProbMode::EmissionSoftmax),
            Err(ModelError::InvalidT(1))
        ));
        let a = tagger.mc_passes(b, 0, 10, 40, ProbMode::EmissionSoftmax).unwrap();
        let again = tagger.mc_passes(b, 0, 10, 40, ProbMode::EmissionSoftmax).unwrap();
        assert_eq!(a, again);
        assert!(a.windows(2).any(|w| w[0] != w[1]));

        let mut det = tagger.clone();
        det.features.dropout_rate = 0.0;
        let same = det.mc_passes(b, 0, 10, 40, ProbMode::EmissionSoftmax).unwrap();
        assert!(same.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn embedding_properties() {
        let (mut tagger, blocks) = small_tagger(TaskKind::ProductExtraction, tiny_features());
        let single = SentenceBlock {
            id: 0,
            tokens: vec!["w3".into()],
            label_columns: vec![vec![0]],
            product_spans: vec![],
        };
        let emb = tagger.sentence_embedding(&single);
        let hidden = tagger.featurize(&single, 0, Dropout::Off).unwrap();
        assert_eq!(emb, hidden.row(0));
        assert_eq!(emb.len(), 5);
        assert_eq!(tagger.sentence_embedding(&blocks[0]), tagger.sentence_embedding(&blocks[0].clone()));

        tagger.features.window = 0;
        tagger.params.hidden_weights = Array2::from_shape_fn((5, 4), |(i, j)| (i as f64 - j as f64) * 0.1);
        let mut reversed = blocks[3].clone();
        reversed.tokens.reverse();
        let a = tagger.sentence_embedding(&blocks[3]);
        let b = tagger.sentence_embedding(&reversed);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        for task in [TaskKind::ProductExtraction, TaskKind::RoleLabeling] {
            let (tagger, blocks) = small_tagger(task, tiny_features());
            let refs: Vec<&SentenceBlock> = blocks.iter().collect();
            let trained = tagger.train(&refs, &TrainConfig::for_task(task), 2).unwrap();
            let text = trained.to_checkpoint();
            let loaded = Tagger::from_checkpoint(&text).unwrap();
            assert_eq!(loaded, trained);
            assert_eq!(loaded.to_checkpoint(), text);
        }
        assert!(Tagger::from_checkpoint("nope").is_err());
    }
}
