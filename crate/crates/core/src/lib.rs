//! Pool-based active learning for sequence labeling.
//!
//! A linear-chain CRF tagger over windowed token features is trained round by
//! round on a growing labeled set. Each round an acquisition strategy picks
//! sentences from the unlabeled pool, optionally within label-derived strata.

pub mod cli;
pub mod corpus;
pub mod crf;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod report;
pub mod seed;
pub mod strategies;
pub mod stratified;
