//! Column-format corpora with BIO tags.
//!
//! A document holds one token per line with tab-separated columns and a blank
//! line between sentences. Product-extraction files carry `token<TAB>tag`.
//! Role-labeling files carry `token<TAB>product<TAB>role_1<TAB>role_2...`:
//! column 1 marks product spans with `B-Prod`/`I-Prod`, and the i-th product
//! span (in token order) is the product that conditions the i-th role column.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::{self, Purpose};

pub const PRODUCT_TYPE: &str = "Prod";

/// The eight reaction roles of the role-labeling task.
pub const ROLE_NAMES: [&str; 8] = [
    "Reactants",
    "Catalyst_Reagents",
    "Workup_reagents",
    "Reaction",
    "Solvent",
    "Yield",
    "Temperature",
    "Time",
];

/// Max tokens kept per sentence for the product task.
pub const PRODUCT_MAX_LEN: usize = 256;
/// Max tokens kept per sentence for the role task.
pub const ROLE_MAX_LEN: usize = 512;

#[derive(Debug, Error, PartialEq)]
pub enum CorpusError {
    #[error("line {line}: malformed line: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("line {line}: invalid tag {tag:?}")]
    InvalidTag { line: usize, tag: String },
    #[error("line {line}: BIO violation: {tag} does not continue an entity of the same type")]
    BioViolation { line: usize, tag: String },
    #[error("line {line}: block declares {spans} product spans for {columns} role columns")]
    ProductSpanMismatch {
        line: usize,
        spans: usize,
        columns: usize,
    },
    #[error("duplicate sentence id {0}")]
    DuplicateId(usize),
    #[error("InvalidSpec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "product")]
    ProductExtraction,
    #[serde(rename = "role")]
    RoleLabeling,
}

impl TaskKind {
    pub fn max_len(self) -> usize {
        match self {
            TaskKind::ProductExtraction => PRODUCT_MAX_LEN,
            TaskKind::RoleLabeling => ROLE_MAX_LEN,
        }
    }
}

/// Position of a tag within an entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TagPart {
    Outside,
    Begin(usize),
    Inside(usize),
}

/// Ordered tag inventory. Index 0 is `O`; entity type `i` owns indices
/// `2i + 1` (`B-`) and `2i + 2` (`I-`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelScheme {
    pub task: TaskKind,
    pub labels: Vec<String>,
    pub roles: Vec<String>,
    types: Vec<String>,
}

impl LabelScheme {
    pub fn product() -> Self {
        Self::from_types(TaskKind::ProductExtraction, vec![PRODUCT_TYPE.to_string()], Vec::new())
    }

    pub fn role() -> Self {
        let roles: Vec<String> = ROLE_NAMES.iter().map(|r| r.to_string()).collect();
        Self::from_types(TaskKind::RoleLabeling, roles.clone(), roles)
    }

    pub fn for_task(task: TaskKind) -> Self {
        match task {
            TaskKind::ProductExtraction => Self::product(),
            TaskKind::RoleLabeling => Self::role(),
        }
    }

    fn from_types(task: TaskKind, types: Vec<String>, roles: Vec<String>) -> Self {
        let mut labels = vec!["O".to_string()];
        for t in &types {
            labels.push(format!("B-{t}"));
            labels.push(format!("I-{t}"));
        }
        Self {
            task,
            labels,
            roles,
            types,
        }
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    /// Entity type names, in type-index order.
    pub fn entity_types(&self) -> &[String] {
        &self.types
    }

    pub fn tag_index(&self, tag: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == tag)
    }

    pub fn tag_name(&self, index: usize) -> &str {
        &self.labels[index]
    }

    pub fn part(&self, index: usize) -> TagPart {
        match index {
            0 => TagPart::Outside,
            i if i % 2 == 1 => TagPart::Begin((i - 1) / 2),
            i => TagPart::Inside((i - 2) / 2),
        }
    }

    pub fn begin_tag(&self, entity_type: usize) -> usize {
        2 * entity_type + 1
    }

    pub fn inside_tag(&self, entity_type: usize) -> usize {
        2 * entity_type + 2
    }
}

/// Checks one tag column. Returns the position of the first violating tag.
pub fn bio_violation(tags: &[usize], scheme: &LabelScheme) -> Option<usize> {
    let mut prev = TagPart::Outside;
    for (pos, &tag) in tags.iter().enumerate() {
        let part = scheme.part(tag);
        if let TagPart::Inside(t) = part {
            match prev {
                TagPart::Begin(p) | TagPart::Inside(p) if p == t => {}
                _ => return Some(pos),
            }
        }
        prev = part;
    }
    None
}

/// A tokenized sentence and its annotation columns; the unit of acquisition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceBlock {
    pub id: usize,
    pub tokens: Vec<String>,
    pub label_columns: Vec<Vec<usize>>,
    /// Inclusive `(start, end)` product span per label column; role task only.
    pub product_spans: Vec<(usize, usize)>,
}

impl SentenceBlock {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_columns(&self) -> usize {
        self.label_columns.len()
    }

    /// In-span indicator for the product conditioning `column`.
    pub fn span_flags(&self, column: usize) -> Option<Vec<bool>> {
        let &(start, end) = self.product_spans.get(column)?;
        Some((0..self.len()).map(|t| t >= start && t <= end).collect())
    }

    pub fn validate(&self, scheme: &LabelScheme) -> Result<(), String> {
        for (c, column) in self.label_columns.iter().enumerate() {
            if column.len() != self.tokens.len() {
                return Err(format!("sentence {}: column {c} length mismatch", self.id));
            }
            if column.iter().any(|&t| t >= scheme.num_labels()) {
                return Err(format!("sentence {}: column {c} has an unknown tag", self.id));
            }
            if let Some(pos) = bio_violation(column, scheme) {
                return Err(format!("sentence {}: column {c} BIO violation at {pos}", self.id));
            }
        }
        match scheme.task {
            TaskKind::ProductExtraction => {
                if self.label_columns.len() != 1 || !self.product_spans.is_empty() {
                    return Err(format!("sentence {}: product blocks need one column", self.id));
                }
            }
            TaskKind::RoleLabeling => {
                if self.label_columns.is_empty()
                    || self.product_spans.len() != self.label_columns.len()
                {
                    return Err(format!("sentence {}: product spans misaligned", self.id));
                }
                if self
                    .product_spans
                    .iter()
                    .any(|&(s, e)| s > e || e >= self.tokens.len())
                {
                    return Err(format!("sentence {}: product span out of range", self.id));
                }
            }
        }
        Ok(())
    }
}

/// True if any column carries a non-O tag.
pub fn entity_presence(block: &SentenceBlock) -> bool {
    block.label_columns.iter().flatten().any(|&t| t != 0)
}

/// Number of distinct entity types tagged anywhere in the block.
pub fn distinct_role_count(block: &SentenceBlock, scheme: &LabelScheme) -> usize {
    let mut types = BTreeSet::new();
    for &tag in block.label_columns.iter().flatten() {
        match scheme.part(tag) {
            TagPart::Begin(t) | TagPart::Inside(t) => {
                types.insert(t);
            }
            TagPart::Outside => {}
        }
    }
    types.len()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub scheme: LabelScheme,
    pub train: Vec<SentenceBlock>,
    pub val: Vec<SentenceBlock>,
    pub test: Vec<SentenceBlock>,
}

impl Corpus {
    pub fn new(
        scheme: LabelScheme,
        train: Vec<SentenceBlock>,
        val: Vec<SentenceBlock>,
        test: Vec<SentenceBlock>,
    ) -> Result<Self, CorpusError> {
        let corpus = Self {
            scheme,
            train,
            val,
            test,
        };
        let mut seen = HashSet::new();
        for block in corpus.all_blocks() {
            if !seen.insert(block.id) {
                return Err(CorpusError::DuplicateId(block.id));
            }
        }
        Ok(corpus)
    }

    pub fn all_blocks(&self) -> impl Iterator<Item = &SentenceBlock> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

/// Parses a column-format document. Sentence ids are assigned sequentially
/// from `first_id`.
pub fn parse_conll(
    text: &str,
    scheme: &LabelScheme,
    first_id: usize,
) -> Result<Vec<SentenceBlock>, CorpusError> {
    let mut blocks = Vec::new();
    let mut pending: Vec<(usize, Vec<&str>)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            if !pending.is_empty() {
                let id = first_id + blocks.len();
                blocks.push(build_block(id, &pending, scheme)?);
                pending.clear();
            }
            continue;
        }
        pending.push((idx + 1, line.split('\t').collect()));
    }
    if !pending.is_empty() {
        let id = first_id + blocks.len();
        blocks.push(build_block(id, &pending, scheme)?);
    }
    Ok(blocks)
}

fn build_block(
    id: usize,
    lines: &[(usize, Vec<&str>)],
    scheme: &LabelScheme,
) -> Result<SentenceBlock, CorpusError> {
    let (first_line, first_fields) = &lines[0];
    let width = first_fields.len();
    match scheme.task {
        TaskKind::ProductExtraction if width != 2 => {
            return Err(CorpusError::MalformedLine {
                line: *first_line,
                reason: format!("expected 2 columns, found {width}"),
            });
        }
        TaskKind::RoleLabeling if width < 3 => {
            return Err(CorpusError::MalformedLine {
                line: *first_line,
                reason: format!("expected at least 3 columns, found {width}"),
            });
        }
        _ => {}
    }

    let product_scheme = LabelScheme::product();
    let n_label_cols = match scheme.task {
        TaskKind::ProductExtraction => 1,
        TaskKind::RoleLabeling => width - 2,
    };
    let label_offset = width - n_label_cols;

    let mut tokens = Vec::with_capacity(lines.len());
    let mut product_col = Vec::new();
    let mut columns = vec![Vec::with_capacity(lines.len()); n_label_cols];
    for (line, fields) in lines {
        if fields.len() != width {
            return Err(CorpusError::MalformedLine {
                line: *line,
                reason: format!("expected {width} columns, found {}", fields.len()),
            });
        }
        if fields[0].is_empty() {
            return Err(CorpusError::MalformedLine {
                line: *line,
                reason: "empty token".to_string(),
            });
        }
        tokens.push(fields[0].to_string());
        if scheme.task == TaskKind::RoleLabeling {
            let tag = product_scheme
                .tag_index(fields[1])
                .ok_or_else(|| CorpusError::InvalidTag {
                    line: *line,
                    tag: fields[1].to_string(),
                })?;
            product_col.push(tag);
        }
        for (c, column) in columns.iter_mut().enumerate() {
            let raw = fields[label_offset + c];
            let tag = scheme.tag_index(raw).ok_or_else(|| CorpusError::InvalidTag {
                line: *line,
                tag: raw.to_string(),
            })?;
            column.push(tag);
        }
    }

    let line_of = |pos: usize| lines[pos].0;
    for column in &columns {
        if let Some(pos) = bio_violation(column, scheme) {
            return Err(CorpusError::BioViolation {
                line: line_of(pos),
                tag: scheme.tag_name(column[pos]).to_string(),
            });
        }
    }

    let mut product_spans = Vec::new();
    if scheme.task == TaskKind::RoleLabeling {
        if let Some(pos) = bio_violation(&product_col, &product_scheme) {
            return Err(CorpusError::BioViolation {
                line: line_of(pos),
                tag: product_scheme.tag_name(product_col[pos]).to_string(),
            });
        }
        product_spans = tag_runs(&product_col, &product_scheme)
            .into_iter()
            .map(|(_, s, e)| (s, e))
            .collect();
        if product_spans.len() != n_label_cols {
            return Err(CorpusError::ProductSpanMismatch {
                line: *first_line,
                spans: product_spans.len(),
                columns: n_label_cols,
            });
        }
    }

    let mut block = SentenceBlock {
        id,
        tokens,
        label_columns: columns,
        product_spans,
    };
    truncate_block(&mut block, scheme);
    Ok(block)
}

/// Truncates to the task's max length. Role columns whose product span
/// starts past the cut are dropped; spans crossing it are clipped.
fn truncate_block(block: &mut SentenceBlock, scheme: &LabelScheme) {
    let max_len = scheme.task.max_len();
    if block.len() <= max_len {
        return;
    }
    log::warn!(
        "sentence {} has {} tokens; truncating to {max_len}",
        block.id,
        block.len()
    );
    block.tokens.truncate(max_len);
    for column in &mut block.label_columns {
        column.truncate(max_len);
    }
    if scheme.task == TaskKind::RoleLabeling {
        let keep: Vec<bool> = block.product_spans.iter().map(|&(s, _)| s < max_len).collect();
        let mut k = keep.iter();
        block.label_columns.retain(|_| *k.next().unwrap());
        block.product_spans.retain(|&(s, _)| s < max_len);
        for span in &mut block.product_spans {
            span.1 = span.1.min(max_len - 1);
        }
    }
}

/// Maximal `B-X (I-X)*` runs in a BIO-valid column, as `(type, start, end)`.
pub(crate) fn tag_runs(tags: &[usize], scheme: &LabelScheme) -> Vec<(usize, usize, usize)> {
    let mut runs = Vec::new();
    let mut open: Option<(usize, usize)> = None;
    for (pos, &tag) in tags.iter().enumerate() {
        match scheme.part(tag) {
            TagPart::Begin(t) => {
                if let Some((ty, start)) = open.take() {
                    runs.push((ty, start, pos - 1));
                }
                open = Some((t, pos));
            }
            TagPart::Inside(t) => match open {
                Some((ty, _)) if ty == t => {}
                _ => {
                    if let Some((ty, start)) = open.take() {
                        runs.push((ty, start, pos - 1));
                    }
                    open = Some((t, pos));
                }
            },
            TagPart::Outside => {
                if let Some((ty, start)) = open.take() {
                    runs.push((ty, start, pos - 1));
                }
            }
        }
    }
    if let Some((ty, start)) = open {
        runs.push((ty, start, tags.len() - 1));
    }
    runs
}

/// Writes blocks back to the column format `parse_conll` reads.
pub fn serialize_conll(blocks: &[SentenceBlock], scheme: &LabelScheme) -> String {
    let product_scheme = LabelScheme::product();
    let mut out = String::new();
    for block in blocks {
        let product_col: Vec<usize> = if scheme.task == TaskKind::RoleLabeling {
            let mut col = vec![0; block.len()];
            for &(s, e) in &block.product_spans {
                col[s] = product_scheme.begin_tag(0);
                for tag in &mut col[s + 1..=e] {
                    *tag = product_scheme.inside_tag(0);
                }
            }
            col
        } else {
            Vec::new()
        };
        for (t, token) in block.tokens.iter().enumerate() {
            out.push_str(token);
            if scheme.task == TaskKind::RoleLabeling {
                out.push('\t');
                out.push_str(product_scheme.tag_name(product_col[t]));
            }
            for column in &block.label_columns {
                out.push('\t');
                out.push_str(scheme.tag_name(column[t]));
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

/// Sentence counts per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Parameters of the synthetic corpus generator.
///
/// Context words are `w0..w{vocab_size-1}`. Entity words come from disjoint
/// sub-vocabularies: `P<i>` for products and `<role>_<i>` for each role, so a
/// tagger can learn them from token identity alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub task: TaskKind,
    pub n_sentences: SplitSizes,
    pub vocab_size: usize,
    /// Inclusive range of context tokens per sentence.
    pub length_range: (usize, usize),
    pub entity_rate: f64,
    #[serde(default = "default_roles_range")]
    pub roles_per_block_range: (usize, usize),
    pub seed: u64,
}

fn default_roles_range() -> (usize, usize) {
    (1, 3)
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            task: TaskKind::ProductExtraction,
            n_sentences: SplitSizes {
                train: 500,
                val: 100,
                test: 100,
            },
            vocab_size: 200,
            length_range: (5, 20),
            entity_rate: 0.3,
            roles_per_block_range: default_roles_range(),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |msg: &str| Err(CorpusError::InvalidSpec(msg.to_string()));
        if !(0.0..=1.0).contains(&self.entity_rate) {
            return bad("entity_rate must lie in [0, 1]");
        }
        if self.vocab_size == 0 {
            return bad("vocab_size must be at least 1");
        }
        let (lo, hi) = self.length_range;
        if lo < 1 || lo > hi {
            return bad("length_range must satisfy 1 <= min <= max");
        }
        if hi > self.task.max_len() / 2 {
            return bad("length_range max exceeds half the task's max sentence length");
        }
        if self.task == TaskKind::RoleLabeling {
            let (rmin, rmax) = self.roles_per_block_range;
            if rmin < 1 || rmin > rmax || rmax > ROLE_NAMES.len() {
                return bad("roles_per_block_range must satisfy 1 <= min <= max <= 8");
            }
        }
        Ok(())
    }

    fn entity_vocab(&self) -> usize {
        (self.vocab_size / 4).max(8)
    }

    /// Words per role; the eight roles share roughly one product-sized budget.
    fn role_vocab(&self) -> usize {
        (self.entity_vocab() / ROLE_NAMES.len()).max(4)
    }
}

/// An entity the generator placed, as `(sentence, column, type, start, end)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct PlantedEntity {
    pub sentence: usize,
    pub column: usize,
    pub entity_type: String,
    pub start: usize,
    pub end: usize,
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<Corpus, CorpusError> {
    generate_synthetic_with_ledger(spec).map(|(corpus, _)| corpus)
}

/// Generates a corpus and the ledger of every entity it planted.
pub fn generate_synthetic_with_ledger(
    spec: &SynthSpec,
) -> Result<(Corpus, Vec<PlantedEntity>), CorpusError> {
    spec.validate()?;
    let scheme = LabelScheme::for_task(spec.task);
    let mut ledger = Vec::new();
    let mut next_id = 0;
    let mut splits = Vec::with_capacity(3);
    let sizes = [
        spec.n_sentences.train,
        spec.n_sentences.val,
        spec.n_sentences.test,
    ];
    for (split, &n) in sizes.iter().enumerate() {
        let mut rng = seed::rng(seed::derive(spec.seed, split, Purpose::Synth));
        let n_entity = (spec.entity_rate * n as f64).round() as usize;
        let mut has_entity = vec![false; n];
        has_entity[..n_entity].iter_mut().for_each(|h| *h = true);
        has_entity.shuffle(&mut rng);
        let mut blocks = Vec::with_capacity(n);
        for &positive in &has_entity {
            let block = match spec.task {
                TaskKind::ProductExtraction => {
                    product_sentence(spec, &scheme, next_id, positive, &mut rng, &mut ledger)
                }
                TaskKind::RoleLabeling => {
                    role_sentence(spec, &scheme, next_id, positive, &mut rng, &mut ledger)
                }
            };
            blocks.push(block);
            next_id += 1;
        }
        splits.push(blocks);
    }
    let test = splits.pop().unwrap();
    let val = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok((Corpus::new(scheme, train, val, test)?, ledger))
}

fn context_word(spec: &SynthSpec, rng: &mut impl Rng) -> String {
    format!("w{}", rng.random_range(0..spec.vocab_size))
}

fn mention(prefix: &str, vocab: usize, len: usize, rng: &mut impl Rng) -> Vec<String> {
    (0..len)
        .map(|_| format!("{prefix}{}", rng.random_range(0..vocab)))
        .collect()
}

fn product_sentence(
    spec: &SynthSpec,
    scheme: &LabelScheme,
    id: usize,
    positive: bool,
    rng: &mut impl Rng,
    ledger: &mut Vec<PlantedEntity>,
) -> SentenceBlock {
    let (lo, hi) = spec.length_range;
    let n_ctx = rng.random_range(lo..=hi);
    let context: Vec<String> = (0..n_ctx).map(|_| context_word(spec, rng)).collect();
    if !positive {
        return SentenceBlock {
            id,
            label_columns: vec![vec![0; n_ctx]],
            tokens: context,
            product_spans: Vec::new(),
        };
    }
    // Mentions go into distinct gaps between context words, so two mentions
    // are always separated by at least one context token.
    let n_mentions = rng.random_range(1..=2usize).min(n_ctx + 1);
    let mut gaps: Vec<usize> = (0..=n_ctx).collect();
    gaps.shuffle(rng);
    let mut gaps: Vec<usize> = gaps[..n_mentions].to_vec();
    gaps.sort_unstable();

    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    let mut gap_iter = gaps.iter().peekable();
    for g in 0..=n_ctx {
        if gap_iter.peek() == Some(&&g) {
            gap_iter.next();
            let len = rng.random_range(1..=3);
            let start = tokens.len();
            for (k, tok) in mention("P", spec.entity_vocab(), len, rng).into_iter().enumerate() {
                tokens.push(tok);
                tags.push(if k == 0 { scheme.begin_tag(0) } else { scheme.inside_tag(0) });
            }
            ledger.push(PlantedEntity {
                sentence: id,
                column: 0,
                entity_type: PRODUCT_TYPE.to_string(),
                start,
                end: tokens.len() - 1,
            });
        }
        if g < n_ctx {
            tokens.push(context[g].clone());
            tags.push(0);
        }
    }
    SentenceBlock {
        id,
        tokens,
        label_columns: vec![tags],
        product_spans: Vec::new(),
    }
}

fn role_sentence(
    spec: &SynthSpec,
    scheme: &LabelScheme,
    id: usize,
    positive: bool,
    rng: &mut impl Rng,
    ledger: &mut Vec<PlantedEntity>,
) -> SentenceBlock {
    let (lo, hi) = spec.length_range;
    let n_products = rng.random_range(1..=2usize);
    let n_ctx = rng.random_range(lo..=hi).max(n_products);

    // Roles present in the block, each assigned to one product's segment.
    let mut roles: Vec<usize> = (0..ROLE_NAMES.len()).collect();
    roles.shuffle(rng);
    let n_roles = if positive {
        let (rmin, rmax) = spec.roles_per_block_range;
        rng.random_range(rmin..=rmax)
    } else {
        0
    };
    let mut segment_roles = vec![Vec::new(); n_products];
    for &role in &roles[..n_roles] {
        segment_roles[rng.random_range(0..n_products)].push(role);
    }

    // Split context words across segments, at least one per segment.
    let mut ctx_per_segment = vec![1; n_products];
    for _ in n_products..n_ctx {
        ctx_per_segment[rng.random_range(0..n_products)] += 1;
    }

    let mut tokens: Vec<String> = Vec::new();
    let mut product_spans = Vec::new();
    // (segment, role, start, end)
    let mut placed = Vec::new();
    for seg in 0..n_products {
        tokens.push(context_word(spec, rng));
        let start = tokens.len();
        let len = rng.random_range(1..=2);
        tokens.extend(mention("P", spec.entity_vocab(), len, rng));
        product_spans.push((start, tokens.len() - 1));
        let mut ctx_left = ctx_per_segment[seg] - 1;
        for &role in &segment_roles[seg] {
            tokens.push(context_word(spec, rng));
            let start = tokens.len();
            let len = rng.random_range(1..=2);
            let prefix = format!("{}_", ROLE_NAMES[role]);
            tokens.extend(mention(&prefix, spec.role_vocab(), len, rng));
            placed.push((seg, role, start, tokens.len() - 1));
        }
        while ctx_left > 0 {
            tokens.push(context_word(spec, rng));
            ctx_left -= 1;
        }
    }

    let mut label_columns = vec![vec![0; tokens.len()]; n_products];
    for &(seg, role, start, end) in &placed {
        let column = &mut label_columns[seg];
        column[start] = scheme.begin_tag(role);
        for tag in &mut column[start + 1..=end] {
            *tag = scheme.inside_tag(role);
        }
        ledger.push(PlantedEntity {
            sentence: id,
            column: seg,
            entity_type: ROLE_NAMES[role].to_string(),
            start,
            end,
        });
    }
    SentenceBlock {
        id,
        tokens,
        label_columns,
        product_spans,
    }
}

/// Human-readable summary of the corpus, mainly for logs.
pub fn describe(corpus: &Corpus) -> String {
    let mut s = String::new();
    for (name, split) in [("train", &corpus.train), ("val", &corpus.val), ("test", &corpus.test)] {
        let positives = split.iter().filter(|b| entity_presence(b)).count();
        let _ = write!(s, "{name}={} ({positives} with entities) ", split.len());
    }
    s.trim_end().to_string()
}
