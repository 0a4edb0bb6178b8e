//! Entity-level precision, recall and F1 under BIO tagging.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{LabelScheme, SentenceBlock, TagPart};
use crate::model::{ModelError, Tagger};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntitySpan {
    pub sentence: usize,
    pub column: usize,
    pub entity_type: String,
    /// Inclusive token range.
    pub start: usize,
    pub end: usize,
}

/// Spans of a tag sequence. A stray `I-X` opens a new `X` span.
pub fn extract_entities(
    tags: &[usize],
    scheme: &LabelScheme,
    sentence: usize,
    column: usize,
) -> Vec<EntitySpan> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, usize)> = None;
    let close = |open: &mut Option<(usize, usize)>, end: usize, spans: &mut Vec<EntitySpan>| {
        if let Some((ty, start)) = open.take() {
            spans.push(EntitySpan {
                sentence,
                column,
                entity_type: scheme.entity_types()[ty].clone(),
                start,
                end,
            });
        }
    };
    for (pos, &tag) in tags.iter().enumerate() {
        match scheme.part(tag) {
            TagPart::Begin(t) => {
                close(&mut open, pos.wrapping_sub(1), &mut spans);
                open = Some((t, pos));
            }
            TagPart::Inside(t) => {
                if !matches!(open, Some((ty, _)) if ty == t) {
                    close(&mut open, pos.wrapping_sub(1), &mut spans);
                    open = Some((t, pos));
                }
            }
            TagPart::Outside => close(&mut open, pos.wrapping_sub(1), &mut spans),
        }
    }
    close(&mut open, tags.len().wrapping_sub(1), &mut spans);
    spans
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Exact-match micro P/R/F1. Empty denominators give 0.
pub fn prf1(gold: &[EntitySpan], predicted: &[EntitySpan]) -> Prf {
    let gold: HashSet<&EntitySpan> = gold.iter().collect();
    let predicted: HashSet<&EntitySpan> = predicted.iter().collect();
    let tp = gold.intersection(&predicted).count() as f64;
    let precision = if predicted.is_empty() { 0.0 } else { tp / predicted.len() as f64 };
    let recall = if gold.is_empty() { 0.0 } else { tp / gold.len() as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf {
        precision,
        recall,
        f1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub token_accuracy: f64,
}

/// Viterbi-decodes every column of `blocks` and scores it against gold.
pub fn evaluate(tagger: &Tagger, blocks: &[SentenceBlock]) -> Result<Metrics, ModelError> {
    let scheme = &tagger.scheme;
    let mut gold = Vec::new();
    let mut predicted = Vec::new();
    let (mut correct, mut total) = (0usize, 0usize);
    for block in blocks {
        for (column, gold_tags) in block.label_columns.iter().enumerate() {
            let tags = tagger.decode(block, column)?;
            correct += tags.iter().zip(gold_tags).filter(|(a, b)| a == b).count();
            total += tags.len();
            gold.extend(extract_entities(gold_tags, scheme, block.id, column));
            predicted.extend(extract_entities(&tags, scheme, block.id, column));
        }
    }
    let prf = prf1(&gold, &predicted);
    Ok(Metrics {
        precision: prf.precision,
        recall: prf.recall,
        f1: prf.f1,
        token_accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_with_ledger, SynthSpec, TaskKind};
    use proptest::prelude::*;

    fn span(sentence: usize, ty: &str, start: usize, end: usize) -> EntitySpan {
        EntitySpan {
            sentence,
            column: 0,
            entity_type: ty.to_string(),
            start,
            end,
        }
    }

    #[test]
    fn extraction_examples() {
        let p = LabelScheme::product();
        assert_eq!(extract_entities(&[0, 1, 2, 0], &p, 0, 0), vec![span(0, "Prod", 1, 2)]);
        assert_eq!(
            extract_entities(&[1, 1], &p, 0, 0),
            vec![span(0, "Prod", 0, 0), span(0, "Prod", 1, 1)]
        );
        assert_eq!(extract_entities(&[2, 0], &p, 0, 0), vec![span(0, "Prod", 0, 0)]);
        assert_eq!(extract_entities(&[0, 1, 2], &p, 0, 0), vec![span(0, "Prod", 1, 2)]);
        assert!(extract_entities(&[], &p, 0, 0).is_empty());

        let r = LabelScheme::role();
        let tags = [r.begin_tag(0), r.inside_tag(1), r.inside_tag(1)];
        let spans = extract_entities(&tags, &r, 3, 1);
        assert_eq!(spans.len(), 2);
        assert_eq!(spans[1].entity_type, "Catalyst_Reagents");
        assert_eq!((spans[1].start, spans[1].end, spans[1].column), (1, 2, 1));
    }

    #[test]
    fn prf_examples() {
        let a = span(0, "Prod", 0, 0);
        let b = span(1, "Prod", 2, 3);
        let c = span(2, "Prod", 1, 1);
        let all = prf1(&[a.clone(), b.clone()], &[a.clone(), b.clone()]);
        assert_eq!((all.precision, all.recall, all.f1), (1.0, 1.0, 1.0));
        let none = prf1(std::slice::from_ref(&a), &[]);
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
        let half = prf1(&[a, b.clone()], &[b, c]);
        assert_eq!((half.precision, half.recall, half.f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn gold_tags_reproduce_planted_entities() {
        for task in [TaskKind::ProductExtraction, TaskKind::RoleLabeling] {
            let spec = SynthSpec {
                task,
                entity_rate: 0.6,
                ..SynthSpec::default()
            };
            let (corpus, ledger) = generate_synthetic_with_ledger(&spec).unwrap();
            let mut extracted: Vec<_> = corpus
                .all_blocks()
                .flat_map(|b| {
                    b.label_columns
                        .iter()
                        .enumerate()
                        .flat_map(|(c, tags)| extract_entities(tags, &corpus.scheme, b.id, c))
                        .collect::<Vec<_>>()
                })
                .map(|s| (s.sentence, s.column, s.entity_type, s.start, s.end))
                .collect();
            let mut planted: Vec<_> = ledger
                .into_iter()
                .map(|p| (p.sentence, p.column, p.entity_type, p.start, p.end))
                .collect();
            extracted.sort();
            planted.sort();
            assert_eq!(extracted, planted);
        }
    }

    fn spans() -> impl Strategy<Value = Vec<EntitySpan>> {
        prop::collection::vec((0usize..6, 0usize..4), 0..12).prop_map(|v| {
            v.into_iter().map(|(s, t)| span(s, "Prod", t, t)).collect()
        })
    }

    proptest! {
        #[test]
        fn f1_between_precision_and_recall(gold in spans(), pred in spans()) {
            let m = prf1(&gold, &pred);
            if m.precision + m.recall > 0.0 {
                prop_assert!(m.f1 >= m.precision.min(m.recall) - 1e-12);
                prop_assert!(m.f1 <= m.precision.max(m.recall) + 1e-12);
            }
            let mut g2 = gold.clone();
            g2.reverse();
            let mut p2 = pred.clone();
            p2.reverse();
            prop_assert_eq!(prf1(&g2, &p2), m);
        }
    }
}
