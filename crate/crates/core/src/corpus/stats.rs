use std::collections::BTreeSet;

use super::{ClozeExample, CorpusError, Token};
use crate::par;

/// Dataset summary statistics (per-example means).
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusStats {
    pub example_count: usize,
    pub avg_passage_tokens: f64,
    pub avg_passage_sentences: f64,
    pub avg_question_tokens: f64,
    pub avg_entities: f64,
}

pub fn corpus_stats(corpus: &[ClozeExample]) -> Result<CorpusStats, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let per: Vec<[f64; 4]> = par::map(corpus, |ex| {
        let entities: BTreeSet<_> = ex.passage.iter().chain(&ex.question).filter_map(Token::entity).collect();
        [
            ex.passage.len() as f64,
            ex.sentences().len() as f64,
            ex.question.len() as f64,
            entities.len() as f64,
        ]
    });
    let n = corpus.len() as f64;
    let mut sums = [0.0; 4];
    for row in &per {
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    Ok(CorpusStats {
        example_count: corpus.len(),
        avg_passage_tokens: sums[0] / n,
        avg_passage_sentences: sums[1] / n,
        avg_question_tokens: sums[2] / n,
        avg_entities: sums[3] / n,
    })
}
