use std::collections::HashMap;

use super::{ClozeExample, CorpusError, EntityId, Token, PLACEHOLDER};

pub const UNK_TOKEN: &str = "<unk>";
pub const UNK_ID: usize = 0;
pub const PLACEHOLDER_ID: usize = 1;
const RESERVED: usize = 2;

/// Frequency-ranked token index with reserved `<unk>` and `@placeholder` ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    capacity: usize,
}

impl Vocab {
    /// Rebuild from an id-ordered token list (as stored in model files).
    pub fn from_tokens(tokens: Vec<String>, capacity: usize) -> Result<Self, CorpusError> {
        if tokens.len() < RESERVED || tokens[UNK_ID] != UNK_TOKEN || tokens[PLACEHOLDER_ID] != PLACEHOLDER {
            return Err(CorpusError::MalformedFile("vocabulary lacks reserved tokens".into()));
        }
        let index: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != tokens.len() {
            return Err(CorpusError::MalformedFile("duplicate vocabulary token".into()));
        }
        Ok(Vocab { tokens, index, capacity })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn id_of_str(&self, s: &str) -> usize {
        self.index.get(s).copied().unwrap_or(UNK_ID)
    }

    pub fn id(&self, token: &Token) -> usize {
        match token {
            Token::Placeholder => PLACEHOLDER_ID,
            Token::Word(w) => self.id_of_str(w),
            other => self.id_of_str(&other.to_string()),
        }
    }

    pub fn entity_id(&self, entity: EntityId) -> Option<usize> {
        self.index.get(&entity.to_string()).copied()
    }

    /// Vocab ids that are entity markers, in id order.
    pub fn entity_entries(&self) -> Vec<(usize, EntityId)> {
        self.tokens
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.parse::<EntityId>().ok().map(|e| (i, e)))
            .collect()
    }

    pub fn encode(&self, tokens: &[Token]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

/// Keep the most frequent tokens up to `capacity` (reserved ids included).
/// Entity markers are always kept; ties in frequency go to the token seen first.
pub fn build_vocab(corpus: &[ClozeExample], capacity: usize) -> Result<Vocab, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    // token -> (count, first occurrence)
    let mut counts: HashMap<String, (usize, usize)> = HashMap::new();
    let mut seen = 0usize;
    for ex in corpus {
        for t in ex.passage.iter().chain(&ex.question) {
            if t.is_placeholder() {
                continue;
            }
            let entry = counts.entry(t.to_string()).or_insert((0, seen));
            entry.0 += 1;
            seen += 1;
        }
    }
    counts.remove(UNK_TOKEN);
    let mut ranked: Vec<(String, usize, usize)> =
        counts.into_iter().map(|(t, (c, first))| (t, c, first)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));

    let is_marker = |t: &str| t.parse::<EntityId>().is_ok();
    let markers = ranked.iter().filter(|r| is_marker(&r.0)).count();
    let mut word_budget = capacity.saturating_sub(RESERVED + markers);

    let mut tokens = vec![UNK_TOKEN.to_string(), PLACEHOLDER.to_string()];
    for (t, _, _) in ranked {
        if is_marker(&t) {
            tokens.push(t);
        } else if word_budget > 0 {
            word_budget -= 1;
            tokens.push(t);
        }
    }
    Vocab::from_tokens(tokens, capacity)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::toks;

    fn corpus(p: &str, q: &str) -> Vec<ClozeExample> {
        vec![ClozeExample::new("v", toks(p), toks(q), EntityId(1)).unwrap()]
    }

    #[test]
    fn keeps_everything_under_capacity() {
        let c = corpus("x y z @entity1", "@placeholder x");
        let v = build_vocab(&c, 50_000).unwrap();
        assert_eq!(v.len(), 2 + 4);
        assert_eq!(v.token(UNK_ID), UNK_TOKEN);
        assert_eq!(v.token(PLACEHOLDER_ID), PLACEHOLDER);
        assert_eq!(v.token(2), "x"); // frequency 2
    }

    #[test]
    fn overflow_words_become_unk() {
        // a:3, b:2, c:1 -> with two word slots, c is unknown.
        let c = corpus("a a a b b c @entity1", "@placeholder");
        let v = build_vocab(&c, RESERVED + 1 + 2).unwrap();
        assert_ne!(v.id_of_str("a"), UNK_ID);
        assert_ne!(v.id_of_str("b"), UNK_ID);
        assert_eq!(v.id_of_str("c"), UNK_ID);
        assert_ne!(v.entity_id(EntityId(1)), None);
    }

    #[test]
    fn markers_survive_tiny_capacity() {
        let c = corpus("w w w @entity1 @entity2", "@placeholder @entity3");
        let v = build_vocab(&c, RESERVED).unwrap();
        assert_eq!(v.id_of_str("w"), UNK_ID);
        for e in 1..=3 {
            assert!(v.entity_id(EntityId(e)).is_some());
        }
        assert_eq!(v.id(&Token::Placeholder), PLACEHOLDER_ID);
    }

    #[test]
    fn equal_frequency_ties_go_to_first_seen() {
        let c = corpus("q p @entity1", "@placeholder");
        let v = build_vocab(&c, 100).unwrap();
        assert!(v.id_of_str("q") < v.id_of_str("p"));
    }

    #[test]
    fn empty_corpus() {
        assert_eq!(build_vocab(&[], 10), Err(CorpusError::EmptyCorpus));
    }
}
