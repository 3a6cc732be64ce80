//! Anonymized cloze corpora: data model, question files, relabeling,
//! vocabularies, statistics and a synthetic generator.

mod format;
mod stats;
mod synth;
mod vocab;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub use format::{
    load_corpus_dir, load_question_file, parse_question_file, parse_sentence_sidecar,
    serialize_question_file, write_question_file, LoadedExample,
};
pub use stats::{corpus_stats, CorpusStats};
pub use synth::{default_paraphrase_table, generate_synthetic, SynthMode, SynthSpec};
pub use vocab::{build_vocab, Vocab, PLACEHOLDER_ID, UNK_ID, UNK_TOKEN};

pub const PLACEHOLDER: &str = "@placeholder";
const ENTITY_PREFIX: &str = "@entity";

#[derive(Debug, Error, PartialEq)]
pub enum CorpusError {
    #[error("malformed question file: {0}")]
    MalformedFile(String),
    #[error("question has no @placeholder token")]
    MissingPlaceholder,
    #[error("question has {0} @placeholder tokens, expected exactly one")]
    MultiplePlaceholders(usize),
    #[error("@placeholder appears in the passage")]
    PlaceholderInPassage,
    #[error("answer {0} does not occur in the passage")]
    AnswerNotInPassage(EntityId),
    #[error("bad entity mapping line: {0:?}")]
    BadEntityMapping(String),
    #[error("passage contains no entity markers")]
    EmptyCandidateSet,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("empty passage or question")]
    EmptySequence,
    #[error("infeasible synthesis spec: {0}")]
    InfeasibleSpec(String),
    #[error("bad sentence sidecar: {0}")]
    BadSidecar(String),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

impl CorpusError {
    /// True for well-formed files whose content breaks a task invariant.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            CorpusError::MissingPlaceholder
                | CorpusError::MultiplePlaceholders(_)
                | CorpusError::PlaceholderInPassage
                | CorpusError::AnswerNotInPassage(_)
                | CorpusError::EmptyCandidateSet
                | CorpusError::EmptySequence
        )
    }
}

/// An anonymized entity marker `@entity{n}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityId(pub u32);

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{ENTITY_PREFIX}{}", self.0)
    }
}

impl FromStr for EntityId {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        let digits = s.strip_prefix(ENTITY_PREFIX).ok_or(())?;
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(());
        }
        // Reject leading zeros so that rendering stays the inverse of parsing.
        if digits.len() > 1 && digits.starts_with('0') {
            return Err(());
        }
        digits.parse().map(EntityId).map_err(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Token {
    Word(String),
    Entity(EntityId),
    Placeholder,
    /// `.`, `!` or `?`; closes a sentence unless a sidecar overrides boundaries.
    SentenceEnd(char),
}

impl Token {
    pub fn parse(s: &str) -> Token {
        if s == PLACEHOLDER {
            return Token::Placeholder;
        }
        if let Ok(id) = s.parse::<EntityId>() {
            return Token::Entity(id);
        }
        match s {
            "." => Token::SentenceEnd('.'),
            "!" => Token::SentenceEnd('!'),
            "?" => Token::SentenceEnd('?'),
            _ => Token::Word(s.to_string()),
        }
    }

    pub fn entity(&self) -> Option<EntityId> {
        match self {
            Token::Entity(e) => Some(*e),
            _ => None,
        }
    }

    pub fn is_placeholder(&self) -> bool {
        matches!(self, Token::Placeholder)
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Word(w) => f.write_str(w),
            Token::Entity(e) => e.fmt(f),
            Token::Placeholder => f.write_str(PLACEHOLDER),
            Token::SentenceEnd(c) => write!(f, "{c}"),
        }
    }
}

/// A half-open token range `[start, end)` within the passage.
pub type Span = (usize, usize);

/// One (passage, question, answer) triple.
#[derive(Clone, Debug, PartialEq)]
pub struct ClozeExample {
    pub source_id: String,
    pub passage: Vec<Token>,
    pub question: Vec<Token>,
    pub answer: EntityId,
    pub entity_strings: BTreeMap<EntityId, String>,
    /// Explicit sentence boundaries from a `.sents` sidecar.
    pub sentence_spans: Option<Vec<Span>>,
}

impl ClozeExample {
    /// Build and validate an example.
    pub fn new(
        source_id: impl Into<String>,
        passage: Vec<Token>,
        question: Vec<Token>,
        answer: EntityId,
    ) -> Result<Self, CorpusError> {
        let ex = ClozeExample {
            source_id: source_id.into(),
            passage,
            question,
            answer,
            entity_strings: BTreeMap::new(),
            sentence_spans: None,
        };
        ex.validate()?;
        Ok(ex)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.passage.is_empty() || self.question.is_empty() {
            return Err(CorpusError::EmptySequence);
        }
        if self.passage.iter().any(Token::is_placeholder) {
            return Err(CorpusError::PlaceholderInPassage);
        }
        match self.question.iter().filter(|t| t.is_placeholder()).count() {
            0 => return Err(CorpusError::MissingPlaceholder),
            1 => {}
            n => return Err(CorpusError::MultiplePlaceholders(n)),
        }
        if !self.passage.contains(&Token::Entity(self.answer)) {
            return Err(CorpusError::AnswerNotInPassage(self.answer));
        }
        Ok(())
    }

    pub fn placeholder_index(&self) -> usize {
        self.question
            .iter()
            .position(Token::is_placeholder)
            .expect("validated example has a placeholder")
    }

    /// Passage positions where `entity` occurs.
    pub fn occurrences(&self, entity: EntityId) -> Vec<usize> {
        self.passage
            .iter()
            .enumerate()
            .filter(|(_, t)| t.entity() == Some(entity))
            .map(|(i, _)| i)
            .collect()
    }

    /// Sentence spans: the sidecar override when present, otherwise split
    /// after every sentence-end token. Empty spans are never produced.
    pub fn sentences(&self) -> Vec<Span> {
        if let Some(spans) = &self.sentence_spans {
            return spans.clone();
        }
        let mut spans = Vec::new();
        let mut start = 0;
        for (i, t) in self.passage.iter().enumerate() {
            if matches!(t, Token::SentenceEnd(_)) {
                spans.push((start, i + 1));
                start = i + 1;
            }
        }
        if start < self.passage.len() {
            spans.push((start, self.passage.len()));
        }
        spans
    }

    /// Entities mentioned in the question.
    pub fn question_entities(&self) -> BTreeSet<EntityId> {
        self.question.iter().filter_map(Token::entity).collect()
    }
}

/// The answer candidates: every entity occurring in the passage.
pub fn candidates(example: &ClozeExample) -> Result<BTreeSet<EntityId>, CorpusError> {
    let set: BTreeSet<EntityId> = example.passage.iter().filter_map(Token::entity).collect();
    if set.is_empty() {
        return Err(CorpusError::EmptyCandidateSet);
    }
    Ok(set)
}

/// Renaming from original marker to first-occurrence rank (starting at 1),
/// scanning the passage then the question.
pub fn relabel_map(example: &ClozeExample) -> HashMap<EntityId, EntityId> {
    let mut map = HashMap::new();
    for t in example.passage.iter().chain(&example.question) {
        if let Token::Entity(e) = t {
            let next = EntityId(map.len() as u32 + 1);
            map.entry(*e).or_insert(next);
        }
    }
    map
}

/// Rename entity markers by order of first occurrence.
pub fn relabel_entities(example: &ClozeExample) -> ClozeExample {
    let map = relabel_map(example);
    let rename = |t: &Token| match t {
        Token::Entity(e) => Token::Entity(map[e]),
        other => other.clone(),
    };
    let entity_strings = example
        .entity_strings
        .iter()
        .filter_map(|(e, s)| map.get(e).map(|n| (*n, s.clone())))
        .collect();
    ClozeExample {
        source_id: example.source_id.clone(),
        passage: example.passage.iter().map(rename).collect(),
        question: example.question.iter().map(rename).collect(),
        answer: map[&example.answer],
        entity_strings,
        sentence_spans: example.sentence_spans.clone(),
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn toks(s: &str) -> Vec<Token> {
        s.split(' ').map(Token::parse).collect()
    }

    fn ex(p: &str, q: &str, a: u32) -> ClozeExample {
        ClozeExample::new("t", toks(p), toks(q), EntityId(a)).unwrap()
    }

    #[test]
    fn entity_id_round_trip() {
        for n in [0, 1, 7, 42, 380_298] {
            let id = EntityId(n);
            assert_eq!(id.to_string().parse::<EntityId>(), Ok(id));
        }
        assert!("@entity".parse::<EntityId>().is_err());
        assert!("@entity01".parse::<EntityId>().is_err());
        assert!("@entityx".parse::<EntityId>().is_err());
        assert!("entity1".parse::<EntityId>().is_err());
    }

    #[test]
    fn candidates_come_from_passage_only() {
        let e = ex("@entity1 met @entity4 .", "@placeholder met @entity9", 1);
        let c: Vec<_> = candidates(&e).unwrap().into_iter().collect();
        assert_eq!(c, vec![EntityId(1), EntityId(4)]);
    }

    #[test]
    fn passage_without_markers_has_no_candidates() {
        let e = ClozeExample {
            source_id: "x".into(),
            passage: toks("nothing here ."),
            question: toks("@placeholder here"),
            answer: EntityId(1),
            entity_strings: BTreeMap::new(),
            sentence_spans: None,
        };
        assert_eq!(candidates(&e), Err(CorpusError::EmptyCandidateSet));
    }

    #[test]
    fn validation_errors() {
        let bad = |p: &str, q: &str, a: u32| {
            ClozeExample::new("t", toks(p), toks(q), EntityId(a)).unwrap_err()
        };
        assert_eq!(bad("@entity1 x", "no marker", 1), CorpusError::MissingPlaceholder);
        assert_eq!(
            bad("@entity1 x", "@placeholder @placeholder", 1),
            CorpusError::MultiplePlaceholders(2)
        );
        assert_eq!(
            bad("@entity1 x", "@placeholder y", 2),
            CorpusError::AnswerNotInPassage(EntityId(2))
        );
        assert_eq!(bad("@placeholder @entity1", "@placeholder", 1), CorpusError::PlaceholderInPassage);
    }

    #[test]
    fn relabel_follows_first_occurrence() {
        let e = ex("@entity7 said @entity3 left . @entity7 won", "@placeholder beat @entity5", 3);
        let r = relabel_entities(&e);
        assert_eq!(r.passage[0], Token::Entity(EntityId(1)));
        assert_eq!(r.passage[2], Token::Entity(EntityId(2)));
        assert_eq!(r.answer, EntityId(2));
        // Question-only markers are numbered after every passage marker.
        assert_eq!(r.question[2], Token::Entity(EntityId(3)));
    }

    #[test]
    fn relabel_is_identity_on_ordered_markers() {
        let e = ex("@entity1 and @entity2 saw @entity3 .", "@placeholder saw @entity3", 2);
        assert_eq!(relabel_entities(&e), e);
    }

    #[test]
    fn relabel_carries_surface_strings() {
        let mut e = ex("@entity9 beat @entity4", "@placeholder beat @entity4", 9);
        e.entity_strings.insert(EntityId(9), "Alpha".into());
        e.entity_strings.insert(EntityId(4), "Beta".into());
        let r = relabel_entities(&e);
        assert_eq!(r.entity_strings[&EntityId(1)], "Alpha");
        assert_eq!(r.entity_strings[&EntityId(2)], "Beta");
    }

    #[test]
    fn sentence_split_on_punctuation() {
        let e = ex("a @entity1 . b c ! d", "@placeholder", 1);
        assert_eq!(e.sentences(), vec![(0, 3), (3, 6), (6, 7)]);
    }
}
