//! Hand-designed features for one (example, candidate entity) pair.
//!
//! The eight template groups are: passage membership, question membership,
//! passage frequency, first position, n-gram context match around the
//! placeholder, average word distance, sentence co-occurrence, and
//! dependency-arc match. [`FeatureVector::flatten`] fixes the coordinate
//! order the ranker learns weights over.

use std::collections::{BTreeSet, HashMap, HashSet};

use thiserror::Error;

use crate::corpus::{candidates, ClozeExample, CorpusError, EntityId, Token, PLACEHOLDER};
use crate::par::{self, Execution};

const STOPWORDS: &str = include_str!("../data/stopwords.txt");
const VERBS: &str = include_str!("../data/verbs.txt");
const QUESTION_SENTENCE: i64 = -1;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("dependency parses missing")]
    MissingParse,
    #[error("bad dependency sidecar line {0:?}")]
    BadDepLine(String),
    #[error("bad pos sidecar line {0:?}")]
    BadPosLine(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// The eight template groups, in reporting order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FeatureGroup {
    InPassage,
    InQuestion,
    Frequency,
    Position,
    NgramMatch,
    WordDistance,
    SentenceCooccurrence,
    DependencyMatch,
}

impl FeatureGroup {
    pub const ALL: [FeatureGroup; 8] = [
        FeatureGroup::InPassage,
        FeatureGroup::InQuestion,
        FeatureGroup::Frequency,
        FeatureGroup::Position,
        FeatureGroup::NgramMatch,
        FeatureGroup::WordDistance,
        FeatureGroup::SentenceCooccurrence,
        FeatureGroup::DependencyMatch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeatureGroup::InPassage => "in-passage",
            FeatureGroup::InQuestion => "in-question",
            FeatureGroup::Frequency => "frequency",
            FeatureGroup::Position => "position",
            FeatureGroup::NgramMatch => "ngram",
            FeatureGroup::WordDistance => "word-distance",
            FeatureGroup::SentenceCooccurrence => "sentence-cooccurrence",
            FeatureGroup::DependencyMatch => "dependency",
        }
    }

    /// Coordinates of this group inside [`FeatureVector::flatten`].
    pub fn range(self) -> std::ops::Range<usize> {
        match self {
            FeatureGroup::InPassage => 0..1,
            FeatureGroup::InQuestion => 1..2,
            FeatureGroup::Frequency => 2..3,
            FeatureGroup::Position => 3..4,
            FeatureGroup::NgramMatch => 4..12,
            FeatureGroup::WordDistance => 12..13,
            FeatureGroup::SentenceCooccurrence => 13..14,
            FeatureGroup::DependencyMatch => 14..16,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl std::str::FromStr for FeatureGroup {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        FeatureGroup::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| format!("unknown feature group {s:?}"))
    }
}

pub const FEATURE_DIM: usize = 16;

/// Context-window match flags, in the order L1, R1, L1R1, L2, R2, L2R1, L1R2, L2R2.
pub type NgramFlags = [bool; 8];

/// (left, right) window sizes behind each n-gram flag.
pub const NGRAM_WINDOWS: [(usize, usize); 8] =
    [(1, 0), (0, 1), (1, 1), (2, 0), (0, 2), (2, 1), (1, 2), (2, 2)];

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub in_passage: bool,
    pub in_question: bool,
    pub frequency: u32,
    /// First passage index divided by passage length; 1.0 when absent.
    pub first_position: f64,
    /// Unnormalized first index, for debugging output.
    pub first_index: Option<usize>,
    pub ngram: NgramFlags,
    pub word_distance: f64,
    pub sentence_cooccur: bool,
    pub dep_match: bool,
    pub dep_available: bool,
}

fn b(x: bool) -> f64 {
    if x {
        1.0
    } else {
        0.0
    }
}

impl FeatureVector {
    pub fn flatten(&self) -> [f64; FEATURE_DIM] {
        let mut v = [0.0; FEATURE_DIM];
        v[0] = b(self.in_passage);
        v[1] = b(self.in_question);
        v[2] = f64::from(self.frequency);
        v[3] = self.first_position;
        for (slot, flag) in v[4..12].iter_mut().zip(self.ngram) {
            *slot = b(flag);
        }
        v[12] = self.word_distance;
        v[13] = b(self.sentence_cooccur);
        v[14] = b(self.dep_match);
        v[15] = b(self.dep_available);
        v
    }
}

/// One dependency arc `head --relation--> dependent`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ParseArc {
    /// `-1` for the question, otherwise the passage sentence index.
    pub sentence_index: i64,
    pub head_token: String,
    pub dependent_token: String,
    pub relation: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Parses {
    pub question: Vec<ParseArc>,
    pub passage: Vec<ParseArc>,
}

impl Parses {
    /// Rename entity markers inside arcs (after relabeling the example).
    pub fn remap(&self, map: &HashMap<EntityId, EntityId>) -> Parses {
        let rename = |s: &String| match s.parse::<EntityId>() {
            Ok(e) => map.get(&e).map_or_else(|| s.clone(), |n| n.to_string()),
            Err(()) => s.clone(),
        };
        let arcs = |v: &[ParseArc]| {
            v.iter()
                .map(|a| ParseArc {
                    sentence_index: a.sentence_index,
                    head_token: rename(&a.head_token),
                    dependent_token: rename(&a.dependent_token),
                    relation: a.relation.clone(),
                })
                .collect()
        };
        Parses { question: arcs(&self.question), passage: arcs(&self.passage) }
    }
}

/// `.deps` sidecar: `sent_index<TAB>head<TAB>relation<TAB>dependent`, question arcs use `-1`.
pub fn parse_dep_sidecar(text: &str) -> Result<Parses, FeatureError> {
    let mut parses = Parses::default();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split('\t').collect();
        let [sent, head, rel, dep] = cols[..] else {
            return Err(FeatureError::BadDepLine(line.into()));
        };
        let sentence_index: i64 = sent.parse().map_err(|_| FeatureError::BadDepLine(line.into()))?;
        if sentence_index < QUESTION_SENTENCE {
            return Err(FeatureError::BadDepLine(line.into()));
        }
        let arc = ParseArc {
            sentence_index,
            head_token: head.to_string(),
            dependent_token: dep.to_string(),
            relation: rel.to_string(),
        };
        if sentence_index == QUESTION_SENTENCE {
            parses.question.push(arc);
        } else {
            parses.passage.push(arc);
        }
    }
    Ok(parses)
}

/// POS tags keyed by token index; question tokens are written `q<index>`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PosTags {
    pub passage: HashMap<usize, String>,
    pub question: HashMap<usize, String>,
}

pub fn parse_pos_sidecar(text: &str) -> Result<PosTags, FeatureError> {
    let mut tags = PosTags::default();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (idx, tag) = line.split_once('\t').ok_or_else(|| FeatureError::BadPosLine(line.into()))?;
        let (map, idx) = match idx.strip_prefix('q') {
            Some(rest) => (&mut tags.question, rest),
            None => (&mut tags.passage, idx),
        };
        let i: usize = idx.parse().map_err(|_| FeatureError::BadPosLine(line.into()))?;
        map.insert(i, tag.to_string());
    }
    Ok(tags)
}

/// Optional linguistic annotations for one example.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Annotations {
    pub parses: Option<Parses>,
    pub pos: Option<PosTags>,
}

#[derive(Clone, Debug)]
pub struct FeatureConfig {
    pub stopwords: HashSet<String>,
    pub verbs: HashSet<String>,
    /// Word-distance sentinel; `None` means the passage length.
    pub no_occurrence_distance: Option<f64>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            stopwords: STOPWORDS.lines().map(str::to_string).collect(),
            verbs: VERBS.lines().map(str::to_string).collect(),
            no_occurrence_distance: None,
        }
    }
}

impl FeatureConfig {
    fn sentinel(&self, example: &ClozeExample) -> f64 {
        self.no_occurrence_distance.unwrap_or(example.passage.len() as f64)
    }

    fn is_stop(&self, w: &str) -> bool {
        self.stopwords.contains(w)
    }

    /// Lexicon or suffix heuristic, overridden by a POS tag when one is given.
    pub fn is_verb(&self, word: &str, tag: Option<&str>) -> bool {
        if let Some(tag) = tag {
            return tag.starts_with("VB");
        }
        if self.is_stop(word) {
            return false;
        }
        self.verbs.contains(word)
            || word.ends_with("ed")
            || word.ends_with("ing")
            || (word.len() >= 4 && word.ends_with('s') && !word.ends_with("ss"))
    }
}

/// Window-match flags for `entity` against the placeholder context.
pub fn ngram_match(example: &ClozeExample, entity: EntityId) -> NgramFlags {
    let q = &example.question;
    let ph = example.placeholder_index();
    let p = &example.passage;
    let mut flags = [false; 8];
    for occ in example.occurrences(entity) {
        let left = |k: usize| ph >= k && occ >= k && q[ph - k] == p[occ - k];
        let right = |k: usize| ph + k < q.len() && occ + k < p.len() && q[ph + k] == p[occ + k];
        let left_ok = [true, left(1), left(1) && left(2)];
        let right_ok = [true, right(1), right(1) && right(2)];
        for (flag, (l, r)) in flags.iter_mut().zip(NGRAM_WINDOWS) {
            *flag |= left_ok[l] && right_ok[r];
        }
    }
    flags
}

fn content_question_words<'a>(example: &'a ClozeExample, config: &FeatureConfig) -> Vec<&'a str> {
    let mut seen = BTreeSet::new();
    example
        .question
        .iter()
        .filter_map(|t| match t {
            Token::Word(w) if !config.is_stop(w) && seen.insert(w.as_str()) => Some(w.as_str()),
            _ => None,
        })
        .collect()
}

/// Minimum over entity occurrences of the mean nearest distance to each
/// non-stop question word found in the passage.
pub fn word_distance(example: &ClozeExample, entity: EntityId, config: &FeatureConfig) -> f64 {
    let mut positions: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, t) in example.passage.iter().enumerate() {
        if let Token::Word(w) = t {
            positions.entry(w.as_str()).or_default().push(i);
        }
    }
    let words: Vec<&Vec<usize>> = content_question_words(example, config)
        .into_iter()
        .filter_map(|w| positions.get(w))
        .collect();
    let occurrences = example.occurrences(entity);
    if words.is_empty() || occurrences.is_empty() {
        return config.sentinel(example);
    }
    occurrences
        .iter()
        .map(|&o| {
            let total: usize = words
                .iter()
                .map(|pos| pos.iter().map(|&p| p.abs_diff(o)).min().unwrap())
                .sum();
            total as f64 / words.len() as f64
        })
        .fold(f64::INFINITY, f64::min)
}

/// Whether some passage sentence holds `entity` together with another
/// question entity or a question verb.
pub fn sentence_cooccurrence(
    example: &ClozeExample,
    entity: EntityId,
    pos: Option<&PosTags>,
    config: &FeatureConfig,
) -> bool {
    let q_entities: BTreeSet<EntityId> =
        example.question_entities().into_iter().filter(|e| *e != entity).collect();
    let q_verbs: HashSet<&str> = example
        .question
        .iter()
        .enumerate()
        .filter_map(|(i, t)| match t {
            Token::Word(w) => {
                let tag = pos.and_then(|p| p.question.get(&i)).map(String::as_str);
                config.is_verb(w, tag).then_some(w.as_str())
            }
            _ => None,
        })
        .collect();
    example.sentences().into_iter().any(|(start, end)| {
        let sent = &example.passage[start..end];
        sent.contains(&Token::Entity(entity))
            && sent.iter().any(|t| match t {
                Token::Entity(e) => q_entities.contains(e),
                Token::Word(w) => q_verbs.contains(w.as_str()),
                _ => false,
            })
    })
}

/// Whether a question arc into (or out of) the placeholder has a passage
/// twin with the same word, relation and direction on `entity`.
pub fn dependency_match(example: &ClozeExample, entity: EntityId, parses: Option<&Parses>) -> Result<bool, FeatureError> {
    let _ = example;
    let parses = parses.ok_or(FeatureError::MissingParse)?;
    let marker = entity.to_string();
    let incoming: HashSet<(&str, &str)> = parses
        .question
        .iter()
        .filter(|a| a.dependent_token == PLACEHOLDER)
        .map(|a| (a.head_token.as_str(), a.relation.as_str()))
        .collect();
    let outgoing: HashSet<(&str, &str)> = parses
        .question
        .iter()
        .filter(|a| a.head_token == PLACEHOLDER)
        .map(|a| (a.dependent_token.as_str(), a.relation.as_str()))
        .collect();
    Ok(parses.passage.iter().any(|a| {
        (a.dependent_token == marker && incoming.contains(&(a.head_token.as_str(), a.relation.as_str())))
            || (a.head_token == marker && outgoing.contains(&(a.dependent_token.as_str(), a.relation.as_str())))
    }))
}

pub fn extract_features(
    example: &ClozeExample,
    entity: EntityId,
    annotations: &Annotations,
    config: &FeatureConfig,
) -> FeatureVector {
    let occurrences = example.occurrences(entity);
    let first_index = occurrences.first().copied();
    let (dep_match, dep_available) = match dependency_match(example, entity, annotations.parses.as_ref()) {
        Ok(m) => (m, true),
        Err(_) => (false, false),
    };
    FeatureVector {
        in_passage: !occurrences.is_empty(),
        in_question: example.question.contains(&Token::Entity(entity)),
        frequency: occurrences.len() as u32,
        first_position: first_index.map_or(1.0, |i| i as f64 / example.passage.len() as f64),
        first_index,
        ngram: ngram_match(example, entity),
        word_distance: word_distance(example, entity, config),
        sentence_cooccur: sentence_cooccurrence(example, entity, annotations.pos.as_ref(), config),
        dep_match,
        dep_available,
    }
}

/// Features for every candidate of one example.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturizedExample {
    pub source_id: String,
    pub candidates: Vec<EntityId>,
    pub features: Vec<[f64; FEATURE_DIM]>,
    pub gold: EntityId,
}

impl FeaturizedExample {
    pub fn gold_index(&self) -> Option<usize> {
        self.candidates.iter().position(|c| *c == self.gold)
    }
}

pub fn featurize(
    example: &ClozeExample,
    annotations: &Annotations,
    config: &FeatureConfig,
) -> Result<FeaturizedExample, FeatureError> {
    let cands: Vec<EntityId> = candidates(example)?.into_iter().collect();
    let features = cands
        .iter()
        .map(|e| extract_features(example, *e, annotations, config).flatten())
        .collect();
    Ok(FeaturizedExample {
        source_id: example.source_id.clone(),
        candidates: cands,
        features,
        gold: example.answer,
    })
}

/// Featurize a whole corpus; `annotations` is either empty or parallel to `examples`.
pub fn featurize_corpus(
    examples: &[ClozeExample],
    annotations: &[Annotations],
    config: &FeatureConfig,
    exec: Execution,
) -> Result<Vec<FeaturizedExample>, FeatureError> {
    let none = Annotations::default();
    par::map_indexed_with(exec, examples, |i, ex| featurize(ex, annotations.get(i).unwrap_or(&none), config))
        .into_iter()
        .collect()
}
