//! Rule-based synthetic cloze corpora.
//!
//! Each passage is a handful of sentences over a closed word list `w0..wN`
//! (every sixth word is a verb-like `v{i}ed`), sprinkled with stopwords and
//! entity markers. One sentence holds the answer inside a four-word window
//! `a b @entity c d`; the question is built from that window around
//! `@placeholder`. With probability `decoy_rate` a second sentence repeats
//! the window words around a different entity with the halves swapped
//! (`c d @entity' a b`), which ties every bag-of-words signal and leaves only
//! word order to tell the two apart.
//!
//! Question wording depends on the mode:
//!
//! * exact-match: the window is copied verbatim,
//! * paraphrase: every window word goes through the paraphrase table,
//! * partial-clue: one randomly chosen window word is kept, the rest are paraphrased.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ClozeExample, CorpusError, EntityId, Token};
use crate::par;
use crate::rng::{stream_rng, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SynthMode {
    ExactMatch,
    Paraphrase,
    PartialClue,
}

impl SynthMode {
    pub fn name(self) -> &'static str {
        match self {
            SynthMode::ExactMatch => "exact-match",
            SynthMode::Paraphrase => "paraphrase",
            SynthMode::PartialClue => "partial-clue",
        }
    }
}

impl std::str::FromStr for SynthMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "exact-match" => Ok(SynthMode::ExactMatch),
            "paraphrase" | "paraphrasing" => Ok(SynthMode::Paraphrase),
            "partial-clue" => Ok(SynthMode::PartialClue),
            other => Err(format!("unknown synthesis mode {other:?}")),
        }
    }
}

const STOPWORDS: &[&str] = &["the", "a", "of", "to", "in", "and", "on", "for", "with", "at"];
const STOPWORD_RATE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_examples: usize,
    /// Number of distinct content words.
    pub vocab_size: usize,
    /// Inclusive range of entities per passage.
    pub n_entities_range: (usize, usize),
    /// Inclusive range of sentences per passage.
    pub passage_sentences_range: (usize, usize),
    /// Inclusive range of tokens per sentence, excluding the final period.
    pub sentence_len_range: (usize, usize),
    pub mode: SynthMode,
    pub paraphrase_table: BTreeMap<String, String>,
    /// Probability that a passage carries a swapped-window decoy sentence.
    pub decoy_rate: f64,
    /// Entity markers are drawn without replacement from `0..entity_index_limit`.
    pub entity_index_limit: u32,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(mode: SynthMode, n_examples: usize, seed: u64) -> Self {
        let vocab_size = 200;
        SynthSpec {
            n_examples,
            vocab_size,
            n_entities_range: (3, 6),
            passage_sentences_range: (3, 6),
            sentence_len_range: (7, 11),
            mode,
            paraphrase_table: default_paraphrase_table(vocab_size),
            decoy_rate: 0.5,
            entity_index_limit: 60,
            seed,
        }
    }

    fn check(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::InfeasibleSpec(m.to_string()));
        let ranges = [self.n_entities_range, self.passage_sentences_range, self.sentence_len_range];
        if ranges.iter().any(|(lo, hi)| lo > hi) {
            return bad("empty range");
        }
        if self.n_entities_range.0 < 1 {
            return bad("passages need at least one entity");
        }
        if self.passage_sentences_range.0 < 1 {
            return bad("passages need at least one sentence");
        }
        if self.sentence_len_range.0 < 5 {
            return bad("sentences need at least 5 tokens to hold the answer window");
        }
        if self.vocab_size < 4 {
            return bad("the answer window needs 4 distinct words");
        }
        if (self.entity_index_limit as usize) < self.n_entities_range.1 {
            return bad("entity_index_limit below the maximum entity count");
        }
        // Every entity needs a slot: one per sentence outside the answer
        // window plus the free slots of the answer sentence.
        let slots = self.passage_sentences_range.0 * (self.sentence_len_range.0 - 4);
        if slots + 1 < self.n_entities_range.1 {
            return bad("sentences too short to place every entity");
        }
        if !(0.0..=1.0).contains(&self.decoy_rate) {
            return bad("decoy_rate outside [0, 1]");
        }
        Ok(())
    }
}

fn content_word(i: usize) -> String {
    if i.is_multiple_of(6) {
        format!("v{i}ed")
    } else {
        format!("w{i}")
    }
}

/// Map every content word to a fresh synonym that never occurs in passages.
pub fn default_paraphrase_table(vocab_size: usize) -> BTreeMap<String, String> {
    (0..vocab_size)
        .map(|i| {
            let w = content_word(i);
            let syn = if i % 6 == 0 { format!("u{i}ed") } else { format!("p{i}") };
            (w, syn)
        })
        .collect()
}

enum Slot {
    Free,
    Fixed(Token),
    Entity,
}

struct Draft {
    sentences: Vec<Vec<Slot>>,
    answer_pos: (usize, usize),
    window: [String; 4],
}

fn draw_sentence_len(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(spec.sentence_len_range.0..=spec.sentence_len_range.1)
}

fn fill_word(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Token {
    if rng.random_bool(STOPWORD_RATE) {
        Token::Word(STOPWORDS.choose(rng).unwrap().to_string())
    } else {
        Token::Word(content_word(rng.random_range(0..spec.vocab_size)))
    }
}

fn one_example(spec: &SynthSpec, index: usize) -> ClozeExample {
    let mut rng = stream_rng(spec.seed, Stream::Synth, &[index as u64]);
    loop {
        if let Some(ex) = try_example(spec, index, &mut rng) {
            return ex;
        }
    }
}

fn try_example(spec: &SynthSpec, index: usize, rng: &mut ChaCha8Rng) -> Option<ClozeExample> {
    let n_ent = rng.random_range(spec.n_entities_range.0..=spec.n_entities_range.1);
    let n_sent = rng.random_range(spec.passage_sentences_range.0..=spec.passage_sentences_range.1);
    let mut pool: Vec<u32> = (0..spec.entity_index_limit).collect();
    pool.shuffle(rng);
    let entities: Vec<EntityId> = pool[..n_ent].iter().map(|&i| EntityId(i)).collect();
    let gold = entities[rng.random_range(0..n_ent)];

    let mut window_ids: Vec<usize> = Vec::with_capacity(4);
    while window_ids.len() < 4 {
        let w = rng.random_range(0..spec.vocab_size);
        if !window_ids.contains(&w) {
            window_ids.push(w);
        }
    }
    let window: [String; 4] = std::array::from_fn(|i| content_word(window_ids[i]));
    let answer_sentence = rng.random_range(0..n_sent);
    let decoy = (n_ent >= 2 && n_sent >= 2 && rng.random_bool(spec.decoy_rate)).then(|| {
        let mut s = rng.random_range(0..n_sent - 1);
        if s >= answer_sentence {
            s += 1;
        }
        let others: Vec<EntityId> = entities.iter().copied().filter(|e| *e != gold).collect();
        (s, *others.choose(rng).unwrap())
    });

    // Lay out slots.
    let word = |w: &String| Slot::Fixed(Token::Word(w.clone()));
    let mut draft = Draft { sentences: Vec::with_capacity(n_sent), answer_pos: (0, 0), window };
    for s in 0..n_sent {
        let len = draw_sentence_len(spec, rng);
        let mut slots: Vec<Slot> = (0..len).map(|_| Slot::Free).collect();
        let core = if s == answer_sentence {
            Some((gold, [0, 1, 2, 3]))
        } else if let Some((_, de)) = decoy.filter(|d| d.0 == s) {
            Some((de, [2, 3, 0, 1]))
        } else {
            None
        };
        if let Some((ent, order)) = core {
            let at = rng.random_range(2..len - 2);
            slots[at - 2] = word(&draft.window[order[0]]);
            slots[at - 1] = word(&draft.window[order[1]]);
            slots[at] = Slot::Fixed(Token::Entity(ent));
            slots[at + 1] = word(&draft.window[order[2]]);
            slots[at + 2] = word(&draft.window[order[3]]);
            if s == answer_sentence {
                draft.answer_pos = (s, at);
            }
        }
        draft.sentences.push(slots);
    }

    // Entity slots: every entity must appear; add a few extra mentions.
    let mut free: Vec<(usize, usize)> = draft
        .sentences
        .iter()
        .enumerate()
        .flat_map(|(s, slots)| {
            slots
                .iter()
                .enumerate()
                .filter(|(_, sl)| matches!(sl, Slot::Free))
                .map(move |(i, _)| (s, i))
        })
        .collect();
    free.shuffle(rng);
    let mut placed_entities: Vec<EntityId> = entities
        .iter()
        .copied()
        .filter(|e| *e != gold && decoy.map(|d| d.1) != Some(*e))
        .collect();
    let extra = rng.random_range(0..=n_sent);
    for _ in 0..extra {
        placed_entities.push(*entities.choose(rng).unwrap());
    }
    if placed_entities.len() > free.len() {
        return None;
    }
    let mut assignments: BTreeMap<(usize, usize), EntityId> = BTreeMap::new();
    for (slot, e) in free.iter().zip(&placed_entities) {
        assignments.insert(*slot, *e);
        draft.sentences[slot.0][slot.1] = Slot::Entity;
    }

    let mut passage = Vec::new();
    let mut gold_index = 0;
    for (s, slots) in draft.sentences.iter().enumerate() {
        for (i, slot) in slots.iter().enumerate() {
            if (s, i) == draft.answer_pos {
                gold_index = passage.len();
            }
            passage.push(match slot {
                Slot::Fixed(t) => t.clone(),
                Slot::Entity => Token::Entity(assignments[&(s, i)]),
                Slot::Free => fill_word(spec, rng),
            });
        }
        passage.push(Token::SentenceEnd('.'));
    }

    // Uniqueness: no other entity mention may share the answer's immediate context.
    let (l1, r1) = (&passage[gold_index - 1], &passage[gold_index + 1]);
    let clash = passage.iter().enumerate().any(|(i, t)| {
        i != gold_index
            && t.entity().is_some()
            && i > 0
            && i + 1 < passage.len()
            && &passage[i - 1] == l1
            && &passage[i + 1] == r1
    });
    if clash {
        return None;
    }

    let question = build_question(spec, &draft.window, rng);
    let mut entity_strings = BTreeMap::new();
    for e in &entities {
        entity_strings.insert(*e, format!("Entity {}", e.0));
    }
    Some(ClozeExample {
        source_id: format!("synth-{}-{}-{index:06}", spec.mode.name(), spec.seed),
        passage,
        question,
        answer: gold,
        entity_strings,
        sentence_spans: None,
    })
}

fn build_question(spec: &SynthSpec, window: &[String; 4], rng: &mut ChaCha8Rng) -> Vec<Token> {
    let para = |w: &String| spec.paraphrase_table.get(w).cloned().unwrap_or_else(|| w.clone());
    let words: Vec<String> = match spec.mode {
        SynthMode::ExactMatch => window.to_vec(),
        SynthMode::Paraphrase => window.iter().map(para).collect(),
        SynthMode::PartialClue => {
            let keep = rng.random_range(0..4);
            window
                .iter()
                .enumerate()
                .map(|(i, w)| if i == keep { w.clone() } else { para(w) })
                .collect()
        }
    };
    vec![
        Token::Word(words[0].clone()),
        Token::Word(words[1].clone()),
        Token::Placeholder,
        Token::Word(words[2].clone()),
        Token::Word(words[3].clone()),
    ]
}

/// Generate `spec.n_examples` examples; output depends only on `spec`.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Vec<ClozeExample>, CorpusError> {
    spec.check()?;
    let indices: Vec<usize> = (0..spec.n_examples).collect();
    Ok(par::map(&indices, |&i| one_example(spec, i)))
}
