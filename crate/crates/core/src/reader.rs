//! Attentive reader: a shallow bidirectional GRU over the passage, another
//! over the question, bilinear attention, and a softmax over the entity
//! markers that occur in the passage.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::corpus::{build_vocab, Vocab, UNK_ID};
use crate::corpus::{candidates, relabel_map, relabel_entities, ClozeExample, CorpusError, EntityId};
use crate::par::{self, Execution};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{
    clip_global_norm, sgd_step, GruVars, GradientSet, ParamId, Params, Tape, Tensor, TensorError, Var,
};

const MAGIC: &[u8; 4] = b"RDR1";

#[derive(Debug, Error)]
pub enum ReaderError {
    #[error("invalid reader config: {0}")]
    BadConfig(String),
    #[error("passage is empty")]
    EmptyPassage,
    #[error("question is empty")]
    EmptyQuestion,
    #[error("candidate set is empty")]
    EmptyCandidateSet,
    #[error("answer {0} is not a candidate")]
    AnswerNotCandidate(EntityId),
    #[error("models disagree on vocabulary or shape")]
    VocabMismatch,
    #[error("no models to ensemble")]
    EmptyEnsemble,
    #[error("bad model file: {0}")]
    BadModelFile(String),
    #[error("bad embedding file: {0}")]
    BadEmbeddingFile(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How the question states are reduced to one vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum QuestionEncoding {
    /// Final forward state followed by final backward state.
    #[default]
    FinalStates,
    /// Mean over positions of the concatenated states.
    MeanPooled,
}

impl std::str::FromStr for QuestionEncoding {
    type Err = ReaderError;

    fn from_str(s: &str) -> Result<Self, ReaderError> {
        match s {
            "final" => Ok(QuestionEncoding::FinalStates),
            "mean" => Ok(QuestionEncoding::MeanPooled),
            _ => Err(ReaderError::BadConfig(format!("question encoding {s:?} (expected final|mean)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReaderConfig {
    pub embed_dim: usize,
    /// Per-direction GRU width; contextual vectors are twice this.
    pub gru_hidden: usize,
    pub vocab_capacity: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout_p: f64,
    pub clip_norm: f64,
    pub max_epochs: usize,
    pub seed: u64,
    pub pretrained_embeddings_path: Option<PathBuf>,
    /// Embeddings without a pretrained vector start uniform in ±this.
    pub embed_init_scale: f64,
    /// Renumber entity markers by first occurrence before training and prediction.
    pub relabel: bool,
    pub question_encoding: QuestionEncoding,
    pub execution: Execution,
}

impl ReaderConfig {
    pub fn new(seed: u64) -> Self {
        ReaderConfig {
            embed_dim: 100,
            gru_hidden: 128,
            vocab_capacity: 50_000,
            learning_rate: 0.1,
            batch_size: 32,
            dropout_p: 0.2,
            clip_norm: 10.0,
            max_epochs: 30,
            seed,
            pretrained_embeddings_path: None,
            embed_init_scale: 0.1,
            relabel: true,
            question_encoding: QuestionEncoding::FinalStates,
            execution: Execution::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ReaderError> {
        let bad = |m: &str| Err(ReaderError::BadConfig(m.to_string()));
        if self.embed_dim == 0 || self.gru_hidden == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return bad("embed_dim, gru_hidden, batch_size and max_epochs must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad("dropout_p must be in [0, 1)");
        }
        if self.vocab_capacity < 3 {
            return bad("vocab_capacity must leave room for at least one token");
        }
        if !(self.embed_init_scale.is_finite() && self.embed_init_scale > 0.0) {
            return bad("embed_init_scale must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0 && self.clip_norm > 0.0) {
            return bad("learning_rate and clip_norm must be positive");
        }
        Ok(())
    }
}

/// Parameter ids of one GRU direction. Input weights are `[d, h̃]`,
/// recurrent weights `[h̃, h̃]`, applied as row vector times matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GruIds {
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_c: ParamId,
    pub u_c: ParamId,
    pub b_c: ParamId,
}

impl GruIds {
    fn add(params: &mut Params, prefix: &str, d: usize, h: usize) -> GruIds {
        let mut mk = |name: &str, shape: &[usize]| params.add(format!("{prefix}.{name}"), Tensor::zeros(shape));
        GruIds {
            w_z: mk("w_z", &[d, h]),
            u_z: mk("u_z", &[h, h]),
            b_z: mk("b_z", &[h]),
            w_r: mk("w_r", &[d, h]),
            u_r: mk("u_r", &[h, h]),
            b_r: mk("b_r", &[h]),
            w_c: mk("w_c", &[d, h]),
            u_c: mk("u_c", &[h, h]),
            b_c: mk("b_c", &[h]),
        }
    }

    fn weights(&self) -> [ParamId; 6] {
        [self.w_z, self.u_z, self.w_r, self.u_r, self.w_c, self.u_c]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReaderModel {
    pub config: ReaderConfig,
    pub vocab: Vocab,
    pub params: Params,
    pub embedding: ParamId,
    pub passage_fwd: GruIds,
    pub passage_bwd: GruIds,
    pub question_fwd: GruIds,
    pub question_bwd: GruIds,
    pub w_s: ParamId,
    pub w_a: ParamId,
    /// Row of `w_a` for each entity marker in the vocabulary.
    pub entity_rows: BTreeMap<EntityId, usize>,
}

impl ReaderModel {
    /// All-zero parameters with shapes fixed by `config` and `vocab`.
    pub fn zeros(config: &ReaderConfig, vocab: Vocab) -> Self {
        let (d, h) = (config.embed_dim, config.gru_hidden);
        let entity_rows: BTreeMap<EntityId, usize> =
            vocab.entity_entries().into_iter().enumerate().map(|(row, (_, e))| (e, row)).collect();
        let mut params = Params::new();
        let embedding = params.add("embedding", Tensor::zeros(&[vocab.len(), d]));
        let passage_fwd = GruIds::add(&mut params, "passage_fwd", d, h);
        let passage_bwd = GruIds::add(&mut params, "passage_bwd", d, h);
        let question_fwd = GruIds::add(&mut params, "question_fwd", d, h);
        let question_bwd = GruIds::add(&mut params, "question_bwd", d, h);
        let w_s = params.add("w_s", Tensor::zeros(&[2 * h, 2 * h]));
        let w_a = params.add("w_a", Tensor::zeros(&[entity_rows.len(), 2 * h]));
        ReaderModel {
            config: config.clone(),
            vocab,
            params,
            embedding,
            passage_fwd,
            passage_bwd,
            question_fwd,
            question_bwd,
            w_s,
            w_a,
            entity_rows,
        }
    }

    /// Random initialization drawn from the `Init` stream of `config.seed`.
    pub fn init(config: &ReaderConfig, vocab: Vocab) -> Self {
        let mut model = ReaderModel::zeros(config, vocab);
        let mut rng = stream_rng(config.seed, Stream::Init, &[]);
        let normal = Normal::new(0.0, 0.1).expect("valid normal");
        let fill_uniform = |t: &mut Tensor, a: f64, rng: &mut ChaCha8Rng| {
            t.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-a..a));
        };
        fill_uniform(model.params.get_mut(model.embedding), config.embed_init_scale, &mut rng);
        for gru in model.grus() {
            for id in gru.weights() {
                model.params.get_mut(id).data_mut().iter_mut().for_each(|x| *x = normal.sample(&mut rng));
            }
        }
        fill_uniform(model.params.get_mut(model.w_s), 0.01, &mut rng);
        fill_uniform(model.params.get_mut(model.w_a), 0.01, &mut rng);
        model
    }

    /// Overwrite every parameter with uniform(−scale, scale) draws.
    pub fn fill_uniform(&mut self, scale: f64, seed: u64) {
        let mut rng = stream_rng(seed, Stream::Init, &[1]);
        let ids: Vec<ParamId> = self.params.ids().collect();
        for id in ids {
            self.params.get_mut(id).data_mut().iter_mut().for_each(|x| *x = rng.random_range(-scale..scale));
        }
    }

    pub fn grus(&self) -> [GruIds; 4] {
        [self.passage_fwd, self.passage_bwd, self.question_fwd, self.question_bwd]
    }

    pub fn hidden(&self) -> usize {
        self.config.gru_hidden
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|(_, _, t)| t.is_finite())
    }

    /// Copy rows from a `word v1 … vd` text file into the embedding matrix;
    /// returns how many vocabulary rows were set.
    pub fn load_pretrained(&mut self, path: &Path) -> Result<usize, ReaderError> {
        let text = std::fs::read_to_string(path)?;
        let d = self.config.embed_dim;
        let mut hits = 0;
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let mut parts = line.split_whitespace();
            let word = parts.next().unwrap_or_default();
            let values: Vec<f64> = parts
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|_| ReaderError::BadEmbeddingFile(format!("line {}: bad number", n + 1)))?;
            if values.len() != d {
                return Err(ReaderError::BadEmbeddingFile(format!("line {}: {} values, expected {d}", n + 1, values.len())));
            }
            let id = self.vocab.id_of_str(word);
            if self.vocab.token(id) != word {
                continue;
            }
            let emb = self.params.get_mut(self.embedding);
            emb.data_mut()[id * d..(id + 1) * d].copy_from_slice(&values);
            hits += 1;
        }
        Ok(hits)
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let c = &self.config;
        w.write_all(MAGIC)?;
        for v in [c.embed_dim, c.gru_hidden, c.vocab_capacity, c.batch_size, c.max_epochs] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for v in [c.learning_rate, c.dropout_p, c.clip_norm, c.embed_init_scale] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&c.seed.to_le_bytes())?;
        w.write_all(&[c.relabel as u8, (c.question_encoding == QuestionEncoding::MeanPooled) as u8])?;
        w.write_all(&(self.vocab.len() as u32).to_le_bytes())?;
        for t in self.vocab.tokens() {
            w.write_all(&(t.len() as u32).to_le_bytes())?;
            w.write_all(t.as_bytes())?;
        }
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (_, _, t) in self.params.iter() {
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &s in t.shape() {
                w.write_all(&(s as u32).to_le_bytes())?;
            }
            for &x in t.data() {
                w.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_to(&mut v).expect("writing to a Vec cannot fail");
        v
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, ReaderError> {
        let bad = |m: &str| ReaderError::BadModelFile(m.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("wrong magic"));
        }
        let mut u32_ = || -> Result<usize, ReaderError> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| bad("truncated"))?;
            Ok(u32::from_le_bytes(b) as usize)
        };
        let ints: Vec<usize> = (0..5).map(|_| u32_()).collect::<Result<_, _>>()?;
        let mut f64_ = || -> Result<f64, ReaderError> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| bad("truncated"))?;
            Ok(f64::from_le_bytes(b))
        };
        let reals: Vec<f64> = (0..4).map(|_| f64_()).collect::<Result<_, _>>()?;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(|_| bad("truncated"))?;
        let mut flags = [0u8; 2];
        r.read_exact(&mut flags).map_err(|_| bad("truncated"))?;
        let config = ReaderConfig {
            embed_dim: ints[0],
            gru_hidden: ints[1],
            vocab_capacity: ints[2],
            batch_size: ints[3],
            max_epochs: ints[4],
            learning_rate: reals[0],
            dropout_p: reals[1],
            clip_norm: reals[2],
            seed: u64::from_le_bytes(b8),
            pretrained_embeddings_path: None,
            embed_init_scale: reals[3],
            relabel: flags[0] != 0,
            question_encoding: if flags[1] != 0 { QuestionEncoding::MeanPooled } else { QuestionEncoding::FinalStates },
            execution: Execution::default(),
        };
        config.validate().map_err(|e| bad(&e.to_string()))?;

        let read_u32 = |r: &mut dyn Read| -> Result<usize, ReaderError> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| bad("truncated"))?;
            Ok(u32::from_le_bytes(b) as usize)
        };
        let n_tokens = read_u32(r)?;
        let mut tokens = Vec::with_capacity(n_tokens.min(1 << 20));
        for _ in 0..n_tokens {
            let len = read_u32(r)?;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf).map_err(|_| bad("truncated vocabulary"))?;
            tokens.push(String::from_utf8(buf).map_err(|_| bad("vocabulary is not UTF-8"))?);
        }
        let vocab = Vocab::from_tokens(tokens, config.vocab_capacity).map_err(|e| bad(&e.to_string()))?;
        let mut model = ReaderModel::zeros(&config, vocab);

        if read_u32(r)? != model.params.len() {
            return Err(bad("parameter count"));
        }
        let ids: Vec<ParamId> = model.params.ids().collect();
        for id in ids {
            let rank = read_u32(r)?;
            let shape: Vec<usize> = (0..rank).map(|_| read_u32(r)).collect::<Result<_, _>>()?;
            if shape != model.params.get(id).shape() {
                return Err(bad(&format!("shape of {}", model.params.name(id))));
            }
            for x in model.params.get_mut(id).data_mut() {
                let mut b = [0u8; 4];
                r.read_exact(&mut b).map_err(|_| bad("truncated parameters"))?;
                *x = f32::from_le_bytes(b) as f64;
            }
        }
        if !model.is_finite() {
            return Err(bad("non-finite parameter"));
        }
        Ok(model)
    }
}

/// One GRU step: `z = σ(xW_z + hU_z + b_z)`, `r = σ(xW_r + hU_r + b_r)`,
/// `c = tanh(xW_c + (r⊙h)U_c + b_c)`, `h' = (1−z)⊙h + z⊙c`.
pub fn gru_cell(tape: &mut Tape, gru: &GruIds, prev: Var, input: Var) -> Result<Var, TensorError> {
    let xz = tape.param(gru.w_z);
    let xz = tape.matmul(input, xz)?;
    let xr = tape.param(gru.w_r);
    let xr = tape.matmul(input, xr)?;
    let xc = tape.param(gru.w_c);
    let xc = tape.matmul(input, xc)?;
    gru_step(tape, gru, prev, [xz, xr, xc])
}

/// GRU step with the input projections already computed.
fn gru_step(tape: &mut Tape, gru: &GruIds, h: Var, [xz, xr, xc]: [Var; 3]) -> Result<Var, TensorError> {
    let (u_z, u_r, u_c) = (tape.param(gru.u_z), tape.param(gru.u_r), tape.param(gru.u_c));
    let (b_z, b_r, b_c) = (tape.param(gru.b_z), tape.param(gru.b_r), tape.param(gru.b_c));

    let hz = tape.matmul(h, u_z)?;
    let z = tape.add(xz, hz)?;
    let z = tape.add(z, b_z)?;
    let z = tape.sigmoid(z);

    let hr = tape.matmul(h, u_r)?;
    let r = tape.add(xr, hr)?;
    let r = tape.add(r, b_r)?;
    let r = tape.sigmoid(r);

    let rh = tape.mul(r, h)?;
    let hc = tape.matmul(rh, u_c)?;
    let c = tape.add(xc, hc)?;
    let c = tape.add(c, b_c)?;
    let c = tape.tanh(c);

    let delta = tape.sub(c, h)?;
    let step = tape.mul(z, delta)?;
    tape.add(h, step)
}

/// Run one direction over the rows of `inputs` (`[n, d]`) from a zero
/// state; returns every state as `[n, h̃]`, in position order.
pub fn run_gru(tape: &mut Tape, gru: &GruIds, inputs: Var, reverse: bool) -> Result<Var, TensorError> {
    let vars = GruVars {
        w: [gru.w_z, gru.w_r, gru.w_c].map(|id| tape.param(id)),
        u: [gru.u_z, gru.u_r, gru.u_c].map(|id| tape.param(id)),
        b: [gru.b_z, gru.b_r, gru.b_c].map(|id| tape.param(id)),
    };
    tape.gru_sequence(inputs, vars, reverse)
}

/// Embedding lookup with optional inverted dropout.
fn embed(tape: &mut Tape, model: &ReaderModel, ids: &[usize], dropout: Option<&mut ChaCha8Rng>) -> Result<Var, TensorError> {
    let table = tape.param(model.embedding);
    let x = tape.gather(table, ids)?;
    let p = model.config.dropout_p;
    match dropout {
        Some(rng) if p > 0.0 => {
            let keep = 1.0 - p;
            let mask = (0..ids.len() * model.config.embed_dim)
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            tape.dropout_apply(x, mask)
        }
        _ => Ok(x),
    }
}

/// Contextual passage matrix `[m, 2h̃]`. Only the first `len` ids are real;
/// later positions are padding, skipped by both directions and left as zero rows.
pub fn encode_passage(
    tape: &mut Tape,
    model: &ReaderModel,
    ids: &[usize],
    len: usize,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<Var, ReaderError> {
    if len == 0 || len > ids.len() {
        return Err(ReaderError::EmptyPassage);
    }
    let x = embed(tape, model, &ids[..len], dropout)?;
    let fwd = run_gru(tape, &model.passage_fwd, x, false)?;
    let bwd = run_gru(tape, &model.passage_bwd, x, true)?;
    let p = tape.concat_cols(fwd, bwd)?;
    if ids.len() > len {
        return Ok(tape.pad_rows(p, ids.len())?);
    }
    Ok(p)
}

/// Question vector of width `2h̃`.
pub fn encode_question(
    tape: &mut Tape,
    model: &ReaderModel,
    ids: &[usize],
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<Var, ReaderError> {
    if ids.is_empty() {
        return Err(ReaderError::EmptyQuestion);
    }
    let x = embed(tape, model, ids, dropout)?;
    let fwd = run_gru(tape, &model.question_fwd, x, false)?;
    let bwd = run_gru(tape, &model.question_bwd, x, true)?;
    let q = match model.config.question_encoding {
        QuestionEncoding::FinalStates => {
            let last = tape.row(fwd, ids.len() - 1)?;
            let first = tape.row(bwd, 0)?;
            tape.concat(&[last, first])?
        }
        QuestionEncoding::MeanPooled => {
            let s = tape.concat_cols(fwd, bwd)?;
            let w = tape.constant(Tensor::vector(vec![1.0 / ids.len() as f64; ids.len()]));
            tape.matmul(w, s)?
        }
    };
    Ok(q)
}

/// `α = softmax_mask(P̃ (qᵀW_s)ᵀ)` and `o = αᵀP̃`.
pub fn attend(tape: &mut Tape, q: Var, contextual: Var, w_s: Var, mask: &[bool]) -> Result<(Var, Var), TensorError> {
    let qw = tape.matmul(q, w_s)?;
    let scores = tape.matmul(contextual, qw)?;
    let alpha = tape.masked_softmax(scores, mask)?;
    let o = tape.matmul(alpha, contextual)?;
    Ok((alpha, o))
}

/// Logits over `cands` (in the given order). Entities without an output row
/// get a constant logit of zero.
pub fn candidate_logits(tape: &mut Tape, model: &ReaderModel, o: Var, cands: &[EntityId]) -> Result<Var, ReaderError> {
    if cands.is_empty() {
        return Err(ReaderError::EmptyCandidateSet);
    }
    let w_a = tape.param(model.w_a);
    let rows: Vec<Option<usize>> = cands.iter().map(|e| model.entity_rows.get(e).copied()).collect();
    if rows.iter().all(Option::is_some) {
        let rows: Vec<usize> = rows.into_iter().flatten().collect();
        let sel = tape.gather(w_a, &rows)?;
        return Ok(tape.matmul(sel, o)?);
    }
    let zero = tape.constant(Tensor::vector(vec![0.0]));
    let mut parts = Vec::with_capacity(cands.len());
    for r in rows {
        parts.push(match r {
            Some(r) => {
                let sel = tape.gather(w_a, &[r])?;
                tape.matmul(sel, o)?
            }
            None => zero,
        });
    }
    Ok(tape.concat(&parts)?)
}

/// Example mapped to vocabulary ids, with candidates in id order.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub passage: Vec<usize>,
    pub question: Vec<usize>,
    pub candidates: Vec<EntityId>,
    pub answer_index: Option<usize>,
}

pub fn encode_example(vocab: &Vocab, example: &ClozeExample) -> Result<Encoded, ReaderError> {
    if example.passage.is_empty() {
        return Err(ReaderError::EmptyPassage);
    }
    if example.question.is_empty() {
        return Err(ReaderError::EmptyQuestion);
    }
    let cands: Vec<EntityId> = candidates(example)?.into_iter().collect();
    Ok(Encoded {
        passage: vocab.encode(&example.passage),
        question: vocab.encode(&example.question),
        answer_index: cands.iter().position(|c| *c == example.answer),
        candidates: cands,
    })
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub alpha: Var,
    pub output: Var,
    pub logits: Var,
}

pub fn forward(
    tape: &mut Tape,
    model: &ReaderModel,
    enc: &Encoded,
    padded_len: usize,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<Forward, ReaderError> {
    let m = enc.passage.len();
    let mut ids = enc.passage.clone();
    ids.resize(padded_len.max(m), UNK_ID);
    let p = encode_passage(tape, model, &ids, m, dropout.as_deref_mut())?;
    let q = encode_question(tape, model, &enc.question, dropout)?;
    let mask: Vec<bool> = (0..ids.len()).map(|i| i < m).collect();
    let w_s = tape.param(model.w_s);
    let (alpha, output) = attend(tape, q, p, w_s, &mask)?;
    let logits = candidate_logits(tape, model, output, &enc.candidates)?;
    Ok(Forward { alpha, output, logits })
}

/// `−log p(answer)` on a fresh tape, plus its gradients.
pub fn loss_and_grad(
    model: &ReaderModel,
    enc: &Encoded,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<(f64, GradientSet), ReaderError> {
    let target = enc.answer_index.ok_or(ReaderError::EmptyCandidateSet)?;
    let mut tape = Tape::new(&model.params);
    let f = forward(&mut tape, model, enc, 0, dropout)?;
    let loss = tape.softmax_cross_entropy(f.logits, target)?;
    let value = tape.value(loss).item();
    Ok((value, tape.backward(loss)?))
}

/// Negative log-likelihood of the gold answer, without dropout.
pub fn loss(model: &ReaderModel, example: &ClozeExample) -> Result<f64, ReaderError> {
    let ex = prepared(model, example);
    let enc = encode_example(&model.vocab, &ex)?;
    let target = enc.answer_index.ok_or(ReaderError::AnswerNotCandidate(example.answer))?;
    let mut tape = Tape::new(&model.params);
    let f = forward(&mut tape, model, &enc, 0, None)?;
    let l = tape.softmax_cross_entropy(f.logits, target)?;
    Ok(tape.value(l).item())
}

fn prepared(model: &ReaderModel, example: &ClozeExample) -> ClozeExample {
    if model.config.relabel {
        relabel_entities(example)
    } else {
        example.clone()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    /// One weight per passage token.
    pub alpha: Vec<f64>,
    pub output_vector: Vec<f64>,
    /// Candidates in ascending id order, paired with `candidate_probs`.
    pub candidates: Vec<EntityId>,
    pub candidate_probs: Vec<f64>,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// First index of the maximum.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Trace over already-encoded ids, with `padded_len` extra padding allowed.
pub fn trace_encoded(model: &ReaderModel, enc: &Encoded, padded_len: usize) -> Result<AttentionTrace, ReaderError> {
    let mut tape = Tape::new(&model.params);
    let f = forward(&mut tape, model, enc, padded_len, None)?;
    Ok(AttentionTrace {
        alpha: tape.value(f.alpha).data().to_vec(),
        output_vector: tape.value(f.output).data().to_vec(),
        candidates: enc.candidates.clone(),
        candidate_probs: softmax(tape.value(f.logits).data()),
    })
}

/// Candidate distribution and attention for `example`, reported in the
/// example's own entity numbering.
pub fn trace(model: &ReaderModel, example: &ClozeExample) -> Result<AttentionTrace, ReaderError> {
    if !model.config.relabel {
        return trace_encoded(model, &encode_example(&model.vocab, example)?, 0);
    }
    let map = relabel_map(example);
    let back: HashMap<EntityId, EntityId> = map.iter().map(|(k, v)| (*v, *k)).collect();
    let t = trace_encoded(model, &encode_example(&model.vocab, &relabel_entities(example))?, 0)?;
    let mut pairs: Vec<(EntityId, f64)> =
        t.candidates.iter().map(|e| back[e]).zip(t.candidate_probs.iter().copied()).collect();
    pairs.sort_by_key(|p| p.0);
    Ok(AttentionTrace {
        candidates: pairs.iter().map(|p| p.0).collect(),
        candidate_probs: pairs.iter().map(|p| p.1).collect(),
        ..t
    })
}

/// Most probable candidate (smallest id on ties) and the trace behind it.
pub fn predict_reader(model: &ReaderModel, example: &ClozeExample) -> Result<(EntityId, AttentionTrace), ReaderError> {
    let t = trace(model, example)?;
    Ok((t.candidates[argmax(&t.candidate_probs)], t))
}

/// Average candidate distributions across models and take the argmax.
pub fn ensemble_predict(models: &[ReaderModel], example: &ClozeExample) -> Result<EntityId, ReaderError> {
    let first = models.first().ok_or(ReaderError::EmptyEnsemble)?;
    if models.iter().any(|m| m.vocab.tokens() != first.vocab.tokens()) {
        return Err(ReaderError::VocabMismatch);
    }
    let mut mean: Vec<f64> = Vec::new();
    let mut cands = Vec::new();
    for m in models {
        let t = trace(m, example)?;
        if mean.is_empty() {
            mean = vec![0.0; t.candidate_probs.len()];
            cands = t.candidates;
        }
        mean.iter_mut().zip(&t.candidate_probs).for_each(|(a, p)| *a += p);
    }
    let k = models.len() as f64;
    mean.iter_mut().for_each(|a| *a /= k);
    Ok(cands[argmax(&mean)])
}

pub fn reader_accuracy(model: &ReaderModel, examples: &[ClozeExample], exec: Execution) -> Result<f64, ReaderError> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let hits = par::map_with(exec, examples, |ex| predict_reader(model, ex).map(|(p, _)| p == ex.answer));
    let mut n = 0usize;
    for h in hits {
        n += h? as usize;
    }
    Ok(n as f64 / examples.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReaderEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct ReaderTraining {
    /// Snapshot with the best dev accuracy (earliest on ties).
    pub model: ReaderModel,
    /// Parameters after the last update.
    pub final_model: ReaderModel,
    pub log: Vec<ReaderEpoch>,
    pub best_epoch: usize,
    pub steps: usize,
}

impl ReaderTraining {
    pub fn log_tsv(&self) -> String {
        let mut s = String::from("epoch\ttrain_loss\tdev_accuracy\n");
        for e in &self.log {
            s.push_str(&format!("{}\t{:.6}\t{:.6}\n", e.epoch, e.train_loss, e.dev_accuracy));
        }
        s
    }
}

/// Minibatch SGD over the length-sorted training set. Each batch is a
/// contiguous slice of the sorted list; batch order is reshuffled every
/// epoch. Per-example gradients are computed independently and summed in
/// batch order, so results do not depend on the thread count.
pub fn train_reader(train: &[ClozeExample], dev: &[ClozeExample], config: &ReaderConfig) -> Result<ReaderTraining, ReaderError> {
    config.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(CorpusError::EmptyCorpus.into());
    }
    let relabel = |ex: &ClozeExample| if config.relabel { relabel_entities(ex) } else { ex.clone() };
    let train: Vec<ClozeExample> = train.iter().map(relabel).collect();
    let vocab = build_vocab(&train, config.vocab_capacity)?;
    let mut model = ReaderModel::init(config, vocab);
    if let Some(path) = &config.pretrained_embeddings_path {
        model.load_pretrained(path)?;
    }

    let mut encoded: Vec<Encoded> = train.iter().map(|ex| encode_example(&model.vocab, ex)).collect::<Result<_, _>>()?;
    for (enc, ex) in encoded.iter().zip(&train) {
        if enc.answer_index.is_none() {
            return Err(ReaderError::AnswerNotCandidate(ex.answer));
        }
    }
    encoded.sort_by_key(|e| e.passage.len());
    let batches: Vec<&[Encoded]> = encoded.chunks(config.batch_size).collect();
    let mut offsets = Vec::with_capacity(batches.len());
    let mut acc = 0u64;
    for b in &batches {
        offsets.push(acc);
        acc += b.len() as u64;
    }

    let mut log = Vec::with_capacity(config.max_epochs);
    let mut best: Option<(f64, usize, Params)> = None;
    let mut steps = 0;
    for epoch in 1..=config.max_epochs {
        let mut order: Vec<usize> = (0..batches.len()).collect();
        let mut shuffle = stream_rng(config.seed, Stream::Shuffle, &[epoch as u64]);
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut shuffle);

        let mut total_loss = 0.0;
        for &b in &order {
            let batch = batches[b];
            let results = par::map_indexed_with(config.execution, batch, |i, enc| {
                let mut rng = stream_rng(config.seed, Stream::Dropout, &[epoch as u64, offsets[b] + i as u64]);
                loss_and_grad(&model, enc, Some(&mut rng))
            });
            let mut sum = GradientSet::new(model.params.len());
            for r in results {
                let (l, g) = r?;
                total_loss += l;
                sum.add_assign(&g);
            }
            sum.scale(1.0 / batch.len() as f64);
            let clipped = clip_global_norm(sum, config.clip_norm);
            sgd_step(&mut model.params, &clipped, config.learning_rate)?;
            steps += 1;
        }
        let dev_accuracy = reader_accuracy(&model, dev, config.execution)?;
        log.push(ReaderEpoch { epoch, train_loss: total_loss / encoded.len() as f64, dev_accuracy });
        if best.as_ref().is_none_or(|(acc, _, _)| dev_accuracy > *acc) {
            best = Some((dev_accuracy, epoch, model.params.clone()));
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    let final_model = model.clone();
    model.params = params;
    Ok(ReaderTraining { model, final_model, log, best_epoch, steps })
}
