//! Linear entity ranker trained with a pairwise max-margin objective.
//!
//! The model scores every candidate with a masked dot product and is trained
//! so that the gold entity outscores every other candidate by `margin`:
//! for each (example, non-gold candidate) pair the hinge
//! `max(0, margin - w.f(gold) + w.f(other))` is minimized by seeded SGD,
//! with an L2 penalty `l2 * |w|^2`. The epoch with the best development
//! accuracy is kept.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::corpus::EntityId;
use crate::eval::AblationReport;
use crate::features::{FeatureGroup, FeaturizedExample, FEATURE_DIM};
use crate::par;
use crate::rng::{stream_rng, Stream};

const MAGIC: &[u8; 4] = b"RNK1";

#[derive(Debug, Error)]
pub enum RankerError {
    #[error("feature dimension {got} does not match model dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("gold answer of {0} is not among its candidates")]
    NoGoldCandidate(String),
    #[error("example has no candidates")]
    EmptyCandidateSet,
    #[error("unknown feature group {0:?}")]
    UnknownGroup(String),
    #[error("bad ranker model file: {0}")]
    BadModelFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankerConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub margin: f64,
    pub l2: f64,
    pub seed: u64,
}

impl RankerConfig {
    pub fn new(seed: u64) -> Self {
        RankerConfig { epochs: 10, learning_rate: 0.05, margin: 1.0, l2: 1e-5, seed }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankerModel {
    pub weights: Vec<f64>,
    /// One flag per [`FeatureGroup`]; `false` groups contribute nothing.
    pub feature_mask: [bool; 8],
}

impl RankerModel {
    pub fn zeros() -> Self {
        RankerModel { weights: vec![0.0; FEATURE_DIM], feature_mask: [true; 8] }
    }

    pub fn with_mask(feature_mask: [bool; 8]) -> Self {
        RankerModel { feature_mask, ..RankerModel::zeros() }
    }

    fn coordinate_mask(&self) -> [bool; FEATURE_DIM] {
        let mut m = [false; FEATURE_DIM];
        for g in FeatureGroup::ALL {
            if self.feature_mask[g.index()] {
                m[g.range()].iter_mut().for_each(|x| *x = true);
            }
        }
        m
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.weights.len() as u32).to_le_bytes())?;
        for x in &self.weights {
            w.write_all(&x.to_le_bytes())?;
        }
        w.write_all(&(self.feature_mask.len() as u32).to_le_bytes())?;
        for &m in &self.feature_mask {
            w.write_all(&[m as u8])?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_to(&mut v).expect("writing to a Vec cannot fail");
        v
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, RankerError> {
        let bad = |m: &str| RankerError::BadModelFile(m.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("wrong magic"));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf).map_err(|_| bad("truncated dimension"))?;
        let dim = u32::from_le_bytes(u32buf) as usize;
        if dim != FEATURE_DIM {
            return Err(RankerError::DimensionMismatch { expected: FEATURE_DIM, got: dim });
        }
        let mut weights = Vec::with_capacity(dim);
        let mut f = [0u8; 8];
        for _ in 0..dim {
            r.read_exact(&mut f).map_err(|_| bad("truncated weights"))?;
            weights.push(f64::from_le_bytes(f));
        }
        r.read_exact(&mut u32buf).map_err(|_| bad("truncated mask length"))?;
        if u32::from_le_bytes(u32buf) != 8 {
            return Err(bad("mask must have 8 groups"));
        }
        let mut mask = [0u8; 8];
        r.read_exact(&mut mask).map_err(|_| bad("truncated mask"))?;
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(bad("trailing bytes"));
        }
        Ok(RankerModel { weights, feature_mask: mask.map(|b| b != 0) })
    }
}

/// Masked dot product.
pub fn score(model: &RankerModel, f: &[f64]) -> Result<f64, RankerError> {
    if f.len() != model.weights.len() {
        return Err(RankerError::DimensionMismatch { expected: model.weights.len(), got: f.len() });
    }
    let mask = model.coordinate_mask();
    Ok(model.weights.iter().zip(f).zip(mask).filter(|(_, m)| *m).map(|((w, x), _)| w * x).sum())
}

/// Highest-scoring candidate; ties go to the smallest entity index.
pub fn predict_ranker(model: &RankerModel, example: &FeaturizedExample) -> Result<EntityId, RankerError> {
    let mut best: Option<(f64, EntityId)> = None;
    for (e, f) in example.candidates.iter().zip(&example.features) {
        let s = score(model, f)?;
        best = match best {
            Some((bs, be)) if bs > s || (bs == s && be < *e) => Some((bs, be)),
            _ => Some((s, *e)),
        };
    }
    best.map(|(_, e)| e).ok_or(RankerError::EmptyCandidateSet)
}

/// Top-1 accuracy over a featurized corpus.
pub fn ranker_accuracy(model: &RankerModel, corpus: &[FeaturizedExample]) -> Result<f64, RankerError> {
    if corpus.is_empty() {
        return Ok(0.0);
    }
    let hits: Vec<bool> = par::map(corpus, |ex| predict_ranker(model, ex).map(|p| p == ex.gold))
        .into_iter()
        .collect::<Result<_, _>>()?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / corpus.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankerEpoch {
    pub epoch: usize,
    pub train_hinge: f64,
    pub dev_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct RankerTraining {
    pub model: RankerModel,
    pub log: Vec<RankerEpoch>,
    pub best_epoch: usize,
}

impl RankerTraining {
    /// `epoch<TAB>train_loss<TAB>dev_accuracy` lines with a header.
    pub fn log_tsv(&self) -> String {
        let mut s = String::from("epoch\ttrain_loss\tdev_accuracy\n");
        for e in &self.log {
            s.push_str(&format!("{}\t{:.6}\t{:.6}\n", e.epoch, e.train_hinge, e.dev_accuracy));
        }
        s
    }
}

pub fn train_ranker(
    train: &[FeaturizedExample],
    dev: &[FeaturizedExample],
    config: &RankerConfig,
) -> Result<RankerTraining, RankerError> {
    train_ranker_masked(train, dev, config, [true; 8])
}

pub fn train_ranker_masked(
    train: &[FeaturizedExample],
    dev: &[FeaturizedExample],
    config: &RankerConfig,
    feature_mask: [bool; 8],
) -> Result<RankerTraining, RankerError> {
    if train.is_empty() {
        return Err(RankerError::EmptyTrainingSet);
    }
    let mut pairs = Vec::new();
    for (i, ex) in train.iter().enumerate() {
        let gold = ex.gold_index().ok_or_else(|| RankerError::NoGoldCandidate(ex.source_id.clone()))?;
        for (j, f) in ex.features.iter().enumerate() {
            if f.len() != FEATURE_DIM {
                return Err(RankerError::DimensionMismatch { expected: FEATURE_DIM, got: f.len() });
            }
            if j != gold {
                pairs.push((i, gold, j));
            }
        }
    }

    let mut model = RankerModel::with_mask(feature_mask);
    let mask = model.coordinate_mask();
    let mut log = vec![RankerEpoch { epoch: 0, train_hinge: f64::NAN, dev_accuracy: ranker_accuracy(&model, dev)? }];
    let mut best = (model.clone(), 0usize, f64::NEG_INFINITY);
    if config.epochs == 0 {
        best.2 = log[0].dev_accuracy;
    }

    let decay = 1.0 - 2.0 * config.learning_rate * config.l2;
    for epoch in 1..=config.epochs {
        let mut rng = stream_rng(config.seed, Stream::Ranker, &[epoch as u64]);
        pairs.shuffle(&mut rng);
        let mut hinge_total = 0.0;
        for &(i, g, j) in &pairs {
            let (fa, fe) = (&train[i].features[g], &train[i].features[j]);
            let mut gap = 0.0;
            for k in 0..FEATURE_DIM {
                if mask[k] {
                    gap += model.weights[k] * (fa[k] - fe[k]);
                }
            }
            let hinge = (config.margin - gap).max(0.0);
            hinge_total += hinge;
            model.weights.iter_mut().for_each(|w| *w *= decay);
            if hinge > 0.0 {
                for k in 0..FEATURE_DIM {
                    if mask[k] {
                        model.weights[k] += config.learning_rate * (fa[k] - fe[k]);
                    }
                }
            }
        }
        let dev_accuracy = ranker_accuracy(&model, dev)?;
        let l2_term = config.l2 * model.weights.iter().map(|w| w * w).sum::<f64>();
        let train_hinge = if pairs.is_empty() { 0.0 } else { hinge_total / pairs.len() as f64 } + l2_term;
        log.push(RankerEpoch { epoch, train_hinge, dev_accuracy });
        if dev_accuracy > best.2 {
            best = (model.clone(), epoch, dev_accuracy);
        }
    }
    Ok(RankerTraining { model: best.0, log, best_epoch: best.1 })
}

/// Retrain once per dropped group (plus the full model) and report dev accuracy.
pub fn ablation_run(
    train: &[FeaturizedExample],
    dev: &[FeaturizedExample],
    groups_to_drop: &[FeatureGroup],
    config: &RankerConfig,
) -> Result<AblationReport, RankerError> {
    let mut variants: Vec<Option<FeatureGroup>> = vec![None];
    // Rows follow the canonical group order, not the request order.
    variants.extend(FeatureGroup::ALL.into_iter().filter(|g| groups_to_drop.contains(g)).map(Some));
    let results = par::map(&variants, |v| {
        let mut mask = [true; 8];
        if let Some(g) = v {
            mask[g.index()] = false;
        }
        let trained = train_ranker_masked(train, dev, config, mask)?;
        ranker_accuracy(&trained.model, dev)
    });
    let mut report = AblationReport::default();
    for (v, acc) in variants.into_iter().zip(results) {
        let acc = acc?;
        match v {
            None => report.full_accuracy = acc,
            Some(g) => report.rows.push((g, acc)),
        }
    }
    Ok(report)
}

/// Parse group names, rejecting unknown ones.
pub fn parse_groups(names: &[String]) -> Result<Vec<FeatureGroup>, RankerError> {
    names
        .iter()
        .map(|n| n.parse().map_err(|_| RankerError::UnknownGroup(n.clone())))
        .collect()
}
