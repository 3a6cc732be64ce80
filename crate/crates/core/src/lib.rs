//! Cloze-style reading comprehension over anonymized news corpora.
//!
//! Two answer-selection systems share one corpus toolchain:
//!
//! * [`ranker`]: a linear entity ranker over the hand-designed templates in [`features`].
//! * [`reader`]: a bidirectional-GRU attentive reader trained with the tape-based
//!   differentiation engine in [`tensor`].
//!
//! [`eval`] scores either system overall and per hand-analysis category.
//! Corpus-level loops go through [`par`], which uses rayon when the `parallel`
//! feature is enabled and plain iterators otherwise.

pub mod corpus;
pub mod eval;
pub mod features;
pub mod par;
pub mod ranker;
pub mod reader;
pub mod rng;
pub mod tensor;

pub use corpus::{ClozeExample, CorpusError, EntityId, Token};
pub use eval::{CategoryLabel, EvalReport};
pub use features::{FeatureConfig, FeatureVector};
pub use ranker::{RankerConfig, RankerModel};
pub use reader::{ReaderConfig, ReaderModel};
