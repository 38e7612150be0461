//! Multi-label theme identification for two-party conversation transcripts.
//!
//! The crate trains four independent classifiers over theme-annotated
//! conversations — a cosine-similarity scorer, a positional thematic-density
//! scorer, a generative sequence scorer, and a feature-count scorer — then
//! surveys their agreement to trade coverage for accuracy, and finally tries
//! to repair characteristic errors of the surviving hypotheses by going back
//! to the word lattices of the recognizer output.
//!
//! Module map:
//!
//! * [`corpus`] — transcripts, labels, lattices, JSON-lines i/o
//! * [`features`] — vocabulary selection and discriminative term weighting
//! * [`hypothesis`] — scored multi-label decisions shared by all classifiers
//! * [`cosine`], [`density`], [`hmm`], [`poisson`] — the four base classifiers
//! * [`eval`] — multi-label metrics and error typing
//! * [`strategy`] — agreement partitioning, vote levels, score fusion, tuning
//! * [`recovery`] — lattice-driven re-scoring and rule-based repair
//! * [`synth`] — seeded corpus generator for benchmarks and stress tests
//! * [`model`] — trained-model bundle serialization
//! * [`pipeline`] — end-to-end train/classify/survey/evaluate orchestration

pub mod corpus;
pub mod cosine;
pub mod density;
pub mod error;
pub mod eval;
pub mod features;
pub mod hmm;
pub mod hypothesis;
pub mod model;
pub mod pipeline;
pub mod poisson;
pub mod recovery;
pub mod strategy;
pub mod synth;

pub use corpus::{
    Conversation, Corpus, CorpusStats, Lattice, LatticeArc, LatticeSet, Speaker,
    ThemeLabel, ThemeSet, Turn, TRASH_LABEL,
};
pub use error::{Error, Result};
pub use hypothesis::{SystemId, ThemeHypothesis};
