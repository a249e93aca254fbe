//! Embeddings of categorical codes from timestamped event sequences.
//!
//! The centerpiece is a CBOW-style embedding model extended with a
//! time-aware attention mechanism: instead of averaging context vectors
//! inside a hard window, each target code learns a softmax weighting over
//! relative time offsets, so the effective context scope of every code is
//! learned rather than fixed. The crate also ships the supporting pipeline:
//!
//! * [`corpus`] — event-log parsing, vocabulary construction, time-unit
//!   bucketing and frequency subsampling;
//! * [`negsample`] — O(1) negative sampling from the unigram^(3/4)
//!   distribution via an alias table;
//! * [`model`] — parameters, forward loss and SGD steps for both the
//!   attention model and the plain CBOW baseline;
//! * [`trainer`] — epoch orchestration, context assembly, learning-rate
//!   schedule and lock-free multi-worker training;
//! * [`eval`] — k-means clustering scored by NMI and nearest-neighbour
//!   precision@1 against label files;
//! * [`synthgen`] — synthetic corpora with planted cluster structure and
//!   planted temporal profiles, for end-to-end validation at desk scale.

pub mod corpus;
pub mod eval;
pub mod model;
pub mod negsample;
pub mod synthgen;
pub mod trainer;

/// Dense identifier of a code in a [`corpus::Vocabulary`].
pub type CodeId = u32;
