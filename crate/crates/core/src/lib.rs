//! Core engine for testing whether token-importance explanations are
//! faithful to a model.
//!
//! A rationale (the top-k tokens under some attribution method) is scored by
//! Normalized Score Retention under one or more intervention operators and
//! compared against size-matched random rationales. The crate is `no_std`
//! and only needs an allocator; file formats, the external scorer client, and
//! the command line live in the `icebench` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod attribution;
pub mod corpus;
pub mod icetest;
pub mod operators;
pub mod report;
pub mod scorer;
pub mod seed;
pub mod stats;
pub mod synth;
pub mod taxonomy;

pub use attribution::{AttributionScores, Rationale};
pub use corpus::{Dataset, Example, LabelBlacklist};
pub use icetest::{ExampleResult, NsrValue};
pub use operators::{InfillPool, OperatorKind};
pub use report::{DatasetReport, ExampleRecord};
pub use scorer::{ReferenceScorer, ScoreVector, Scorer, ScorerError, ScorerInfo};
pub use taxonomy::{FaithfulnessBand, TaxonomyLabel};

/// Default maximum sequence length after truncation.
pub const DEFAULT_MAX_LEN: usize = 512;
/// Default rationale fraction.
pub const DEFAULT_K: f64 = 0.2;
/// Default number of random baselines for external (LLM) scorers.
pub const DEFAULT_PERMUTATIONS: usize = 50;
/// Default number of random baselines for the reference scorer.
pub const DEFAULT_PERMUTATIONS_REFERENCE: usize = 100;
/// Default bootstrap resample count.
pub const DEFAULT_BOOTSTRAP: usize = 200;
/// Default FDR level.
pub const DEFAULT_ALPHA: f64 = 0.10;
/// Default NSR degeneracy threshold on `|s(x) - s(empty)|`.
pub const DEFAULT_EPS: f64 = 1e-6;
