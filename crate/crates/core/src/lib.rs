//! Retrieval score calibration with balanced scores over auxiliary prompts.
//!
//! Raw cross-modal similarities are rescored per candidate against the
//! similarities of a fixed bank of auxiliary prompts, which evens out
//! candidates whose scores sit in a systematically higher range. The crate
//! covers the whole offline pipeline over precomputed embeddings:
//!
//! - [`embstore`]: EMB1 matrices and JSON manifests
//! - [`simkern`]: cosine and scaled similarity
//! - [`promptgen`]: auxiliary prompt catalogs and template selection
//! - [`scorebal`]: balanced, normalized and hybrid scores
//! - [`retrieval`]: top-1 prediction over candidate sets, both directions
//! - [`evalkit`]: box accuracy, oIoU / mIoU, category diagnostics
//! - [`hallulab`]: synthetic populations with injected range imbalance

pub mod embstore;
pub mod evalkit;
pub mod fixed;
pub mod hallulab;
pub mod promptgen;
pub mod retrieval;
pub mod scorebal;
pub mod simkern;

pub use embstore::{EmbeddingMatrix, Manifest};
pub use retrieval::{CandidateSet, Mode, RetrievalResult, ScoringConfig};
pub use scorebal::{Aggregator, BalanceConfig, HybridConfig, Normalizer};
pub use simkern::{ScoreKind, ScoreTable, SimilarityConfig};
