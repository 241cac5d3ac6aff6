//! Differentially private keyword extraction for retrieval-augmented generation.
//!
//! A query retrieves `N` documents, each document yields one model response,
//! and the responses are reduced to a token histogram. The number of keywords
//! `k` is chosen with the exponential mechanism over histogram gaps, and the
//! exact top-`k` tokens are released only if a noisy gap test passes. The
//! final answer is generated from the question and the released keywords.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod config;
pub mod generation;
pub mod histogram;
pub mod mechanisms;
pub mod metrics;
pub mod pipeline;
pub mod retrieval;
pub mod simulate;

pub use accountant::{calibrate, CalibrationResult, DpGuarantee, RdpCurve};
pub use config::{Mode, QueryRecord, RunConfig};
pub use histogram::{build_histogram, gap_profile, normalize_and_tokenize, TokenHistogram};
pub use mechanisms::{find_best_k, top_k_with_ptr, KeywordRelease, NoiseSource};
pub use pipeline::{run_experiment, Pipeline, RunReport};
