//! # uts-core
//!
//! Data-centric audio pre-training pipeline: caption corpora are parsed into
//! candidate tags by an instruction-following LLM, the tag pool is ranked
//! with a document-frequency TF-IDF score to form a fixed-size Unified Tag
//! System (UTS), and every clip is mapped to a multi-hot label plus a
//! canonical tag sequence.
//!
//! The crate also carries exact, gradient-checked kernels for the
//! pre-training objectives (multi-tag BCE, autoregressive / parallel
//! decoding NLL, symmetric InfoNCE, and the multi-task combination) and a
//! small hand-differentiated model with an SGD trainer that shows each
//! objective recovering planted structure on synthetic features.
//!
//! Module map:
//! - [`corpus`]: JSONL caption records and summary-paragraph extraction
//! - [`parser`]: prompt construction, response validation, batch parsing
//! - [`uts`]: document frequencies, TF-IDF scoring, top-K vocabulary
//! - [`labeler`]: multi-hot labels, zero-vector filtering, tag sequences
//! - [`objectives`]: loss kernels with analytic gradients
//! - [`toy`]: encoder / pooling / heads, SGD trainer, mAP
//! - [`stats`]: rank-frequency tables and vocabulary overlap
//! - [`pipeline`]: stage orchestration, configuration, run manifests

pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod labeler;
pub mod objectives;
pub mod parser;
pub mod pipeline;
pub mod stats;
pub mod tensor;
pub mod toy;
pub mod uts;

pub use error::{Error, Result};
pub use tensor::Matrix;

/// Crate version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
