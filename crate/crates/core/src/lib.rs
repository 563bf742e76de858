//! Relevance-estimator reranking and relevance-weighted answer
//! marginalization for retrieval-augmented question answering, with
//! confidence-gated decoding policies, the joint-training losses and an
//! evaluation harness.

pub mod backend;
pub mod data;
pub mod error;
pub mod losses;
pub mod marginalize;
pub mod metrics;
mod par;
pub mod pipeline;
pub mod policy;
pub mod scoring;

pub use error::{BackendError, Error, Result};
