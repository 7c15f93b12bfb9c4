//! Desk-scale toolkit for semantic-ID generative recommendation.
//!
//! The pipeline goes: item catalog + dense item embeddings are quantized
//! into hierarchical semantic IDs (residual k-means), each SID token gets
//! a semantically grounded initial embedding (keyword mean pooling over a
//! pretrained word-vector table), a multi-task instruction corpus is
//! generated (next-item prediction plus token-level alignment tasks), a
//! small decoder-only model is trained on it, and evaluation runs
//! trie-constrained beam search with full-ranking HR@K / NDCG@K.

pub mod catalog;
pub mod corpus;
pub mod decode_eval;
pub mod error;
pub mod extractor;
pub mod init;
pub mod io;
pub mod model;
pub mod quantizer;
pub mod sidspace;
pub mod synth;

pub use error::{Error, Result};
