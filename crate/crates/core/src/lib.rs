//! Listwise-encoded contrastive passage reranking.

pub mod embedder;
pub mod error;
pub mod evalkit;
pub mod inference;
pub mod interface;
pub mod loss;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
