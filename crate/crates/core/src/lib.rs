//! Mixture-of-experts encoder with two decoders for mathematical text.
//!
//! The encoder routes each token to one of several feed-forward experts and
//! feeds a bidirectional U-decoder (masked-token and classification heads) and
//! an autoregressive G-decoder (generation). Around the model sit the
//! corruption objectives used for pre-training, multi-task fine-tuning with
//! learned task prompts, exemplar retrieval, and iterative refinement through
//! an external language model.

pub mod corpus;
pub mod checkpoint;
pub mod corruption;
pub mod error;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod refinement;
pub mod nn;
pub mod retrieval;
pub mod synthetic;
pub mod text;
pub mod training;

pub use error::{CoreError, Result};
