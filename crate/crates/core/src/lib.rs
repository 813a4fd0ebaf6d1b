//! Parallel-path decoder-only transformers.
//!
//! `parapath` trains small LLaMA-style baselines and parallel-path models in
//! which k independent, narrower layer stacks run side by side and are fused
//! by a Connection Block (a shared linear map or a Gumbel-Softmax router with
//! a combined slot). Paths can be pretrained on their own data, composed into
//! one model by weight surgery, trained jointly, and then inspected for how
//! the router uses them.
//!
//! Module map:
//!
//! - [`tensor`], [`graph`], [`rng`], [`gradcheck`]: dense tensors, reverse-mode
//!   differentiation, seeded randomness, finite-difference checking
//! - [`blocks`]: RMSNorm, RoPE, causal attention, SwiGLU, the layer block
//! - [`parallel`]: path execution, Share Linear and Gumbel MoE v1/v2 fusion
//! - [`config`], [`model`]: declarative configs, model assembly and forward
//! - [`losses`]: cross-entropy and routing regularisers
//! - [`composer`]: building a composite model from pretrained paths
//! - [`data`]: toy tokenizer, synthetic corpora, chunking and batching
//! - [`trainer`]: AdamW, cosine schedule, accumulation, two-phase regimen
//! - [`checkpoint`]: the on-disk parameter format
//! - [`analysis`]: routing traces, cosine dominance, utilization, generation
//! - [`cli`]: the command implementations behind the `parapath` binary

pub mod analysis;
pub mod blocks;
pub mod checkpoint;
pub mod cli;
pub mod composer;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod model;
pub mod parallel;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, SeqLayout, Var};
pub use rng::RngState;
pub use tensor::{Float, Tensor};
