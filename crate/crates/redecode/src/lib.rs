//! Iterative-refinement paraphrase generation.
//!
//! A VAE-based sequence-to-sequence model in which a chain of decoders
//! successively rewrites the previous decoder's output by attending over its
//! softmax vectors. The crate bundles everything needed to exercise the model
//! at desk scale: a small reverse-mode autodiff tensor library, LSTM and
//! attention layers, the model itself, an Adam training loop with KL
//! annealing and checkpointing, corpus ingestion, and self-contained
//! BLEU / METEOR / TER evaluation.

pub mod cli;
pub mod corpus;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use tensor::{Graph, Rng, Tensor, TensorError, Var};
