//! Adversarial contrastive masked-language-model pre-training for discrete
//! sequences.
//!
//! The engine pairs a learned noiser (a GRU scorer feeding a differentiable
//! budgeted sampling stack) against a transformer MLM encoder. The noiser is
//! trained to pick token corruptions that maximize the encoder's
//! reconstruction loss, the encoder to minimize it, alternating in fixed
//! cycles; a classical random-masking baseline shares the same pipeline.
//!
//! Layout:
//! - [`tensor`]: dense tensors with reverse-mode autodiff
//! - [`nn`]: embeddings, GRU, transformer blocks, MLM head
//! - [`sampling`]: Gumbel noise, Gumbel-Softmax, relaxed subset selection,
//!   straight-through hard sampling
//! - [`noiser`]: the adversarial masker
//! - [`mlm`]: random baseline masking and the reconstruction objective
//! - [`train`]: AdamW, the alternating schedule, checkpoints, metrics
//! - [`data`]: vocabulary, corpus loading, synthetic corpora, batching

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod mlm;
pub mod nn;
pub mod noiser;
pub mod rng;
pub mod sampling;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use scalar::Scalar;
pub use tensor::Tensor;
