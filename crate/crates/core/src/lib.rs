//! Desk-scale training lab for multi-task speech translation with a
//! cross-modal contrastive objective.
//!
//! Everything runs on a small reverse-mode autodiff engine over f64 tensors:
//! a synthetic triplet corpus (speech features, transcript, translation), a
//! shared Transformer encoder-decoder with a convolutional speech front end,
//! the four-term training objective (ST + ASR + MT cross-entropy plus a
//! weighted cross-modal bridge loss), hard-example augmentation, Adam with
//! warmup, and the evaluation stack (beam decode, BLEU, cross-modal
//! retrieval, modality-gap statistics).

pub mod augment;
pub mod data;
pub mod objective;
pub mod error;
pub mod nn;
pub mod tensor;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::Tensor;
