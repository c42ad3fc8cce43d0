//! Aspect-based sentiment analysis with a hierarchical bidirectional LSTM,
//! built on an internal reverse-mode autodiff tensor core.
//!
//! The crate is organized bottom-up:
//! - [`tensor`]: dense tensors, the gradient tape, and backward.
//! - [`gradcheck`]: central finite-difference oracle for gradients.
//! - [`layers`]: embedding lookup, LSTM/BiLSTM with masking, dropout,
//!   softmax head, masked cross-entropy.
//! - [`data`]: corpus parsing, tokenization, vocabulary, aspect unrolling,
//!   padding, embedding files, and a synthetic corpus generator.
//! - [`model`]: the hierarchical review model and the sentence-level
//!   baseline.
//! - [`checkpoint`]: self-describing parameter container.
//! - [`train`]: Adam, gradient clipping, mini-batch loop, early stopping,
//!   evaluation.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{GradientMap, Tape, Tensor};
