//! Compositional zero-shot learning with a frozen text/image encoder pair.
//!
//! The only trainable pieces are a block of soft prompt vectors and a soft
//! embedding table holding one row per attribute and per object. Each
//! attribute-object pair is rendered as `[SOS, v_1..v_k, attr, obj, EOS, PAD..]`,
//! passed through a small frozen causal text transformer, and compared by
//! cosine similarity against projected image features.
//!
//! Module map:
//! - [`autodiff`]: dense `f64` tensors, a reverse-mode tape, optimizers.
//! - [`encoders`]: frozen text transformer and image feature table.
//! - [`prompt`]: soft prompt / soft embedding state and context assembly.
//! - [`model`]: text matrices, temperature-scaled logits, prediction.
//! - [`data`]: composition spaces, split files, target sets, synthetic data.
//! - [`evaluation`]: bias sweep, S/U/HM/AUC, feasibility masking.
//! - [`training`]: cross-entropy training with checkpoints and resume.
//! - [`checkpoint`], [`config`]: on-disk formats used by the `czsl` tool.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod prompt;
pub mod training;

pub use error::{Error, Result};
