//! Multimodal adaptation gate on a small transformer encoder.
//!
//! Word-level lexical vectors inside the encoder are displaced by a gated,
//! norm-capped vector computed from the acoustic and visual features that
//! co-occur with each word. The crate carries everything needed to train and
//! evaluate that model from scratch on 64-bit CPU arithmetic: a tape-based
//! autodiff core, the gate itself, the encoder, input-level fusion baselines,
//! word alignment, datasets, Adam training and sentiment metrics.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod data;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod gradcheck;
pub mod mag;
pub mod mode;
pub mod results;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use mode::{Dropout, Mode};
