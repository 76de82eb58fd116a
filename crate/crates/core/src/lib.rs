//! Text-aligned binary spherical quantization tokenizer and a small unified
//! autoregressive model over text and visual tokens.

// `!(x > 0.0)` style checks are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod bsq;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod evalkit;
pub mod imageio;
pub mod error;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod plot;
pub mod syndata;
pub mod tokcodec;
pub mod trainer;
pub mod um3;

pub use error::{Error, Result};
