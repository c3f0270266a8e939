//! Gloss-free multilingual sign language translation with a dual-CTC
//! hierarchical encoder and an attention decoder.
//!
//! The encoder carries two CTC heads: an early one predicting a sign-language tag
//! per output token, and a final one predicting the spoken text. Decoding combines
//! the attention decoder with the final CTC prefix score in a label-synchronous
//! beam search.

// `!(x >= lo)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ctc;
pub mod data;
pub mod decoding;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
