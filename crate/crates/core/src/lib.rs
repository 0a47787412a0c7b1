//! Neural embeddings: represent a text by how a small masked language model's
//! weights move when it is briefly fine-tuned on that text alone, and
//! evaluate embeddings by counting broken (anchor, positive, negative)
//! similarity orderings.

// Negated comparisons are used deliberately so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data_io;
pub mod embedder;
pub mod error;
pub mod evaluation;
pub mod masking;
pub mod model;
pub mod synth;
pub mod tokenizer;

pub use error::{Error, Result};
