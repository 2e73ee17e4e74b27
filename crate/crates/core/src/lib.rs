//! Multi-stage pretrained abstractive summarization at desk scale.
//!
//! A from-scratch Transformer encoder-decoder with a logit-level copy head,
//! content-selection masking and checkpoint surgery for chaining training
//! stages, together with the training, decoding and evaluation pieces needed
//! to run it end to end on synthetic corpora.

pub mod checkpoint;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod search;
pub mod selection;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
