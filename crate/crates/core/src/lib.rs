//! Byte-level encoder-decoder language modelling, end to end.
//!
//! The crate covers corpus preparation under byte budgets, synthetic
//! baseline corpora, span-corruption example building, a small reverse-mode
//! autodiff engine, a byte-level encoder-decoder transformer, the
//! pretraining/finetuning loops, and NLI/QA evaluation.

pub mod codec;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
