//! Passage re-ranking with MaxP aggregation and TinyBERT-style knowledge
//! distillation, small enough to train on a laptop CPU.

pub mod autodiff;
pub mod data;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod rank;

pub use error::{Error, Result};
