//! Instance-conditioned low-rank adapter generation for a frozen backbone.
//!
//! A transformer generator maps condition tokens to a tensor of parameter
//! tokens, which detokenize into LoRA pairs injected into a frozen backbone.
//! The crate also carries the static baselines, the gradient-conflict and
//! weight-geometry analyses, and the persistence formats used by the CLI.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod conflict;
pub mod error;
pub mod experiment;
pub mod generator;
pub mod gradcheck;
pub mod manifold;
pub mod report;
pub mod rng;
pub mod selfcheck;
pub mod tasks;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Gradients, Tape, Tensor, Var};
