//! Multi-choice masked image modeling at desk scale.
//!
//! The crate builds the whole pre-training pipeline from scratch: a procedural
//! toy dataset, a frozen k-means patch tokenizer, a small pre-norm vision
//! transformer with a hand-written backward pass, soft multi-choice targets
//! blended from tokenizer probabilities and inter-patch affinities, and the
//! evaluation, checkpointing and ablation tooling around them.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod inspect;
pub mod loss;
pub mod masking;
pub mod netpbm;
pub mod optim;
pub mod real;
pub mod targets;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
