//! YOTO: merge independently fine-tuned code-vulnerability classifiers by
//! Vul-Vector arithmetic instead of joint training.
//!
//! The pipeline: generate or ingest function-level datasets (`corpus`),
//! pretrain a small transformer encoder (`model`, `train`), fine-tune one
//! classifier per vulnerability type, take layer-wise parameter deltas
//! against the shared base (`vulvec`), add and λ-scale those deltas, apply
//! the sum back onto the base, and evaluate the merged model with per-dataset
//! classification heads (`eval`). Checkpoints and vectors round-trip through
//! a single-file container (`store`).

pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod rng;
pub mod store;
pub mod tensor;
pub mod train;
pub mod vulvec;

pub use error::{Result, YotoError};
