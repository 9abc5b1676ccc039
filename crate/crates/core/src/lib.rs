//! Appearance-and-semantic place embeddings with attention, trained by
//! triplet ranking and evaluated by ratio-test retrieval.

pub mod attention;
pub mod bench;
pub mod config;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod param;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use config::{ModelConfig, RatioDirection, RunConfig, Variant};
pub use error::{Error, Result};
pub use model::{Embedding, Model};
pub use tape::{Tape, Var};
pub use tensor::{PoolMode, Real, Tensor};
