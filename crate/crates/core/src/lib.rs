pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod inference;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod training;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use model::{ModelConfig, Seq2Seq};
pub use numerics::{Graph, ParamId, ParamStore, Tensor, Var};
