//! Multi-token contrastive embeddings with multi-view query-document
//! matching, trained end to end on a small causal transformer.

pub mod autodiff;
pub mod backbone;
mod binfmt;
pub mod checkpoint;
pub mod contrastive;
pub mod dataset;
pub mod embedder;
pub mod error;
pub mod evalkit;
pub mod mask;
pub mod matcher;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod sequence;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
