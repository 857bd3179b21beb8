//! Vector-quantized image tokenizer trained with a semantic-ratio perceptual
//! loss in two phases, plus autoregressive and mask-predict token
//! transformers and the evaluation tooling around them.

pub mod autoenc;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod manifest;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod quantizer;
pub mod rng;
pub mod training;
pub mod transformers;
pub mod viz;

pub use error::{Error, ErrorKind, Result};
