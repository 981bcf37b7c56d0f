pub mod cli;
pub mod contrastive;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod grounding;
pub mod knowledge;
pub mod prompt;
pub mod query;
pub mod synth;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
