//! Hierarchical prefix adapters with odds-ratio preference tuning on a small
//! encoder-decoder transformer.

pub mod autograd;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod objectives;
pub mod prefix;
pub mod training;

pub use error::{Error, Result};
