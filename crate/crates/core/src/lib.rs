//! Softmax, mixture-of-softmaxes (MoS) and mixture-of-contexts (MoC) output
//! layers for recurrent language models, with the tooling to measure the
//! rank of the log-probability matrices they can express.

pub mod analysis;
pub mod cli;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod heads;
pub mod linalg;
pub mod optim;
pub mod params;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
