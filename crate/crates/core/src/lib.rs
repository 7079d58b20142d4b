pub mod analysis;
pub mod ar;
pub mod data;
pub mod error;
pub mod harness;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod sampler;
pub mod tokenizer;
pub mod vq;

pub use error::{Error, Result};
