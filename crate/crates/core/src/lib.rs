pub mod artifacts;
pub mod commands;
pub mod autoencoder;
pub mod diffusion;
pub mod encoder;
pub mod decode;
pub mod error;
pub mod image;
pub mod metrics;
pub mod neurosim;
pub mod nn;
pub mod pipeline;
pub mod reconstruct;
pub mod rng;
pub mod store;
pub mod suite;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
