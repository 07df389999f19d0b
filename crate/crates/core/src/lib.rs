#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod asa;
pub mod autograd;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod text;
pub mod train;
pub mod tts;

pub use error::{Error, Result};
