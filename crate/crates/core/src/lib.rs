pub mod bpe;
pub mod data;
pub mod decode;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
