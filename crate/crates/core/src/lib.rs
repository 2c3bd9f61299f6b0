pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod infer;
pub mod loss;
pub mod mask;
pub mod mask_head;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pixel_decoder;
pub mod tensor;
pub mod train;
pub mod transformer;
pub use error::{Error, Result};
pub use tensor::Tensor;
