pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod denoise;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod sampler;
pub mod synthetic;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
