pub mod collective;
pub mod compressor;
pub mod error;
pub mod matrix;
pub mod optimizer;
pub mod rng;
pub mod workload;

pub use error::{Error, Result};
