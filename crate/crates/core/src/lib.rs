pub mod bgnet;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pyramid;
pub mod tensor;
pub mod training;
pub mod weights;

pub use error::{Error, Result};
pub use model::{ModelConfig, ModelParams, Variant};
