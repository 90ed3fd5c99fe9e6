pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod exec;
pub mod graph;
pub mod image;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod predictor;
pub mod temporal;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
