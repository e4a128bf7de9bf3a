//! Neural Attentive Circuits: modular attention networks whose module
//! wiring and per-module computation are generated and learned jointly.

pub mod checkpoint;
pub mod error;
pub mod executor;
pub mod generator;
pub mod graph;
pub mod layers;
pub mod model;
pub mod params;
pub mod pruning;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{NacError, Result};
