pub mod data;
pub mod error;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
