pub mod backbone;
pub mod checkpoint;
pub mod cluster;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod imaging;
pub mod linalg;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod points;
pub mod roi;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
