pub mod aggregate;
pub mod ann;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod embeddings;
pub mod encoders;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod pairs;
pub mod tokenize;
pub mod train;
pub mod world;

pub use error::{Error, Result};
