pub mod checkpoint;
pub mod config;
pub mod counterfactual;
pub mod data;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod exposure;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod pipeline;
pub mod recommender;
pub mod simulator;
pub mod stats;
pub mod train;

pub use error::{Result, TipsError};
