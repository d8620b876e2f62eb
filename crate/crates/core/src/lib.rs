pub mod bagnet;
pub mod baselines;
pub mod classifier;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod hardpos;
pub mod models;
pub mod nn;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
