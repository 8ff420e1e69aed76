pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod runner;
pub mod sim;
pub mod topology;

pub use error::{Error, Result};
