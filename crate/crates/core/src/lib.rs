pub mod archive;
pub mod client;
pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod generation;
pub mod losses;
pub mod lte;
pub mod metrics;
pub mod nn;
pub mod report;
pub mod rng;

pub use error::{Error, Result};
