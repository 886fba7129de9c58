pub mod ablate;
pub mod bidm;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod export;
pub mod gradcheck;
pub mod heads;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod numkit;
pub mod optim;
pub mod train;

pub use error::{Error, Result};
