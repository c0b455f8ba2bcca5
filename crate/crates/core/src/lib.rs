pub mod barrier;
pub mod basin;
pub mod cli;
pub mod elm;
pub mod error;
pub mod gwl;
pub mod harness;
pub mod model;
pub mod models;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
