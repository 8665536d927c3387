pub mod channel;
pub mod cli;
pub mod config;
pub mod error;
pub mod feedback;
pub mod gaussian;
pub mod harness;
pub mod quantize;
pub mod solver;

pub use error::{Error, Result};
