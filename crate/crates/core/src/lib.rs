pub mod checkpoint;
pub mod cli;
pub mod client;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod federation;
pub mod model;
pub mod nn;
pub mod server;

pub use error::{Error, Result};
