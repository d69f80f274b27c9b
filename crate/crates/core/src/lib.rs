mod batching;
pub mod cli;
pub mod config;
pub mod diffcore;
pub mod error;
pub mod evalkit;
pub mod geometry;
pub mod grounder;
pub mod optibox;
pub mod synthdata;
pub mod textenc;
pub mod train;

pub use error::{Error, Result};
