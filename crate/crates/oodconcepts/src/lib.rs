//! Files, configuration and commands around [`oodconcepts_core`].

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod formats;

pub use error::{CliError, Result};
pub use oodconcepts_core as core;
