//! Concept-based explanations for out-of-distribution detectors.
//!
//! The crate is `no_std` with `alloc`. File formats, configuration and the
//! command line live in the `oodconcepts` companion crate.
#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

mod error;

pub mod autodiff;
pub mod concepts;
pub mod detectors;
pub mod explain;
pub mod learn;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
