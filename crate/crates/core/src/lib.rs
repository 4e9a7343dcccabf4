//! Differentiable architecture search with cyclic weight updates, pluggable
//! discretizers and a dynamically growing op space.

pub mod cell;
pub mod discretize;
pub mod error;
pub mod harness;
pub mod network;
pub mod nn;
pub mod ops;
pub mod search;
pub mod tournament;

pub use error::{Error, Result};
