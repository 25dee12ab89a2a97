//! Action-chunking policies with a joint-embedding predictive objective,
//! trained and evaluated on a small synthetic manipulation suite.

mod error;

pub mod baselines;
pub mod checkpoint;
pub mod datastore;
pub mod evalkit;
pub mod model;
pub mod simenv;
pub mod trainer;

pub use error::{Error, Result};
