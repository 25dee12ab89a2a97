//! Deterministic dense-tensor autodiff.
//!
//! A [`Graph`] records forward ops on row-major [`Tensor`]s; `backward` sweeps
//! it in reverse. Parameters live in a [`ParamStore`] and are pulled into a
//! graph as leaves, which lets any number of graphs share one read-only store
//! (e.g. one graph per batch sample on separate threads). [`AdamW`] applies
//! updates, and [`grad_check`] is a central finite-difference oracle.

mod error;
mod gradcheck;
mod graph;
pub mod kernels;
mod optim;
mod params;
mod tensor;

pub use error::{Error, Result};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, REL_ERR_FLOOR};
pub use graph::{AttentionCall, Gradients, Graph, NodeId, LAYER_NORM_EPS};
pub use optim::{adam_step, AdamConfig, AdamW};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tensor::{Real, Tensor};
