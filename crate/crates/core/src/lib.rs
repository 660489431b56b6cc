//! Continual learning on a frozen vision transformer with a shared
//! low-rank adapter in the early blocks and per-task adapters in the rest.

pub mod adapters;
pub mod backbone;
pub mod classifier;
pub mod diffgraph;
pub mod error;
pub mod exec;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod streams;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Execution;
