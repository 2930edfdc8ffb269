//! Run configuration, checkpoints and the command implementations.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod gradcheck;
pub mod predict;
pub mod shapes;
pub mod train;

pub use config::{ClassWeights, RunConfig};
