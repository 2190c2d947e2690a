//! Pipeline orchestration for the `maq-lab` binary: layered run
//! configuration, reproducible run directories with digest manifests, and
//! the command implementations.

pub mod config;
pub mod manifest;
pub mod pipeline;

pub use config::RunConfig;
pub use manifest::{Manifest, RunWriter};
