//! File formats, experiment harness and command-line front end for token-level
//! preference optimization on small tree MDPs.

pub mod checkpoint;
pub mod cli;
mod error;
pub mod formats;

pub use error::{Error, Result};
pub use tokmdp_core as core;
pub mod instances;
pub mod verify;
pub mod gen_task;
pub mod compare;
pub mod heatmap;
pub mod experiments;
