//! Few-shot class-incremental learning with a covariance constraint on the
//! base session and semantic perturbation learning for incremental sessions.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod mathcore;
pub mod metrics;
pub mod model;
pub mod protocol;

mod io_util;

pub use error::{Error, Result};
