//! Stall-duration tail bounds for cache-assisted video streaming.
//!
//! [`analysis`] evaluates the bound and its gradient, [`optimizer`] minimizes
//! it, [`simulator`] provides the ground truth it must dominate, and
//! [`workload`] builds synthetic catalogs and sweeps.

pub mod analysis;
pub mod cli;
pub mod error;
pub mod io;
pub mod model;
pub mod optimizer;
pub mod simulator;
pub mod workload;

pub use error::{Error, Result};
