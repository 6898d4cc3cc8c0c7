#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Delayed averaging consensus over time-varying directed graphs: weight and
//! delay schedules, connectivity certificates, simulators, evolutionary
//! matrices, the discrete-to-continuous reduction and trajectory metrics.

pub mod connectivity;
pub mod dynamics;
pub mod error;
pub mod evolution;
pub mod metrics;
pub mod reduction;
pub mod schedule;

pub use error::{Error, Result};
