//! Closed-loop simulation of linear time-varying plants under network-hosted
//! controllers, with an adaptive piecewise-invariant fast path.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ap;
pub mod closed_loop;
pub mod controllers;
pub mod error;
pub mod experiment;
pub mod koopman;
pub mod linalg;
pub mod oracle;
pub mod plis;
pub mod report;
pub mod ltv;
pub mod metrics;
pub mod solvers;
pub mod wmn;

pub use error::{Result, SimError};
