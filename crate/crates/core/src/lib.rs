//! Friedkin-Johnsen opinion dynamics for multi-agent deliberation.
//!
//! The crate simulates belief evolution under the FJ update, fits FJ
//! parameters to observed trajectories, computes influence, confidence and
//! alignment metrics, and evaluates the mixture-of-experts view of
//! deliberation (routing regret, local diversity, routing conditions) on
//! synthetic scenarios with closed-form losses.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod domain;
pub mod dynamics;
pub mod error;
pub mod estimation;
pub mod metrics;
pub mod random;
pub mod routing;
pub mod scenarios;

pub use error::{Error, Result};
