//! Fluid-queue simulator and probe-and-release controller for highway
//! bottlenecks with capacity drop and a mix of human-driven and
//! connected/automated vehicles.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod controller;
pub mod dist;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod model;
pub mod theory;
pub mod translator;

pub use config::{ControllerKind, Patch, Scenario};
pub use error::{Error, Result};
