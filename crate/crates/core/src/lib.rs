//! Concept bottleneck memory: a two-fold memory attached to a concept
//! bottleneck model that flags likely mistakes and reapplies stored human
//! concept corrections to similar inputs.

pub mod calibration;
pub mod datasets;
pub mod error;
pub mod harness;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod types;

pub use error::{Cb2mError, Result};
