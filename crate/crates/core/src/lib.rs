//! Adaptive group-wise gradient clipping (AGGC) for framework-free training
//! loops, together with reference clipping strategies, desk-scale models
//! with hand-written backward passes, synthetic gradient workloads and an
//! experiment runner that logs per-group telemetry.

pub mod baseline;
pub mod clip;
pub mod config;
pub mod error;
pub mod models;
pub mod optim;
pub mod registry;
pub mod runner;
pub mod telemetry;
pub mod workloads;

pub use error::{Error, Result};
