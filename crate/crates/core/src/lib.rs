//! Reference implementation of the residual matrix transformer and its
//! baseline decoder-only transformer, with the analysis tooling around them:
//! outer-product memory primitives, signal-moment propagation, parameter and
//! FLOP accounting, and a deterministic training harness.
//!
//! Everything runs in f64 on the CPU. Determinism is part of the contract:
//! given the same seed and configuration, initialization, batch order,
//! training trajectories, and metrics are bit-for-bit reproducible.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod graph;
pub mod lm;
pub mod memory;
pub mod moments;
pub mod optim;
pub mod params;
pub mod resources;
pub mod rmt;
pub mod schedule;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
