//! Learned rigid-body dynamics for wrench-driven tools in contact.
//!
//! The crate covers the full loop: a penalty-contact reference simulator
//! generates trajectories of a tool pushed by force/torque commands, a
//! heterogeneous graph network learns to predict per-vertex motion plus the
//! reaction wrench, and a sampling-based planner drives the learned model to
//! reach pose targets.

pub mod error;
pub mod geometry;
pub mod dataset;
pub mod epd;
pub mod graph;
pub mod oracle;
pub mod postprocess;
pub mod state;
pub mod metrics;
pub mod mpc;
pub mod training;
pub mod tensor;

pub use error::{Error, Result};
