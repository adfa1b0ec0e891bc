//! Two-time-scale decomposition and distributed state estimation for stiff
//! nonlinear systems whose fast and slow behavior is not aligned with
//! individual state variables.
//!
//! The library splits a singularly perturbed model into a boundary-layer
//! (fast) subsystem in stretched time and a reduced (slow) subsystem on the
//! constraint manifold, reconstructs the full state with a composite
//! correction, and runs a multi-rate estimator pair: an extended Kalman
//! filter on the fast subsystem and a moving horizon estimator on the slow
//! one. A continuous stirred tank reactor benchmark and a command-line
//! runner are included.

pub mod cli;
pub mod config;
pub mod cstr;
pub mod decomposition;
pub mod error;
pub mod estimators;
pub mod integrate;
pub mod metrics;
pub mod model;
pub mod numdiff;
pub mod orchestrator;

pub use error::{Error, Result};
