//! Estimator pair: an extended Kalman filter on the boundary-layer subsystem
//! and moving horizon estimators for the slow and full models.

pub mod ekf;
pub mod mhe;

pub use ekf::{EkfConfig, FastEkf};
pub use mhe::{
    lm_solve, EstimationModel, LmConfig, LmReport, MheConfig, MovingHorizonEstimator,
    SolveOutcome,
};
