//! Optimal selection of measurement poses for robot calibration.
//!
//! A plan of measurement configurations is scored by the expected
//! end-effector position error that remains at user-chosen test poses after
//! the identified parameters are used for compensation. The crate provides
//! the kinematic and elastostatic model, the identification regression, the
//! criterion, feasibility constraints, design optimizers, and a Monte Carlo
//! harness that checks the criterion against simulated calibrations.

pub mod constraints;
pub mod cli;
pub mod config;
pub mod criterion;
pub mod error;
pub mod fixtures;
pub mod linalg;
pub mod model;
pub mod optimize;
pub mod regression;
pub mod seed;
pub mod simulate;

pub use error::{Error, Result};
