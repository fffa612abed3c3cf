//! Decentralized dynamic state estimation for inverter-based microgrids.
//!
//! Voltages and currents are expressed in a common synchronously rotating dq
//! frame, which turns the bus and line circuits into linear time-invariant
//! models. Each distributed generation unit (DGU) runs its own four-state
//! Kalman filter at the sensor rate, and a slower global filter estimates the
//! line currents from the local bus-voltage estimates.
//!
//! Module map:
//!
//! * [`frames`]: abc/dq0 Park transform.
//! * [`models`]: continuous-time DGU, line and coupled-plant models.
//! * [`discretize`]: Euler and zero-order-hold discretization.
//! * [`kalman`]: Kalman recursion with noisy-input covariance correction.
//! * [`sim`]: ground-truth plant simulator with noise and load events.
//! * [`estimation`]: local/global estimators and error metrics.
//! * [`config`], [`trace_io`], [`report`]: scenario files, CSV traces and
//!   metrics used by the command-line runner.

pub mod config;
pub mod discretize;
pub mod error;
pub mod estimation;
pub mod frames;
pub mod kalman;
pub mod models;
pub mod report;
pub mod sim;
pub mod trace_io;

pub use error::{Error, Result};
