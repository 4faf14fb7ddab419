//! Probabilistic time-of-arrival localization.
//!
//! The crate simulates relative ToA measurements with every common error
//! source, infers device position with expectation propagation under a
//! discrete NLOS-bias prior, and compares against classical TDoA solvers.
//!
//! Distances and times are both in meters.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baseline;
pub mod calibration;
pub mod ep;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod posterior;
pub mod prior;
pub mod sim;
pub mod tracking;

mod numeric;

pub use baseline::{solve_linear, solve_nonlinear, BaselineResult, BaselineStatus, NonlinearInit};
pub use calibration::{apply_calibration, estimate_calibration, CalibrationEntry, CalibrationTable, Estimator};
pub use ep::{run_ep, EpConfig, PositionEstimate, WeightMode};
pub use error::{Error, Result};
pub use geometry::{distance, validate_scenario, AccessPoint, BoundingBox, Observation, Point, Scenario, ToaEpoch};
pub use posterior::{grid_moments, log_posterior, SolverInputs};
pub use prior::NlosPrior;
pub use sim::{quantize, simulate_epoch, ErrorModel, Hearability};
