//! Constant-velocity Kalman filter over per-epoch position fixes.
//!
//! The state is `(position, velocity)`. Each fix's spatial covariance from the
//! probabilistic solver is used as the measurement noise, so uncertain fixes
//! move the track less. `τ` never enters the track.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ep::PositionEstimate;
use crate::error::{Error, Result};
use crate::numeric::{spd_inverse, symmetrize};

/// Go-kart tags transmit every 100 ms.
pub const DEFAULT_DT: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct TrackState {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub time: f64,
}

impl TrackState {
    pub fn dim(&self) -> usize {
        self.mean.len() / 2
    }

    pub fn position(&self) -> &[f64] {
        &self.mean.as_slice()[..self.dim()]
    }

    pub fn velocity(&self) -> &[f64] {
        &self.mean.as_slice()[self.dim()..]
    }
}

/// Measurement noise used by [`kf_step_with`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementNoise {
    /// Spatial block of the fix's posterior covariance.
    #[default]
    FromEstimate,
    /// Fixed isotropic variance in m².
    Fixed(f64),
}

/// Innovation diagnostics of one update.
#[derive(Debug, Clone, PartialEq)]
pub struct Innovation {
    pub residual: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// Normalized innovation squared `νᵀ S⁻¹ ν`.
    pub nis: f64,
}

/// Track seeded from a first fix, at rest with velocity variance `v_var`.
pub fn kf_init(first: &PositionEstimate, t0: f64, v_var: f64) -> TrackState {
    let d = first.dim();
    let mut mean = DVector::zeros(2 * d);
    let mut cov = DMatrix::zeros(2 * d, 2 * d);
    for i in 0..d {
        mean[i] = first.mean[i];
        for j in 0..d {
            cov[(i, j)] = first.covariance[(i, j)];
        }
        cov[(d + i, d + i)] = v_var;
    }
    TrackState {
        mean,
        covariance: cov,
        time: t0,
    }
}

/// Constant-velocity prediction with white-acceleration noise of intensity `q`.
pub fn kf_predict(state: &TrackState, dt: f64, q: f64) -> TrackState {
    let d = state.dim();
    let n = 2 * d;
    let mut f = DMatrix::identity(n, n);
    let mut qm = DMatrix::zeros(n, n);
    for i in 0..d {
        f[(i, d + i)] = dt;
        qm[(i, i)] = q * dt.powi(3) / 3.0;
        qm[(i, d + i)] = q * dt.powi(2) / 2.0;
        qm[(d + i, i)] = q * dt.powi(2) / 2.0;
        qm[(d + i, d + i)] = q * dt;
    }
    let mean = &f * &state.mean;
    let mut covariance = &f * &state.covariance * f.transpose() + qm;
    symmetrize(&mut covariance);
    TrackState {
        mean,
        covariance,
        time: state.time + dt,
    }
}

/// Predict by `dt`, then update with the spatial part of `estimate`.
pub fn kf_step(state: &TrackState, dt: f64, estimate: &PositionEstimate, q: f64) -> Result<TrackState> {
    kf_step_with(state, dt, estimate, q, MeasurementNoise::FromEstimate).map(|(s, _)| s)
}

pub fn kf_step_with(
    state: &TrackState,
    dt: f64,
    estimate: &PositionEstimate,
    q: f64,
    noise: MeasurementNoise,
) -> Result<(TrackState, Innovation)> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter {
            name: "dt",
            reason: format!("must be > 0, got {dt}"),
        });
    }
    let d = state.dim();
    if estimate.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: estimate.dim(),
        });
    }
    let z = DVector::from_column_slice(&estimate.mean.as_slice()[..d]);
    let r = match noise {
        MeasurementNoise::FromEstimate => estimate.position_covariance(),
        MeasurementNoise::Fixed(v) => DMatrix::identity(d, d) * v,
    };
    let predicted = kf_predict(state, dt, q);
    kf_update(&predicted, &z, &r)
}

/// Joseph-form measurement update with `H = [I 0]`.
pub fn kf_update(state: &TrackState, z: &DVector<f64>, r: &DMatrix<f64>) -> Result<(TrackState, Innovation)> {
    let d = state.dim();
    let n = 2 * d;
    let mut h = DMatrix::zeros(d, n);
    for i in 0..d {
        h[(i, i)] = 1.0;
    }
    let p = &state.covariance;
    let residual = z - &h * &state.mean;
    let mut s = &h * p * h.transpose() + r;
    symmetrize(&mut s);
    let s_inv = spd_inverse(&s).ok_or_else(|| Error::InvalidParameter {
        name: "measurement covariance",
        reason: "innovation covariance is not positive definite".into(),
    })?;
    let gain = p * h.transpose() * &s_inv;
    let mean = &state.mean + &gain * &residual;
    let ikh = DMatrix::identity(n, n) - &gain * &h;
    let mut covariance = &ikh * p * ikh.transpose() + &gain * r * gain.transpose();
    symmetrize(&mut covariance);
    let nis = residual.dot(&(&s_inv * &residual));
    Ok((
        TrackState {
            mean,
            covariance,
            time: state.time,
        },
        Innovation {
            residual,
            covariance: s,
            nis,
        },
    ))
}

/// Runs a track over a sequence of optional fixes spaced `dt` apart. Missing
/// fixes become prediction-only steps; the track starts at the first fix.
pub fn run_track(
    fixes: &[Option<PositionEstimate>],
    dt: f64,
    q: f64,
    v_var: f64,
    noise: MeasurementNoise,
) -> Result<Vec<Option<TrackState>>> {
    let mut out = Vec::with_capacity(fixes.len());
    let mut state: Option<TrackState> = None;
    for (i, fix) in fixes.iter().enumerate() {
        let t = i as f64 * dt;
        state = match (state.take(), fix) {
            (None, None) => None,
            (None, Some(f)) => {
                let mut s = kf_init(f, t, v_var);
                if let MeasurementNoise::Fixed(v) = noise {
                    for k in 0..s.dim() {
                        for j in 0..s.dim() {
                            s.covariance[(k, j)] = if k == j { v } else { 0.0 };
                        }
                    }
                }
                Some(s)
            }
            (Some(s), None) => Some(kf_predict(&s, dt, q)),
            (Some(s), Some(f)) => Some(kf_step_with(&s, dt, f, q, noise)?.0),
        };
        out.push(state.clone());
    }
    Ok(out)
}
