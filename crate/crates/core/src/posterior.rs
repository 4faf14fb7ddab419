//! Exact unnormalized log-posterior over `(x, τ)` and a brute-force grid
//! oracle for its moments.
//!
//! For each heard AP the likelihood is a mixture over the bias grid:
//!
//! ```text
//! Σ_ℓ π_ℓ · N(ToA_j − τ − d_j − δT_j − ℓσ/10; 0, σ²) / (d_j + σ)
//! ```
//!
//! where `1/(d_j + σ)` is the range prior mapped to Cartesian coordinates.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::calibration::CalibrationTable;
use crate::error::{Error, Result};
use crate::geometry::{dist_slice, AccessPoint, BoundingBox, Point, ToaEpoch};
use crate::numeric::{log_normal, symmetrize};
use crate::prior::NlosPrior;

/// Terms smaller than this fraction of the running sum are dropped (1e-300).
const LOG_TRUNCATION: f64 = 690.8;

/// One heard AP with everything the likelihood needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub ap_id: u32,
    pub ap_position: Vec<f64>,
    pub toa: f64,
    pub cal_delay: f64,
}

impl Measurement {
    /// `ToA − δT`, the calibrated arrival.
    pub fn corrected_toa(&self) -> f64 {
        self.toa - self.cal_delay
    }
}

/// Everything a solver needs for one epoch.
#[derive(Debug, Clone)]
pub struct SolverInputs<'a> {
    pub epoch: &'a ToaEpoch,
    pub prior: &'a NlosPrior,
    pub sigma_clk: f64,
    measurements: Vec<Measurement>,
    dim: usize,
}

impl<'a> SolverInputs<'a> {
    /// Resolves every observation against `aps`. Missing calibration entries
    /// count as zero delay.
    pub fn new(
        epoch: &'a ToaEpoch,
        aps: &[AccessPoint],
        prior: &'a NlosPrior,
        cal_table: Option<&CalibrationTable>,
        sigma_clk: f64,
    ) -> Result<Self> {
        if !(sigma_clk > 0.0) || !sigma_clk.is_finite() {
            return Err(Error::InvalidParameter {
                name: "sigma_clk",
                reason: format!("must be positive and finite, got {sigma_clk}"),
            });
        }
        let by_id: BTreeMap<u32, &AccessPoint> = aps.iter().map(|a| (a.id, a)).collect();
        let mut dim = None;
        let measurements = epoch
            .observations
            .iter()
            .map(|o| {
                let ap = by_id.get(&o.ap_id).ok_or(Error::UnknownAp(o.ap_id))?;
                let d = ap.position.dim();
                if *dim.get_or_insert(d) != d {
                    return Err(Error::DimensionMismatch {
                        expected: dim.unwrap(),
                        got: d,
                    });
                }
                Ok(Measurement {
                    ap_id: o.ap_id,
                    ap_position: ap.position.0.clone(),
                    toa: o.toa,
                    cal_delay: cal_table.map_or(0.0, |t| t.delta(o.ap_id)),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let dim = dim.ok_or(Error::Empty("epoch has no observations"))?;
        Ok(SolverInputs {
            epoch,
            prior,
            sigma_clk,
            measurements,
            dim,
        })
    }

    pub fn measurements(&self) -> &[Measurement] {
        &self.measurements
    }

    /// Spatial dimension `D`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn reference(&self) -> Option<&Measurement> {
        self.measurements.iter().find(|m| m.ap_id == self.epoch.reference_ap)
    }
}

/// `log Σ_ℓ π_ℓ N(e − ℓ·step; 0, σ²)` for a single factor, with the
/// components that cannot matter at double precision skipped.
pub(crate) fn log_bias_mixture(e: f64, prior: &NlosPrior, sigma: f64) -> f64 {
    let step = prior.step();
    let logm = prior.log_masses();
    let n = logm.len();
    let var = sigma * sigma;
    let term = |ell: usize| logm[ell] + log_normal(e - ell as f64 * step, var);

    // Best achievable term is at most the largest log-mass at zero residual;
    // a lower bound on the total is the term nearest the residual.
    let nearest = (e / step).round().clamp(0.0, (n - 1) as f64) as usize;
    let mut anchor = term(nearest).max(term(0));
    if !anchor.is_finite() {
        anchor = (0..n).map(term).fold(f64::NEG_INFINITY, f64::max);
        if !anchor.is_finite() {
            return f64::NEG_INFINITY;
        }
    }
    let log_max_mass = logm.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let peak = log_max_mass - 0.5 * (crate::numeric::LN_2PI + var.ln());
    // Any kept term satisfies peak − r²/(2σ²) ≥ anchor − LOG_TRUNCATION.
    let slack = (peak - anchor + LOG_TRUNCATION).max(0.0);
    let radius = sigma * (2.0 * slack).sqrt();
    let lo = ((e - radius) / step).floor().max(0.0) as usize;
    let hi = (((e + radius) / step).ceil().max(0.0) as usize).min(n - 1);
    if lo > hi {
        return anchor;
    }
    let mut max = f64::NEG_INFINITY;
    for ell in lo..=hi {
        max = max.max(term(ell));
    }
    let mut sum = 0.0;
    for ell in lo..=hi {
        let t = term(ell);
        if t.is_finite() {
            sum += (t - max).exp();
        }
    }
    max + sum.ln()
}

/// Unnormalized log-posterior at `(x, τ)`.
pub fn log_posterior(x: &Point, tau: f64, inputs: &SolverInputs<'_>) -> Result<f64> {
    if x.dim() != inputs.dim {
        return Err(Error::DimensionMismatch {
            expected: inputs.dim,
            got: x.dim(),
        });
    }
    Ok(log_posterior_raw(&x.0, tau, inputs))
}

pub(crate) fn log_posterior_raw(x: &[f64], tau: f64, inputs: &SolverInputs<'_>) -> f64 {
    let sigma = inputs.sigma_clk;
    inputs
        .measurements
        .iter()
        .map(|m| {
            let d = dist_slice(x, &m.ap_position);
            let e = m.corrected_toa() - tau - d;
            log_bias_mixture(e, inputs.prior, sigma) - (d + sigma).ln()
        })
        .sum()
}

/// Grid spacing for [`grid_moments`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridResolution {
    pub spatial_step: f64,
    pub tau_step: f64,
}

impl GridResolution {
    pub fn uniform(step: f64) -> Self {
        GridResolution {
            spatial_step: step,
            tau_step: step,
        }
    }
}

/// Moments of the discretized posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMoments {
    /// `(x, τ)` mean.
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// `log ∫ exp(log_posterior)` estimated by the Riemann sum.
    pub log_evidence: f64,
    pub evaluated_points: u64,
}

/// Upper bound on grid points [`grid_moments`] will evaluate.
pub const GRID_BUDGET: u64 = 10_000_000;

/// Half-width of the τ window kept around each factor, in units of σ.
const TAU_WINDOW_SIGMAS: f64 = 12.0;

/// Default τ interval: `[−max corner distance to the reference AP − σ, σ]`.
pub fn default_tau_range(inputs: &SolverInputs<'_>, bbox: &BoundingBox) -> Result<(f64, f64)> {
    let r = inputs.reference().ok_or(Error::UnknownAp(inputs.epoch.reference_ap))?;
    let far = bbox
        .corners()
        .iter()
        .map(|c| dist_slice(&c.0, &r.ap_position))
        .fold(0.0, f64::max);
    Ok((-far - inputs.sigma_clk, inputs.sigma_clk))
}

/// Brute-force posterior moments over a lattice covering `bbox × tau_range`.
///
/// For each spatial node only the τ nodes where every factor is within
/// 12σ of its support are evaluated; the rest carry less than e⁻⁷² of
/// the factor peak. The budget counts evaluated nodes.
pub fn grid_moments(
    inputs: &SolverInputs<'_>,
    bbox: &BoundingBox,
    tau_range: (f64, f64),
    resolution: GridResolution,
) -> Result<GridMoments> {
    let d = inputs.dim;
    if bbox.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: bbox.dim(),
        });
    }
    let GridResolution { spatial_step, tau_step } = resolution;
    if !(spatial_step > 0.0) || !(tau_step > 0.0) {
        return Err(Error::InvalidParameter {
            name: "resolution",
            reason: "grid steps must be positive".into(),
        });
    }
    let (tau_lo, tau_hi) = tau_range;
    if !(tau_hi >= tau_lo) {
        return Err(Error::InvalidParameter {
            name: "tau_range",
            reason: format!("empty interval [{tau_lo}, {tau_hi}]"),
        });
    }

    let axis_nodes: Vec<usize> = bbox
        .extent()
        .iter()
        .map(|e| (e / spatial_step).floor() as usize + 1)
        .collect();
    let tau_nodes = ((tau_hi - tau_lo) / tau_step).floor() as usize + 1;
    let sigma = inputs.sigma_clk;
    let bias_span = inputs.prior.max_bias();
    let window_nodes = ((bias_span + 2.0 * TAU_WINDOW_SIGMAS * sigma) / tau_step).ceil() as usize + 2;
    let spatial_total: u64 = axis_nodes.iter().map(|&n| n as u64).product();
    let required = spatial_total.saturating_mul(window_nodes.min(tau_nodes) as u64);
    if required > GRID_BUDGET {
        return Err(Error::GridBudgetExceeded {
            required,
            allowed: GRID_BUDGET,
        });
    }

    // Accumulate around an origin to keep second moments well conditioned.
    let mut origin = bbox.center().0;
    origin.push(0.5 * (tau_lo + tau_hi));
    let n = d + 1;

    // Rows are indexed by every spatial axis except the last; each row is
    // reduced independently and combined in index order.
    let row_count: usize = axis_nodes[..d - 1].iter().product();
    let last_nodes = axis_nodes[d - 1];
    let rows: Vec<Accumulator> = (0..row_count)
        .into_par_iter()
        .map(|row| {
            let mut acc = Accumulator::new(n);
            let mut x = vec![0.0; d];
            let mut rem = row;
            for (axis, &count) in axis_nodes[..d - 1].iter().enumerate() {
                x[axis] = bbox.min.0[axis] + (rem % count) as f64 * spatial_step;
                rem /= count;
            }
            let mut z = vec![0.0; n];
            for k in 0..last_nodes {
                x[d - 1] = bbox.min.0[d - 1] + k as f64 * spatial_step;
                let dists: Vec<f64> = inputs
                    .measurements
                    .iter()
                    .map(|m| dist_slice(&x, &m.ap_position))
                    .collect();
                // τ support: every factor needs e_j = c_j − τ − d_j ∈ [−12σ, bias_span + 12σ]
                let mut lo = tau_lo;
                let mut hi = tau_hi;
                for (m, dj) in inputs.measurements.iter().zip(&dists) {
                    let c = m.corrected_toa() - dj;
                    lo = lo.max(c - bias_span - TAU_WINDOW_SIGMAS * sigma);
                    hi = hi.min(c + TAU_WINDOW_SIGMAS * sigma);
                }
                if lo > hi {
                    continue;
                }
                let first = ((lo - tau_lo) / tau_step).ceil().max(0.0) as usize;
                let last = (((hi - tau_lo) / tau_step).floor() as usize).min(tau_nodes - 1);
                z[..d].copy_from_slice(&x);
                for t in first..=last {
                    let tau = tau_lo + t as f64 * tau_step;
                    let lp: f64 = inputs
                        .measurements
                        .iter()
                        .zip(&dists)
                        .map(|(m, dj)| {
                            log_bias_mixture(m.corrected_toa() - tau - dj, inputs.prior, sigma) - (dj + sigma).ln()
                        })
                        .sum();
                    z[d] = tau;
                    acc.push(lp, &z, &origin);
                }
            }
            acc
        })
        .collect();

    let mut total = Accumulator::new(n);
    for r in &rows {
        total.merge(r);
    }
    if total.count == 0 || !total.log_max.is_finite() {
        return Err(Error::Empty("posterior has no mass on the grid"));
    }
    let s0 = total.s0;
    let mut mean = DVector::from_fn(n, |i, _| total.s1[i] / s0);
    let mut cov = DMatrix::from_fn(n, n, |i, j| total.s2[i * n + j] / s0 - mean[i] * mean[j]);
    symmetrize(&mut cov);
    for i in 0..n {
        mean[i] += origin[i];
    }
    let cell = spatial_step.powi(d as i32) * tau_step;
    Ok(GridMoments {
        mean,
        covariance: cov,
        log_evidence: total.log_max + s0.ln() + cell.ln(),
        evaluated_points: total.count,
    })
}

/// Weighted moment sums relative to a running log-maximum.
#[derive(Debug, Clone)]
struct Accumulator {
    log_max: f64,
    s0: f64,
    s1: Vec<f64>,
    s2: Vec<f64>,
    count: u64,
}

impl Accumulator {
    fn new(n: usize) -> Self {
        Accumulator {
            log_max: f64::NEG_INFINITY,
            s0: 0.0,
            s1: vec![0.0; n],
            s2: vec![0.0; n * n],
            count: 0,
        }
    }

    fn rescale(&mut self, new_max: f64) {
        if self.log_max.is_finite() {
            let f = (self.log_max - new_max).exp();
            self.s0 *= f;
            self.s1.iter_mut().for_each(|v| *v *= f);
            self.s2.iter_mut().for_each(|v| *v *= f);
        }
        self.log_max = new_max;
    }

    fn push(&mut self, lp: f64, z: &[f64], origin: &[f64]) {
        self.count += 1;
        if !lp.is_finite() {
            return;
        }
        if lp > self.log_max {
            self.rescale(lp);
        }
        let w = (lp - self.log_max).exp();
        let n = z.len();
        self.s0 += w;
        for i in 0..n {
            let zi = z[i] - origin[i];
            self.s1[i] += w * zi;
            for j in 0..n {
                self.s2[i * n + j] += w * zi * (z[j] - origin[j]);
            }
        }
    }

    fn merge(&mut self, other: &Accumulator) {
        self.count += other.count;
        if !other.log_max.is_finite() {
            return;
        }
        if other.log_max > self.log_max {
            self.rescale(other.log_max);
        }
        let f = (other.log_max - self.log_max).exp();
        self.s0 += f * other.s0;
        for (a, b) in self.s1.iter_mut().zip(&other.s1) {
            *a += f * b;
        }
        for (a, b) in self.s2.iter_mut().zip(&other.s2) {
            *a += f * b;
        }
    }
}
