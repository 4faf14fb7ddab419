//! Classical comparison solvers.
//!
//! `solve_linear` is the squared-range TDoA linearization: subtracting the
//! reference equation leaves a system linear in `(x, d_ref)`. `solve_nonlinear`
//! runs Levenberg-Marquardt on the ToA residuals `ToA_j − τ − d_j(x)` with unit
//! weights. Neither models NLOS bias.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationTable;
use crate::error::{Error, Result};
use crate::geometry::{dist_slice, AccessPoint, BoundingBox, Point, ToaEpoch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineStatus {
    Ok,
    RankDeficient,
    NotConverged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineResult {
    pub position: Point,
    pub tau: f64,
    /// `‖ToA_j − τ − d_j(x)‖₂` over heard APs.
    pub residual_norm: f64,
    pub iterations: usize,
    pub status: BaselineStatus,
}

/// Condition number above which the linear system counts as rank deficient.
const MAX_CONDITION: f64 = 1e12;

const LM_MAX_ITERS: usize = 100;
const LM_STEP_TOL: f64 = 1e-8;

/// Heard APs with calibrated arrivals; the reference comes first.
struct Rows {
    positions: Vec<Vec<f64>>,
    toas: Vec<f64>,
    dim: usize,
}

fn resolve(epoch: &ToaEpoch, aps: &[AccessPoint], cal: Option<&CalibrationTable>) -> Result<Rows> {
    let by_id: BTreeMap<u32, &AccessPoint> = aps.iter().map(|a| (a.id, a)).collect();
    let mut order: Vec<_> = epoch.observations.iter().collect();
    order.sort_by_key(|o| o.ap_id != epoch.reference_ap);
    let mut positions = Vec::with_capacity(order.len());
    let mut toas = Vec::with_capacity(order.len());
    for o in order {
        let ap = by_id.get(&o.ap_id).ok_or(Error::UnknownAp(o.ap_id))?;
        positions.push(ap.position.0.clone());
        toas.push(o.toa - cal.map_or(0.0, |t| t.delta(o.ap_id)));
    }
    let dim = positions.first().map_or(0, |p| p.len());
    if let Some(p) = positions.iter().find(|p| p.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: p.len(),
        });
    }
    Ok(Rows { positions, toas, dim })
}

/// τ that minimizes the residual norm for a fixed position.
fn best_tau(rows: &Rows, x: &[f64]) -> f64 {
    rows.positions
        .iter()
        .zip(&rows.toas)
        .map(|(p, t)| t - dist_slice(x, p))
        .sum::<f64>()
        / rows.toas.len() as f64
}

fn residual_norm(rows: &Rows, x: &[f64], tau: f64) -> f64 {
    rows.positions
        .iter()
        .zip(&rows.toas)
        .map(|(p, t)| (t - tau - dist_slice(x, p)).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Least-squares solution of the squared-range TDoA system.
pub fn solve_linear(epoch: &ToaEpoch, aps: &[AccessPoint], cal: Option<&CalibrationTable>) -> Result<BaselineResult> {
    let rows = resolve(epoch, aps, cal)?;
    let d = rows.dim;
    let n = rows.toas.len();
    if n < d + 2 {
        return Err(Error::InsufficientAps { needed: d + 2, have: n });
    }
    if epoch.toa(epoch.reference_ap).is_none() {
        return Err(Error::UnknownAp(epoch.reference_ap));
    }
    // Work relative to the reference AP: ‖p_j‖² − r_j² = 2 p_jᵀx + 2 r_j d_ref.
    let origin = &rows.positions[0];
    let mut a = DMatrix::zeros(n - 1, d + 1);
    let mut b = DVector::zeros(n - 1);
    for j in 1..n {
        let p: Vec<f64> = rows.positions[j].iter().zip(origin).map(|(c, o)| c - o).collect();
        let r = rows.toas[j] - rows.toas[0];
        for i in 0..d {
            a[(j - 1, i)] = 2.0 * p[i];
        }
        a[(j - 1, d)] = 2.0 * r;
        b[j - 1] = p.iter().map(|c| c * c).sum::<f64>() - r * r;
    }
    let svd = a.svd(true, true);
    let sv = &svd.singular_values;
    let smax = sv.max();
    let smin = sv.min();
    let rank_deficient = !(smin > 0.0) || smax / smin > MAX_CONDITION;
    let sol = svd
        .solve(&b, smax * 1e-14)
        .map_err(|e| Error::DegenerateState(format!("linear solve failed: {e}")))?;
    let x: Vec<f64> = (0..d).map(|i| sol[i] + origin[i]).collect();
    let tau = best_tau(&rows, &x);
    Ok(BaselineResult {
        residual_norm: residual_norm(&rows, &x, tau),
        position: Point(x),
        tau,
        iterations: 0,
        status: if rank_deficient {
            BaselineStatus::RankDeficient
        } else {
            BaselineStatus::Ok
        },
    })
}

/// Starting point for [`solve_nonlinear`].
#[derive(Debug, Clone, PartialEq)]
pub enum NonlinearInit {
    /// Linear solution when available, else the center of the heard APs' box.
    Auto,
    At(Point),
}

/// Levenberg-Marquardt over `(x, τ)`.
pub fn solve_nonlinear(
    epoch: &ToaEpoch,
    aps: &[AccessPoint],
    cal: Option<&CalibrationTable>,
    init: &NonlinearInit,
) -> Result<BaselineResult> {
    let rows = resolve(epoch, aps, cal)?;
    let d = rows.dim;
    let n = rows.toas.len();
    if n < d + 1 {
        return Err(Error::InsufficientAps { needed: d + 1, have: n });
    }
    let x0 = match init {
        NonlinearInit::At(p) => {
            if p.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: p.dim(),
                });
            }
            p.0.clone()
        }
        NonlinearInit::Auto => match solve_linear(epoch, aps, cal) {
            Ok(r) if r.status == BaselineStatus::Ok && r.position.is_finite() => r.position.0,
            _ => {
                let pts: Vec<Point> = rows.positions.iter().cloned().map(Point).collect();
                BoundingBox::enclosing(&pts).expect("nonempty").center().0
            }
        },
    };
    let mut z = DVector::from_iterator(d + 1, x0.iter().copied().chain([best_tau(&rows, &x0)]));

    let residuals = |z: &DVector<f64>| -> DVector<f64> {
        let x = &z.as_slice()[..d];
        DVector::from_iterator(
            n,
            rows.positions
                .iter()
                .zip(&rows.toas)
                .map(|(p, t)| t - z[d] - dist_slice(x, p)),
        )
    };
    let jacobian = |z: &DVector<f64>| -> DMatrix<f64> {
        let x = &z.as_slice()[..d];
        let mut j = DMatrix::zeros(n, d + 1);
        for (row, p) in rows.positions.iter().enumerate() {
            let dist = dist_slice(x, p).max(1e-12);
            for i in 0..d {
                j[(row, i)] = -(x[i] - p[i]) / dist;
            }
            j[(row, d)] = -1.0;
        }
        j
    };

    let mut lambda = 1e-3;
    let mut r = residuals(&z);
    let mut cost = r.norm_squared();
    let mut status = BaselineStatus::NotConverged;
    let mut iterations = 0;
    while iterations < LM_MAX_ITERS {
        iterations += 1;
        let j = jacobian(&z);
        let jtj = j.transpose() * &j;
        let g = j.transpose() * &r;
        if g.norm() < 1e-14 * (1.0 + cost) {
            status = BaselineStatus::Ok;
            break;
        }
        let mut damped = jtj.clone();
        for i in 0..=d {
            damped[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
        }
        let Some(chol) = damped.cholesky() else {
            lambda *= 10.0;
            continue;
        };
        let step = -chol.solve(&g);
        let candidate = &z + &step;
        let r_new = residuals(&candidate);
        let cost_new = r_new.norm_squared();
        if cost_new <= cost {
            z = candidate;
            r = r_new;
            cost = cost_new;
            lambda = (lambda * 0.1).max(1e-12);
            if step.norm() < LM_STEP_TOL {
                status = BaselineStatus::Ok;
                break;
            }
        } else {
            lambda *= 10.0;
            if step.norm() < LM_STEP_TOL {
                status = BaselineStatus::Ok;
                break;
            }
        }
    }
    let x = z.as_slice()[..d].to_vec();
    Ok(BaselineResult {
        position: Point(x),
        tau: z[d],
        residual_norm: cost.sqrt(),
        iterations,
        status,
    })
}
