//! Per-AP calibration delay estimation from a training location with a known
//! position, and correction of later epochs.
//!
//! The estimator assumes the training measurements are LOS, the reference AP
//! has no delay, and the AP positions are exact. Any antenna position error
//! folds silently into the estimated delay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dist_slice, AccessPoint, Observation, Point, ToaEpoch};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEntry {
    pub ap_id: u32,
    pub delta_t_hat: f64,
    pub n_obs: usize,
    pub std_err: f64,
}

/// Estimated calibration delays keyed by AP id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibrationTable {
    entries: BTreeMap<u32, CalibrationEntry>,
}

impl CalibrationTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Table of fixed delays, e.g. known from installation records.
    pub fn from_deltas(deltas: impl IntoIterator<Item = (u32, f64)>) -> Self {
        CalibrationTable {
            entries: deltas
                .into_iter()
                .map(|(ap_id, d)| {
                    (
                        ap_id,
                        CalibrationEntry {
                            ap_id,
                            delta_t_hat: d,
                            n_obs: 1,
                            std_err: 0.0,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn insert(&mut self, entry: CalibrationEntry) {
        self.entries.insert(entry.ap_id, entry);
    }

    pub fn get(&self, ap_id: u32) -> Option<&CalibrationEntry> {
        self.entries.get(&ap_id)
    }

    /// Delay for `ap_id`, zero when the AP is not in the table.
    pub fn delta(&self, ap_id: u32) -> f64 {
        self.entries.get(&ap_id).map_or(0.0, |e| e.delta_t_hat)
    }

    pub fn entries(&self) -> impl Iterator<Item = &CalibrationEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        let v: Vec<&CalibrationEntry> = self.entries.values().collect();
        Ok(serde_json::to_string_pretty(&v)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: Vec<CalibrationEntry> = serde_json::from_str(text)?;
        let mut t = CalibrationTable::new();
        for e in v {
            if e.n_obs < 1 {
                return Err(Error::InvalidParameter {
                    name: "n_obs",
                    reason: format!("AP {} has n_obs = 0", e.ap_id),
                });
            }
            t.insert(e);
        }
        Ok(t)
    }
}

/// How per-AP residuals are combined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    #[default]
    Mean,
    /// Robust to a few NLOS-contaminated training epochs.
    Median,
}

/// Estimates `δT_j` for every AP heard at least `min_obs` times.
pub fn estimate_calibration(
    epochs: &[ToaEpoch],
    aps: &[AccessPoint],
    known_position: &Point,
    min_obs: usize,
    estimator: Estimator,
) -> Result<CalibrationTable> {
    let first = epochs.first().ok_or(Error::Empty("no calibration epochs"))?;
    let reference = first.reference_ap;
    if let Some(e) = epochs.iter().find(|e| e.reference_ap != reference) {
        return Err(Error::InvalidParameter {
            name: "epochs",
            reason: format!(
                "epoch {} uses reference AP {}, expected {reference}",
                e.epoch_id, e.reference_ap
            ),
        });
    }
    let by_id: BTreeMap<u32, &AccessPoint> = aps.iter().map(|a| (a.id, a)).collect();
    let range = |id: u32| -> Result<f64> {
        let ap = by_id.get(&id).ok_or(Error::UnknownAp(id))?;
        if ap.position.dim() != known_position.dim() {
            return Err(Error::DimensionMismatch {
                expected: ap.position.dim(),
                got: known_position.dim(),
            });
        }
        Ok(dist_slice(&known_position.0, &ap.position.0))
    };
    let d_ref = range(reference)?;

    let mut residuals: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut ref_count = 0usize;
    for e in epochs {
        if e.toa(reference).is_none() {
            continue;
        }
        ref_count += 1;
        for o in &e.observations {
            if o.ap_id == reference {
                continue;
            }
            residuals
                .entry(o.ap_id)
                .or_default()
                .push(o.toa + d_ref - range(o.ap_id)?);
        }
    }
    if ref_count == 0 {
        return Err(Error::MissingReference(reference));
    }

    let mut table = CalibrationTable::new();
    table.insert(CalibrationEntry {
        ap_id: reference,
        delta_t_hat: 0.0,
        n_obs: ref_count,
        std_err: 0.0,
    });
    for (ap_id, r) in residuals {
        let n = r.len();
        if n < min_obs.max(1) {
            continue;
        }
        let mean = r.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let (delta_t_hat, std_err) = match estimator {
            Estimator::Mean => (mean, sd / (n as f64).sqrt()),
            // asymptotic efficiency of the median under Gaussian noise is 2/π
            Estimator::Median => (median(r), (std::f64::consts::PI / 2.0).sqrt() * sd / (n as f64).sqrt()),
        };
        table.insert(CalibrationEntry {
            ap_id,
            delta_t_hat,
            n_obs: n,
            std_err,
        });
    }
    Ok(table)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Subtracts each AP's table entry from its ToA. The reference stays at 0.
/// Applying twice subtracts the delay twice.
pub fn apply_calibration(epoch: &ToaEpoch, table: &CalibrationTable) -> ToaEpoch {
    ToaEpoch {
        epoch_id: epoch.epoch_id,
        reference_ap: epoch.reference_ap,
        observations: epoch
            .observations
            .iter()
            .map(|o| Observation {
                ap_id: o.ap_id,
                toa: if o.ap_id == epoch.reference_ap {
                    0.0
                } else {
                    o.toa - table.delta(o.ap_id)
                },
            })
            .collect(),
    }
}
