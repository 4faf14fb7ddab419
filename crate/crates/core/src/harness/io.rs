//! CSV and JSON artifacts.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::report::{ErrorRecord, ReportRow};
use crate::error::{Error, Result};
use crate::geometry::{Observation, Point, Scenario, ToaEpoch};
use crate::tracking::TrackState;

pub const SCENARIO_FILE: &str = "scenario.json";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const ESTIMATES_FILE: &str = "estimates.csv";
pub const RECORDS_FILE: &str = "records.csv";
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const TRACK_FILE: &str = "track.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const CDF_FILE: &str = "cdf.csv";

/// One solver's estimate for one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateRow {
    pub epoch_id: u64,
    pub solver: String,
    pub position: Point,
    pub tau: f64,
    pub truth: Point,
    pub status: String,
}

fn io_context(path: &Path) -> impl Fn(Error) -> Error + '_ {
    move |e| e.context(format!("writing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = File::create(path).map_err(|e| io_context(path)(e.into()))?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn write_scenario(path: &Path, scenario: &Scenario) -> Result<()> {
    write_json(path, scenario)
}

pub fn read_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)?;
    super::config::parse_json(&text, &path.display().to_string())
}

#[derive(Debug, Serialize, Deserialize)]
struct EpochRow {
    epoch_id: u64,
    ap_id: u32,
    toa_meters: f64,
}

/// One row per observation; each epoch's reference row comes first.
pub fn write_epochs(path: &Path, epochs: &[ToaEpoch]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_context(path)(e.into()))?;
    for e in epochs {
        let mut obs: Vec<&Observation> = e.observations.iter().collect();
        obs.sort_by_key(|o| o.ap_id != e.reference_ap);
        for o in obs {
            w.serialize(EpochRow {
                epoch_id: e.epoch_id,
                ap_id: o.ap_id,
                toa_meters: o.toa,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_epochs`]: each epoch's first row names its reference AP.
pub fn read_epochs(path: &Path) -> Result<Vec<ToaEpoch>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut by_id: BTreeMap<u64, ToaEpoch> = BTreeMap::new();
    for row in r.deserialize() {
        let row: EpochRow = row?;
        by_id
            .entry(row.epoch_id)
            .or_insert_with(|| ToaEpoch::new(row.epoch_id, row.ap_id, Vec::new()))
            .observations
            .push(Observation {
                ap_id: row.ap_id,
                toa: row.toa_meters,
            });
    }
    let epochs: Vec<ToaEpoch> = by_id.into_values().collect();
    for e in &epochs {
        e.validate()
            .map_err(|err| err.context(format!("epoch {} in {}", e.epoch_id, path.display())))?;
    }
    Ok(epochs)
}

fn axis_names(prefix: &str, dim: usize) -> Vec<String> {
    ["x", "y", "z"][..dim].iter().map(|a| format!("{prefix}{a}")).collect()
}

pub fn write_estimates(path: &Path, dim: usize, rows: &[EstimateRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_context(path)(e.into()))?;
    let mut header = vec!["epoch_id".to_string(), "solver".to_string()];
    header.extend(axis_names("", dim));
    header.push("tau".into());
    header.extend(axis_names("true_", dim));
    header.push("status".into());
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.epoch_id.to_string(), r.solver.clone()];
        rec.extend(r.position.0.iter().map(f64::to_string));
        rec.push(r.tau.to_string());
        rec.extend(r.truth.0.iter().map(f64::to_string));
        rec.push(r.status.clone());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_records(path: &Path, records: &[ErrorRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_context(path)(e.into()))?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<ErrorRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// `epoch_time, x, y[, z], vx, vy[, vz], var_x, …, var_vx, …` per tracked epoch.
pub fn write_track(path: &Path, dim: usize, states: &[Option<TrackState>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_context(path)(e.into()))?;
    let mut header = vec!["epoch_time".to_string()];
    header.extend(axis_names("", dim));
    header.extend(axis_names("v", dim));
    header.extend(axis_names("var_", dim));
    header.extend(axis_names("var_v", dim));
    w.write_record(&header)?;
    for s in states.iter().flatten() {
        let mut rec = vec![s.time.to_string()];
        rec.extend(s.mean.iter().map(f64::to_string));
        rec.extend(s.covariance.diagonal().iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_context(path)(e.into()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Long-format CDF: `solver, error_meters, fraction`.
pub fn write_cdf(path: &Path, curves: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_context(path)(e.into()))?;
    w.write_record(["solver", "error_meters", "fraction"])?;
    for (solver, curve) in curves {
        for (e, f) in curve {
            w.write_record([solver.clone(), e.to_string(), f.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epochs_round_trip_with_reference_first() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(EPOCHS_FILE);
        let e = ToaEpoch::new(
            4,
            7,
            vec![
                Observation { ap_id: 2, toa: 13.25 },
                Observation { ap_id: 7, toa: 0.0 },
                Observation {
                    ap_id: 9,
                    toa: -0.1 + 0.2,
                },
            ],
        );
        write_epochs(&p, std::slice::from_ref(&e)).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("epoch_id,ap_id,toa_meters\n4,7,0.0\n"), "{text}");
        let back = read_epochs(&p).unwrap();
        assert_eq!(back[0].reference_ap, 7);
        assert_eq!(back[0].toa(9), e.toa(9));
        assert_eq!(back[0].toa(2), Some(13.25));
    }

    #[test]
    fn records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(RECORDS_FILE);
        let recs = vec![ErrorRecord {
            epoch_id: 1,
            solver: "ep".into(),
            error_meters: 0.1 + 0.2,
            heard: 5,
            iterations: 7,
            converged: true,
        }];
        write_records(&p, &recs).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("epoch_id,solver,error_meters,heard,iterations,converged\n"));
        assert_eq!(read_records(&p).unwrap(), recs);
    }
}
