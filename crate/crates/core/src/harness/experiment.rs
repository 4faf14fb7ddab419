//! Simulate → calibrate → solve → track → evaluate.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{ExperimentConfig, SolverKind};
use super::io::{self, EstimateRow};
use super::report::{compare_report, empirical_cdf, ErrorRecord, ReportRow};
use crate::baseline::{solve_linear, solve_nonlinear, BaselineStatus, NonlinearInit};
use crate::calibration::{estimate_calibration, CalibrationTable};
use crate::ep::{run_ep, EpConfig, PositionEstimate};
use crate::error::{Error, Result};
use crate::geometry::{distance, BoundingBox, Point, Scenario, ToaEpoch};
use crate::numeric::derive_seed;
use crate::posterior::SolverInputs;
use crate::prior::NlosPrior;
use crate::sim::{realize_ap_errors, simulate_at, ErrorModel};
use crate::tracking::{run_track, TrackState};

const STREAM_AP_ERRORS: u64 = 0xa9e5;
const STREAM_EPOCHS: u64 = 0xe90c;
const STREAM_TRAINING: u64 = 0x7a1b;

/// Solver name used for Kalman-filtered EP fixes in records.
pub const TRACK_SOLVER: &str = "ep_track";

/// Resolved scenario (with realized AP ground truth) and models.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub scenario: Scenario,
    pub model: ErrorModel,
    pub prior: NlosPrior,
    pub solve_box: BoundingBox,
}

/// Resolves the scenario and draws per-AP ground-truth errors. Delays or
/// offsets already present in the scenario are kept when the corresponding
/// std is zero.
pub fn prepare(cfg: &ExperimentConfig, base: Option<&Path>) -> Result<Prepared> {
    cfg.validate()?;
    let mut scenario = cfg.resolve_scenario(base)?;
    cfg.validate_scenario(&scenario)?;
    let model = cfg.error_model()?;
    if model.sigma_dt > 0.0 || model.sigma_dx > 0.0 {
        let original = scenario.aps.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_AP_ERRORS, 0));
        realize_ap_errors(&mut scenario.aps, &model, &mut rng);
        for (ap, orig) in scenario.aps.iter_mut().zip(original) {
            if model.sigma_dt == 0.0 {
                ap.true_cal_delay = orig.true_cal_delay;
            }
            if model.sigma_dx == 0.0 {
                ap.true_position_offset = orig.true_position_offset;
            }
        }
    }
    let solve_box = cfg.solve_box.clone().unwrap_or_else(|| scenario.bounding_box());
    Ok(Prepared {
        prior: cfg.inference_prior()?,
        scenario,
        model,
        solve_box,
    })
}

/// True device position for an epoch id.
pub fn truth_for(scenario: &Scenario, epochs_per_location: usize, epoch_id: u64) -> Result<&Point> {
    let index = (epoch_id / epochs_per_location.max(1) as u64) as usize;
    scenario
        .device_positions
        .get(index)
        .ok_or(Error::DeviceIndexOutOfRange {
            index,
            count: scenario.device_positions.len(),
        })
}

/// `epochs_per_location` epochs per device position; epoch `i` draws from its
/// own seed so the output does not depend on scheduling.
pub fn simulate_stage(prep: &Prepared, cfg: &ExperimentConfig) -> Result<Vec<ToaEpoch>> {
    let epl = cfg.epochs_per_location as u64;
    let total = prep.scenario.device_positions.len() as u64 * epl;
    (0..total)
        .into_par_iter()
        .map(|id| {
            let pos = truth_for(&prep.scenario, cfg.epochs_per_location, id)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_EPOCHS, id));
            simulate_at(&prep.scenario.aps, pos, id, &prep.model, &mut rng)
                .map_err(|e| e.context(format!("simulating epoch {id}")))
        })
        .collect()
}

/// Training epochs at the known position, then the calibration table.
pub fn calibrate_stage(prep: &Prepared, cfg: &ExperimentConfig) -> Result<Option<CalibrationTable>> {
    let Some(c) = &cfg.calibration else {
        return Ok(None);
    };
    let known = match &c.known_position {
        Some(p) => p.clone(),
        None => prep
            .scenario
            .device_positions
            .first()
            .cloned()
            .ok_or_else(|| Error::Config {
                path: "calibration.known_position".into(),
                message: "required when the scenario has no device positions".into(),
            })?,
    };
    let training: Vec<ToaEpoch> = (0..c.train_epochs as u64)
        .into_par_iter()
        .map(|id| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_TRAINING, id));
            simulate_at(&prep.scenario.aps, &known, id, &prep.model, &mut rng)
        })
        .collect::<Result<_>>()
        .map_err(|e| e.context("simulating calibration epochs"))?;
    estimate_calibration(&training, &prep.scenario.aps, &known, c.min_obs, c.estimator)
        .map(Some)
        .map_err(|e| e.context("estimating calibration"))
}

/// One solver's answer for one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveOutcome {
    pub epoch_id: u64,
    pub solver: SolverKind,
    pub position: Point,
    pub tau: f64,
    pub iterations: usize,
    pub converged: bool,
    pub status: String,
    pub heard: usize,
    /// Full EP posterior, kept for tracking.
    pub ep: Option<PositionEstimate>,
}

/// Everything the solve stage needs besides the epochs.
#[derive(Debug, Clone, Copy)]
pub struct SolveContext<'a> {
    pub scenario: &'a Scenario,
    pub prior: &'a NlosPrior,
    pub sigma_clk: f64,
    pub solve_box: &'a BoundingBox,
    pub calibration: Option<&'a CalibrationTable>,
    pub ep: &'a EpConfig,
}

/// Solves one epoch with one solver. A baseline that cannot run for lack of
/// heard APs reports the box center, unconverged; every other failure is an
/// error.
pub fn solve_one(ctx: &SolveContext<'_>, epoch: &ToaEpoch, solver: SolverKind) -> Result<SolveOutcome> {
    let aps = &ctx.scenario.aps;
    let heard = epoch.heard_count();
    let mut out = SolveOutcome {
        epoch_id: epoch.epoch_id,
        solver,
        position: ctx.solve_box.center(),
        tau: 0.0,
        iterations: 0,
        converged: false,
        status: "no_fix".into(),
        heard,
        ep: None,
    };
    let baseline = match solver {
        SolverKind::Ep => {
            let inputs = SolverInputs::new(epoch, aps, ctx.prior, ctx.calibration, ctx.sigma_clk)?;
            let est = run_ep(&inputs, ctx.solve_box, ctx.ep)?;
            out.position = est.position();
            out.tau = est.tau();
            out.iterations = est.iterations;
            out.converged = est.converged;
            out.status = if est.converged { "ok" } else { "not_converged" }.into();
            out.ep = Some(est);
            return Ok(out);
        }
        SolverKind::Linear => solve_linear(epoch, aps, ctx.calibration),
        SolverKind::Nonlinear => solve_nonlinear(epoch, aps, ctx.calibration, &NonlinearInit::Auto),
    };
    match baseline {
        Ok(r) => {
            out.position = r.position;
            out.tau = r.tau;
            out.iterations = r.iterations;
            out.converged = r.status == BaselineStatus::Ok;
            out.status = match r.status {
                BaselineStatus::Ok => "ok",
                BaselineStatus::RankDeficient => "rank_deficient",
                BaselineStatus::NotConverged => "not_converged",
            }
            .into();
            if !out.position.is_finite() {
                out.position = ctx.solve_box.center();
                out.converged = false;
            }
            Ok(out)
        }
        Err(Error::InsufficientAps { .. }) => Ok(out),
        Err(e) => Err(e),
    }
}

/// Solves every epoch with every solver; output is ordered by
/// `(epoch_id, solver order)` regardless of scheduling.
pub fn solve_stage(ctx: &SolveContext<'_>, epochs: &[ToaEpoch], solvers: &[SolverKind]) -> Result<Vec<SolveOutcome>> {
    let mut sorted: Vec<&ToaEpoch> = epochs.iter().collect();
    sorted.sort_by_key(|e| e.epoch_id);
    let nested: Vec<Vec<SolveOutcome>> = sorted
        .par_iter()
        .map(|e| {
            solvers
                .iter()
                .map(|&s| solve_one(ctx, e, s).map_err(|err| err.context(format!("epoch {} solver {}", e.epoch_id, s))))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(nested.into_iter().flatten().collect())
}

/// Filter state after each epoch; `None` where the filter has not started.
pub type Track = Vec<(u64, Option<TrackState>)>;

/// Kalman track over the EP fixes, one step per epoch in id order.
pub fn track_stage(cfg: &ExperimentConfig, outcomes: &[SolveOutcome]) -> Result<Option<Track>> {
    let Some(t) = &cfg.tracking else {
        return Ok(None);
    };
    if !cfg.solvers.contains(&SolverKind::Ep) {
        return Err(Error::Config {
            path: "tracking".into(),
            message: "tracking needs the ep solver".into(),
        });
    }
    let fixes: Vec<(u64, Option<PositionEstimate>)> = outcomes
        .iter()
        .filter(|o| o.solver == SolverKind::Ep)
        .map(|o| (o.epoch_id, o.ep.clone()))
        .collect();
    let estimates: Vec<Option<PositionEstimate>> = fixes.iter().map(|(_, f)| f.clone()).collect();
    let states = run_track(&estimates, t.dt, t.q, t.v_var, t.measurement_noise).map_err(|e| e.context("tracking"))?;
    Ok(Some(fixes.into_iter().map(|(id, _)| id).zip(states).collect()))
}

/// Error records for every outcome, with truth looked up from the scenario.
pub fn score(scenario: &Scenario, epochs_per_location: usize, outcomes: &[SolveOutcome]) -> Result<Vec<ErrorRecord>> {
    outcomes
        .iter()
        .map(|o| {
            let truth = truth_for(scenario, epochs_per_location, o.epoch_id)?;
            Ok(ErrorRecord {
                epoch_id: o.epoch_id,
                solver: o.solver.name().into(),
                error_meters: distance(&o.position, truth)?,
                heard: o.heard,
                iterations: o.iterations,
                converged: o.converged,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub scenario: Scenario,
    pub epochs: Vec<ToaEpoch>,
    pub calibration: Option<CalibrationTable>,
    pub outcomes: Vec<SolveOutcome>,
    pub track: Option<Track>,
    /// Per-solver records ordered by epoch id, then `ep_track` records if tracking ran.
    pub records: Vec<ErrorRecord>,
    pub report: Vec<ReportRow>,
}

/// Runs every stage in memory.
pub fn execute(cfg: &ExperimentConfig, base: Option<&Path>) -> Result<ExperimentOutput> {
    let prep = prepare(cfg, base)?;
    let epochs = simulate_stage(&prep, cfg)?;
    let calibration = calibrate_stage(&prep, cfg)?;
    let ctx = SolveContext {
        scenario: &prep.scenario,
        prior: &prep.prior,
        sigma_clk: cfg.sigma_clk,
        solve_box: &prep.solve_box,
        calibration: calibration.as_ref(),
        ep: &cfg.ep,
    };
    let outcomes = solve_stage(&ctx, &epochs, &cfg.solvers)?;
    let mut records = score(&prep.scenario, cfg.epochs_per_location, &outcomes)?;
    let track = track_stage(cfg, &outcomes)?;
    if let Some(states) = &track {
        let by_id: std::collections::BTreeMap<u64, usize> =
            epochs.iter().map(|e| (e.epoch_id, e.heard_count())).collect();
        for (id, s) in states {
            let Some(s) = s else { continue };
            let truth = truth_for(&prep.scenario, cfg.epochs_per_location, *id)?;
            records.push(ErrorRecord {
                epoch_id: *id,
                solver: TRACK_SOLVER.into(),
                error_meters: distance(&Point(s.position().to_vec()), truth)?,
                heard: by_id.get(id).copied().unwrap_or(0),
                iterations: 0,
                converged: true,
            });
        }
    }
    let report = compare_report(&records)?;
    Ok(ExperimentOutput {
        scenario: prep.scenario,
        epochs,
        calibration,
        outcomes,
        track,
        records,
        report,
    })
}

/// Writes every artifact of `out` into `dir`.
pub fn write_artifacts(out: &ExperimentOutput, epochs_per_location: usize, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::from(e).context(format!("creating {}", dir.display())))?;
    let dim = out.scenario.dimension;
    io::write_scenario(&dir.join(io::SCENARIO_FILE), &out.scenario)?;
    io::write_epochs(&dir.join(io::EPOCHS_FILE), &out.epochs)?;
    let rows = out
        .outcomes
        .iter()
        .map(|o| {
            Ok(EstimateRow {
                epoch_id: o.epoch_id,
                solver: o.solver.name().into(),
                position: o.position.clone(),
                tau: o.tau,
                truth: truth_for(&out.scenario, epochs_per_location, o.epoch_id)?.clone(),
                status: o.status.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    io::write_estimates(&dir.join(io::ESTIMATES_FILE), dim, &rows)?;
    io::write_records(&dir.join(io::RECORDS_FILE), &out.records)?;
    if let Some(cal) = &out.calibration {
        std::fs::write(dir.join(io::CALIBRATION_FILE), cal.to_json()? + "\n")?;
    }
    if let Some(track) = &out.track {
        let states: Vec<Option<TrackState>> = track.iter().map(|(_, s)| s.clone()).collect();
        io::write_track(&dir.join(io::TRACK_FILE), dim, &states)?;
    }
    write_summary(&out.records, &out.report, dir)
}

/// `report.csv` and `cdf.csv` for a set of records.
pub fn write_summary(records: &[ErrorRecord], report: &[ReportRow], dir: &Path) -> Result<()> {
    io::write_report(&dir.join(io::REPORT_FILE), report)?;
    let curves = report
        .iter()
        .map(|row| {
            let errs: Vec<f64> = records
                .iter()
                .filter(|r| r.solver == row.solver)
                .map(|r| r.error_meters)
                .collect();
            Ok((row.solver.clone(), empirical_cdf(&errs)?))
        })
        .collect::<Result<Vec<_>>>()?;
    io::write_cdf(&dir.join(io::CDF_FILE), &curves)
}

/// Runs every stage and writes the artifacts to `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, base: Option<&Path>) -> Result<Vec<ErrorRecord>> {
    let out = execute(cfg, base)?;
    write_artifacts(&out, cfg.epochs_per_location, &cfg.output_dir)?;
    Ok(out.records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::AccessPoint;
    use crate::harness::config::{ErrorModelConfig, NlosConfig, NoiseConfig};

    fn noiseless_cfg() -> ExperimentConfig {
        let aps = vec![
            AccessPoint::new(1, [0.0, 0.0]),
            AccessPoint::new(2, [100.0, 0.0]),
            AccessPoint::new(3, [0.0, 100.0]),
            AccessPoint::new(4, [100.0, 100.0]),
            AccessPoint::new(5, [50.0, 120.0]),
        ];
        let pos = vec![Point::from([30.0, 40.0]), Point::from([70.0, 55.0])];
        let mut cfg = ExperimentConfig::with_scenario(Scenario::new(2, aps, pos));
        // a sharp, almost LOS-only inference model for an error-free world
        cfg.sigma_clk = 0.01;
        cfg.prior = crate::harness::config::PriorConfig { k: 1, l: 2 };
        cfg.error_model = ErrorModelConfig {
            noise: NoiseConfig::Off,
            nlos: NlosConfig::None,
            ..Default::default()
        };
        cfg.epochs_per_location = 3;
        cfg
    }

    #[test]
    fn noiseless_all_solvers_exact() {
        let out = execute(&noiseless_cfg(), None).unwrap();
        assert_eq!(out.records.len(), 2 * 3 * 3);
        for r in &out.records {
            assert!(r.error_meters < 1e-3, "{r:?}");
        }
    }

    #[test]
    fn paired_epochs_and_ordering() {
        let mut cfg = noiseless_cfg();
        cfg.sigma_clk = 2.0;
        cfg.error_model = ErrorModelConfig::default();
        let out = execute(&cfg, None).unwrap();
        let ids: Vec<(u64, &str)> = out.records.iter().map(|r| (r.epoch_id, r.solver.as_str())).collect();
        let mut sorted = ids.clone();
        sorted.sort_by_key(|(id, _)| *id);
        assert_eq!(ids, sorted);
        assert_eq!(&ids[..3], &[(0, "ep"), (0, "linear"), (0, "nonlinear")]);
    }

    #[test]
    fn truth_mapping() {
        let cfg = noiseless_cfg();
        let prep = prepare(&cfg, None).unwrap();
        assert_eq!(truth_for(&prep.scenario, 3, 4).unwrap().0, vec![70.0, 55.0]);
        assert!(truth_for(&prep.scenario, 3, 6).is_err());
    }

    #[test]
    fn insufficient_aps_is_no_fix() {
        let cfg = noiseless_cfg();
        let prep = prepare(&cfg, None).unwrap();
        let epoch = ToaEpoch::new(
            0,
            1,
            vec![
                crate::geometry::Observation { ap_id: 1, toa: 0.0 },
                crate::geometry::Observation { ap_id: 2, toa: 10.0 },
            ],
        );
        let ctx = SolveContext {
            scenario: &prep.scenario,
            prior: &prep.prior,
            sigma_clk: 1.0,
            solve_box: &prep.solve_box,
            calibration: None,
            ep: &cfg.ep,
        };
        let o = solve_one(&ctx, &epoch, SolverKind::Linear).unwrap();
        assert!(!o.converged);
        assert_eq!(o.status, "no_fix");
        assert_eq!(o.position, prep.solve_box.center());
    }
}
