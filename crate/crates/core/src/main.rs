use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use probtoa::calibration::CalibrationTable;
use probtoa::harness::config::{ExperimentConfig, TrackingConfig};
use probtoa::harness::experiment::{self, SolveContext};
use probtoa::harness::{io, load_config, parse_solver_list, ErrorRecord, ReportRow};
use probtoa::{Error, Result};

/// Probabilistic ToA localization experiments.
#[derive(Parser)]
#[command(name = "probtoa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Shared {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate epochs; writes scenario.json and epochs.csv.
    Simulate(Shared),
    /// Estimate per-AP calibration delays; writes calibration.json.
    Calibrate(Shared),
    /// Solve epochs; writes estimates, records, report, and CDF.
    Solve {
        #[command(flatten)]
        shared: Shared,
        /// Comma-separated subset of ep, linear, nonlinear.
        #[arg(long)]
        solver: Option<String>,
        /// Solve these epochs instead of simulating.
        #[arg(long)]
        epochs: Option<PathBuf>,
        /// Use this calibration table instead of estimating one.
        #[arg(long)]
        calibration: Option<PathBuf>,
    },
    /// Run the full pipeline with Kalman tracking; writes every artifact.
    Track(Shared),
    /// Summarize a records.csv into report.csv and cdf.csv.
    Report {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}

fn load(shared: &Shared) -> Result<(ExperimentConfig, Option<PathBuf>)> {
    let mut cfg = load_config(&shared.config)?;
    if let Some(seed) = shared.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &shared.out {
        cfg.output_dir = out.clone();
    }
    Ok((cfg, shared.config.parent().map(Path::to_path_buf)))
}

fn create(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::from(e).context(format!("creating {}", dir.display())))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate(shared) => {
            let (cfg, base) = load(&shared)?;
            let prep = experiment::prepare(&cfg, base.as_deref())?;
            let epochs = experiment::simulate_stage(&prep, &cfg)?;
            create(&cfg.output_dir)?;
            io::write_scenario(&cfg.output_dir.join(io::SCENARIO_FILE), &prep.scenario)?;
            io::write_epochs(&cfg.output_dir.join(io::EPOCHS_FILE), &epochs)?;
            println!("{} epochs written to {}", epochs.len(), cfg.output_dir.display());
        }
        Command::Calibrate(shared) => {
            let (mut cfg, base) = load(&shared)?;
            cfg.calibration.get_or_insert_with(Default::default);
            let prep = experiment::prepare(&cfg, base.as_deref())?;
            let table = experiment::calibrate_stage(&prep, &cfg)?.expect("calibration block set");
            create(&cfg.output_dir)?;
            std::fs::write(cfg.output_dir.join(io::CALIBRATION_FILE), table.to_json()? + "\n")?;
            for e in table.entries() {
                println!(
                    "ap {:>4}  delta_t {:>10.3} m  ± {:.3}  (n = {})",
                    e.ap_id, e.delta_t_hat, e.std_err, e.n_obs
                );
            }
        }
        Command::Solve {
            shared,
            solver,
            epochs,
            calibration,
        } => {
            let (mut cfg, base) = load(&shared)?;
            if let Some(list) = solver {
                cfg.solvers = parse_solver_list(&list)?;
            }
            let prep = experiment::prepare(&cfg, base.as_deref())?;
            let epochs = match epochs {
                Some(p) => io::read_epochs(&p)?,
                None => experiment::simulate_stage(&prep, &cfg)?,
            };
            let cal = match calibration {
                Some(p) => Some(CalibrationTable::from_json(&std::fs::read_to_string(&p)?)?),
                None => experiment::calibrate_stage(&prep, &cfg)?,
            };
            let ctx = SolveContext {
                scenario: &prep.scenario,
                prior: &prep.prior,
                sigma_clk: cfg.sigma_clk,
                solve_box: &prep.solve_box,
                calibration: cal.as_ref(),
                ep: &cfg.ep,
            };
            let outcomes = experiment::solve_stage(&ctx, &epochs, &cfg.solvers)?;
            let records = experiment::score(&prep.scenario, cfg.epochs_per_location, &outcomes)?;
            let report = probtoa::harness::compare_report(&records)?;
            let out = experiment::ExperimentOutput {
                scenario: prep.scenario,
                epochs,
                calibration: cal,
                outcomes,
                track: None,
                records,
                report,
            };
            experiment::write_artifacts(&out, cfg.epochs_per_location, &cfg.output_dir)?;
            print_report(&out.report);
        }
        Command::Track(shared) => {
            let (mut cfg, base) = load(&shared)?;
            cfg.tracking.get_or_insert_with(TrackingConfig::default);
            let out = experiment::execute(&cfg, base.as_deref())?;
            experiment::write_artifacts(&out, cfg.epochs_per_location, &cfg.output_dir)?;
            print_report(&out.report);
        }
        Command::Report { records, out } => {
            let recs: Vec<ErrorRecord> = io::read_records(&records)?;
            let report = probtoa::harness::compare_report(&recs)?;
            let dir = out.unwrap_or_else(|| records.parent().map(Path::to_path_buf).unwrap_or_default());
            create(&dir)?;
            experiment::write_summary(&recs, &report, &dir)?;
            print_report(&report);
        }
    }
    Ok(())
}

fn print_report(rows: &[ReportRow]) {
    println!(
        "{:<10} {:>6} {:>10} {:>10} {:>10} {:>8} {:>8} {:>8}",
        "solver", "n", "p50 [m]", "p90 [m]", "mean [m]", "conv", "p50/ref", "p90/ref"
    );
    for r in rows {
        println!(
            "{:<10} {:>6} {:>10.3} {:>10.3} {:>10.3} {:>8.3} {:>8.3} {:>8.3}",
            r.solver, r.count, r.p50, r.p90, r.mean, r.convergence_rate, r.p50_ratio, r.p90_ratio
        );
    }
}
