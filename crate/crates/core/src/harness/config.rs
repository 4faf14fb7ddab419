//! Experiment configuration: JSON schema, defaults, and validation.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::scenarios::Generator;
use crate::calibration::Estimator;
use crate::ep::EpConfig;
use crate::error::{Error, Result};
use crate::geometry::{validate_scenario, BoundingBox, Point, Scenario};
use crate::prior::NlosPrior;
use crate::sim::{ErrorModel, Hearability, NoiseTerms, LTE_QUANT_STEP};
use crate::tracking::MeasurementNoise;

/// Solver identifiers accepted by `solvers` and `--solver`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Ep,
    Linear,
    Nonlinear,
}

impl SolverKind {
    pub const ALL: [SolverKind; 3] = [SolverKind::Ep, SolverKind::Linear, SolverKind::Nonlinear];

    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Ep => "ep",
            SolverKind::Linear => "linear",
            SolverKind::Nonlinear => "nonlinear",
        }
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SolverKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| Error::Config {
                path: "solvers".into(),
                message: format!("unknown solver `{s}`; valid choices: ep, linear, nonlinear"),
            })
    }
}

/// Parses a comma-separated solver list such as `ep,linear`.
pub fn parse_solver_list(list: &str) -> Result<Vec<SolverKind>> {
    let mut out: Vec<SolverKind> = Vec::new();
    for s in list.split(',').filter(|s| !s.trim().is_empty()) {
        let k = s.parse()?;
        if !out.contains(&k) {
            out.push(k);
        }
    }
    if out.is_empty() {
        return Err(Error::Config {
            path: "solvers".into(),
            message: "at least one solver required; valid choices: ep, linear, nonlinear".into(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ScenarioSource {
    Inline(Scenario),
    /// Relative paths resolve against the config file's directory.
    Path(PathBuf),
    Generator(Generator),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub k: usize,
    pub l: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig { k: 10, l: 1000 }
    }
}

/// Generative NLOS law.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum NlosConfig {
    None,
    /// Same law as the inference prior.
    #[default]
    Inference,
    /// Piecewise prior with its own `(k, l)`, for mismatched-prior runs.
    Piecewise(PriorConfig),
    Masses(Vec<f64>),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseConfig {
    #[default]
    Combined,
    Separate {
        thermal_std: f64,
        sync_std: f64,
    },
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum HearabilityConfig {
    Probability(f64),
    MaxCount(usize),
}

impl Default for HearabilityConfig {
    fn default() -> Self {
        HearabilityConfig::Probability(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErrorModelConfig {
    /// Generative clock-noise std; defaults to the inference `sigma_clk`.
    pub sigma_clk: Option<f64>,
    pub noise: NoiseConfig,
    pub quantize: bool,
    pub quant_step: f64,
    pub nlos: NlosConfig,
    pub frozen_nlos: bool,
    pub sigma_dt: f64,
    pub sigma_dx: f64,
    pub hearability: HearabilityConfig,
    /// Extra bias in meters keyed by AP id.
    pub injected_bias: BTreeMap<u32, f64>,
}

impl Default for ErrorModelConfig {
    fn default() -> Self {
        ErrorModelConfig {
            sigma_clk: None,
            noise: NoiseConfig::Combined,
            quantize: false,
            quant_step: LTE_QUANT_STEP,
            nlos: NlosConfig::Inference,
            frozen_nlos: true,
            sigma_dt: 0.0,
            sigma_dx: 0.0,
            hearability: HearabilityConfig::default(),
            injected_bias: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub train_epochs: usize,
    /// Where the training device sits; defaults to the first device position.
    pub known_position: Option<Point>,
    pub min_obs: usize,
    pub estimator: Estimator,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            train_epochs: 100,
            known_position: None,
            min_obs: 10,
            estimator: Estimator::Mean,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingConfig {
    pub dt: f64,
    /// White-acceleration intensity in m²/s³.
    pub q: f64,
    pub v_var: f64,
    pub measurement_noise: MeasurementNoise,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        TrackingConfig {
            dt: crate::tracking::DEFAULT_DT,
            q: 1.0,
            v_var: 100.0,
            measurement_noise: MeasurementNoise::FromEstimate,
        }
    }
}

fn default_sigma() -> f64 {
    20.0
}
fn default_solvers() -> Vec<SolverKind> {
    SolverKind::ALL.to_vec()
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}
fn default_epl() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioSource,
    /// Inference clock-noise std in meters.
    #[serde(default = "default_sigma")]
    pub sigma_clk: f64,
    #[serde(default)]
    pub prior: PriorConfig,
    #[serde(default)]
    pub error_model: ErrorModelConfig,
    #[serde(default = "default_solvers")]
    pub solvers: Vec<SolverKind>,
    #[serde(default)]
    pub ep: EpConfig,
    #[serde(default)]
    pub calibration: Option<CalibrationConfig>,
    #[serde(default)]
    pub tracking: Option<TrackingConfig>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Epochs simulated per device position.
    #[serde(default = "default_epl")]
    pub epochs_per_location: usize,
    /// Search box for EP and the nonlinear fallback; defaults to the scenario box.
    #[serde(default)]
    pub solve_box: Option<BoundingBox>,
}

impl ExperimentConfig {
    /// A config with every default and the given scenario.
    pub fn with_scenario(scenario: Scenario) -> Self {
        Self::new(ScenarioSource::Inline(scenario))
    }

    /// A config with every default and the given scenario source.
    pub fn new(scenario: ScenarioSource) -> Self {
        ExperimentConfig {
            scenario,
            sigma_clk: default_sigma(),
            prior: PriorConfig::default(),
            error_model: ErrorModelConfig::default(),
            solvers: default_solvers(),
            ep: EpConfig::default(),
            calibration: None,
            tracking: None,
            seed: 0,
            output_dir: default_output(),
            epochs_per_location: 1,
            solve_box: None,
        }
    }

    pub fn inference_prior(&self) -> Result<NlosPrior> {
        NlosPrior::new(self.sigma_clk, self.prior.k, self.prior.l).map_err(|e| config_err("prior", e))
    }

    /// Generative model; the frozen-NLOS seed derives from the experiment seed.
    pub fn error_model(&self) -> Result<ErrorModel> {
        let em = &self.error_model;
        let sigma = em.sigma_clk.unwrap_or(self.sigma_clk);
        let nlos = match &em.nlos {
            NlosConfig::None => None,
            NlosConfig::Inference => Some(NlosPrior::new(sigma, self.prior.k, self.prior.l)),
            NlosConfig::Piecewise(p) => Some(NlosPrior::new(sigma, p.k, p.l)),
            NlosConfig::Masses(m) => Some(NlosPrior::from_masses(sigma, m.clone())),
        }
        .transpose()
        .map_err(|e| config_err("error_model.nlos", e))?;
        let model = ErrorModel {
            sigma_clk: sigma,
            noise: match em.noise {
                NoiseConfig::Combined => NoiseTerms::Combined,
                NoiseConfig::Separate { thermal_std, sync_std } => NoiseTerms::Separate { thermal_std, sync_std },
                NoiseConfig::Off => NoiseTerms::Off,
            },
            quant_step: em.quant_step,
            quant_enabled: em.quantize,
            nlos,
            frozen_nlos: em.frozen_nlos,
            frozen_seed: crate::numeric::derive_seed(self.seed, 0xf802, 0),
            sigma_dt: em.sigma_dt,
            sigma_dx: em.sigma_dx,
            hearability: match em.hearability {
                HearabilityConfig::Probability(p) => Hearability::Probability(p),
                HearabilityConfig::MaxCount(n) => Hearability::MaxCount(n),
            },
            injected_bias: em.injected_bias.clone(),
        };
        model.validate().map_err(|e| config_err("error_model", e))?;
        Ok(model)
    }

    /// Resolves the scenario source; `base` is the directory of the config file.
    pub fn resolve_scenario(&self, base: Option<&Path>) -> Result<Scenario> {
        match &self.scenario {
            ScenarioSource::Inline(s) => Ok(s.clone()),
            ScenarioSource::Generator(g) => Ok(g.generate(crate::numeric::derive_seed(self.seed, 0x5ce7, 0))),
            ScenarioSource::Path(p) => {
                let full = match base {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p.clone(),
                };
                let text = std::fs::read_to_string(&full).map_err(|e| Error::Config {
                    path: "scenario.path".into(),
                    message: format!("{}: {e}", full.display()),
                })?;
                parse_json(&text, &format!("{}", full.display()))
            }
        }
    }

    /// Range checks everything that does not need the scenario.
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_clk > 0.0) || !self.sigma_clk.is_finite() {
            return Err(Error::Config {
                path: "sigma_clk".into(),
                message: format!("must be positive and finite, got {}", self.sigma_clk),
            });
        }
        self.inference_prior()?;
        self.error_model()?;
        if self.solvers.is_empty() {
            return Err(Error::Config {
                path: "solvers".into(),
                message: "at least one solver required; valid choices: ep, linear, nonlinear".into(),
            });
        }
        self.ep.validate().map_err(|e| config_err("ep", e))?;
        if self.epochs_per_location == 0 {
            return Err(Error::Config {
                path: "epochs_per_location".into(),
                message: "must be ≥ 1".into(),
            });
        }
        if let Some(c) = &self.calibration {
            if c.train_epochs == 0 {
                return Err(Error::Config {
                    path: "calibration.train_epochs".into(),
                    message: "must be ≥ 1".into(),
                });
            }
        }
        if let Some(t) = &self.tracking {
            let bad = |path: &str, message: String| {
                Err(Error::Config {
                    path: path.into(),
                    message,
                })
            };
            if !(t.dt > 0.0) {
                return bad("tracking.dt", format!("must be > 0, got {}", t.dt));
            }
            if !(t.q >= 0.0) || !(t.v_var >= 0.0) {
                return bad("tracking.q", "q and v_var must be ≥ 0".into());
            }
            if let MeasurementNoise::Fixed(v) = t.measurement_noise {
                if !(v > 0.0) {
                    return bad(
                        "tracking.measurement_noise",
                        format!("fixed variance must be > 0, got {v}"),
                    );
                }
            }
        }
        Ok(())
    }

    /// Validates `scenario` against this config.
    pub fn validate_scenario(&self, scenario: &Scenario) -> Result<()> {
        if let Some(v) = validate_scenario(scenario).first() {
            return Err(Error::Config {
                path: "scenario".into(),
                message: v.to_string(),
            });
        }
        if scenario.device_positions.is_empty() && self.calibration.is_none() {
            return Err(Error::Config {
                path: "scenario.device_positions".into(),
                message: "no device positions to simulate".into(),
            });
        }
        for id in self.error_model.injected_bias.keys() {
            if scenario.ap(*id).is_none() {
                return Err(Error::Config {
                    path: format!("error_model.injected_bias.{id}"),
                    message: format!("no AP with id {id}"),
                });
            }
        }
        if let Some(b) = &self.solve_box {
            if b.dim() != scenario.dimension {
                return Err(Error::Config {
                    path: "solve_box".into(),
                    message: format!(
                        "dimension {} does not match scenario dimension {}",
                        b.dim(),
                        scenario.dimension
                    ),
                });
            }
        }
        if let Some(p) = self.calibration.as_ref().and_then(|c| c.known_position.as_ref()) {
            if p.dim() != scenario.dimension {
                return Err(Error::Config {
                    path: "calibration.known_position".into(),
                    message: format!(
                        "dimension {} does not match scenario dimension {}",
                        p.dim(),
                        scenario.dimension
                    ),
                });
            }
        }
        Ok(())
    }
}

fn config_err(path: &str, e: Error) -> Error {
    match e {
        Error::InvalidParameter { name, reason } => Error::Config {
            path: format!("{path}.{name}"),
            message: reason,
        },
        other => Error::Config {
            path: path.into(),
            message: other.to_string(),
        },
    }
}

/// Deserializes JSON, reporting failures with the field path and line.
pub fn parse_json<T: serde::de::DeserializeOwned>(text: &str, origin: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        Error::Config {
            path: if path == "." { origin.to_string() } else { path },
            message: format!("{inner} ({origin})"),
        }
    })
}

/// Reads, parses, and validates a config file, including its scenario.
pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let cfg: ExperimentConfig = parse_json(&text, &path.display().to_string())?;
    cfg.validate()?;
    let scenario = cfg.resolve_scenario(path.parent())?;
    cfg.validate_scenario(&scenario)?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        r#"{"scenario": {"generator": {"kind": "random", "n_aps": 5, "side": 100}}}"#
    }

    #[test]
    fn minimal_config_defaults() {
        let cfg: ExperimentConfig = parse_json(minimal(), "t").unwrap();
        assert_eq!(cfg.sigma_clk, 20.0);
        assert_eq!(cfg.prior, PriorConfig { k: 10, l: 1000 });
        assert_eq!(cfg.solvers, SolverKind::ALL.to_vec());
        assert_eq!(cfg.ep, EpConfig::default());
        assert!(cfg.calibration.is_none() && cfg.tracking.is_none());
        cfg.validate().unwrap();
    }

    #[test]
    fn k_zero_rejected() {
        let text = r#"{"scenario": {"generator": {"kind": "random", "n_aps": 5, "side": 100}},
                       "prior": {"k": 0, "l": 100}}"#;
        let cfg: ExperimentConfig = parse_json(text, "t").unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("prior"), "{err}");
    }

    #[test]
    fn unknown_solver_lists_choices() {
        let text = r#"{"scenario": {"generator": {"kind": "random", "n_aps": 5, "side": 100}},
                       "solvers": ["ep", "chan"]}"#;
        let err = parse_json::<ExperimentConfig>(text, "t").unwrap_err().to_string();
        assert!(err.contains("solvers"), "{err}");
        assert!(
            err.contains("ep") && err.contains("linear") && err.contains("nonlinear"),
            "{err}"
        );
        let err = parse_solver_list("ep,foo").unwrap_err().to_string();
        assert!(err.contains("valid choices: ep, linear, nonlinear"), "{err}");
    }

    #[test]
    fn error_names_field_path() {
        let text = r#"{"scenario": {"generator": {"kind": "random", "n_aps": 5, "side": 100}},
                       "ep": {"damping": "high"}}"#;
        let err = parse_json::<ExperimentConfig>(text, "t").unwrap_err();
        match err {
            Error::Config { path, .. } => assert_eq!(path, "ep.damping"),
            e => panic!("{e}"),
        }
        let text = r#"{"scenario": {"inline": {"dimension": 2, "aps": []}}, "sede": 3}"#;
        assert!(parse_json::<ExperimentConfig>(text, "t").is_err());
    }

    #[test]
    fn solver_list_parsing() {
        assert_eq!(
            parse_solver_list("ep, nonlinear,ep").unwrap(),
            vec![SolverKind::Ep, SolverKind::Nonlinear]
        );
        assert!(parse_solver_list(" , ").is_err());
    }

    #[test]
    fn scenario_validation_reports_violation() {
        let mut cfg: ExperimentConfig = parse_json(minimal(), "t").unwrap();
        let mut s = cfg.resolve_scenario(None).unwrap();
        s.aps.truncate(2);
        cfg.scenario = ScenarioSource::Inline(s.clone());
        let err = cfg.validate_scenario(&s).unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("insufficient"), "{err}");
    }
}
