//! Generative simulator for relative ToA epochs.
//!
//! Each heard AP `j` produces an absolute arrival
//! `raw_j = ‖x − (x̄_j + δx̄_j)‖ + γ_j + δT_j + ε_j`, optionally quantized, and
//! the reported measurement is `raw_j − raw_ref`, so the reference AP reads 0.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{dist_slice, AccessPoint, Observation, Point, Scenario, ToaEpoch};
use crate::numeric::{derive_seed, mix64};
use crate::prior::NlosPrior;

/// LTE ToA quantization step (32.55 ns) in meters.
pub const LTE_QUANT_STEP: f64 = 9.77;

/// Which non-reference APs a device hears in one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Hearability {
    /// Each non-reference AP is heard independently with this probability.
    Probability(f64),
    /// Exactly this many APs (reference included), chosen uniformly at random.
    MaxCount(usize),
}

/// Clock, thermal, and synchronization noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseTerms {
    /// One Gaussian of std `sigma_clk` per measurement.
    Combined,
    /// Thermal noise per measurement plus a per-AP synchronization error
    /// redrawn every epoch.
    Separate {
        thermal_std: f64,
        sync_std: f64,
    },
    Off,
}

#[derive(Debug, Clone)]
pub struct ErrorModel {
    pub sigma_clk: f64,
    pub noise: NoiseTerms,
    pub quant_step: f64,
    pub quant_enabled: bool,
    /// Generative NLOS law; `None` disables NLOS bias.
    pub nlos: Option<NlosPrior>,
    /// Draw each AP's NLOS bias once per device location and reuse it.
    pub frozen_nlos: bool,
    /// Seed for frozen NLOS draws, independent of the per-epoch random stream.
    pub frozen_seed: u64,
    pub sigma_dt: f64,
    pub sigma_dx: f64,
    pub hearability: Hearability,
    /// Fixed extra bias per AP id, added on top of any NLOS draw.
    pub injected_bias: BTreeMap<u32, f64>,
}

impl ErrorModel {
    /// Combined clock noise of std `sigma_clk`, everything else off.
    pub fn new(sigma_clk: f64) -> Self {
        ErrorModel {
            sigma_clk,
            noise: NoiseTerms::Combined,
            quant_step: LTE_QUANT_STEP,
            quant_enabled: false,
            nlos: None,
            frozen_nlos: true,
            frozen_seed: 0,
            sigma_dt: 0.0,
            sigma_dx: 0.0,
            hearability: Hearability::Probability(1.0),
            injected_bias: BTreeMap::new(),
        }
    }

    /// Every error term disabled.
    pub fn noiseless() -> Self {
        ErrorModel {
            noise: NoiseTerms::Off,
            ..ErrorModel::new(1.0)
        }
    }

    pub fn with_nlos(mut self, prior: NlosPrior, frozen: bool) -> Self {
        self.nlos = Some(prior);
        self.frozen_nlos = frozen;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |name, reason: String| Err(Error::InvalidParameter { name, reason });
        if !(self.sigma_clk > 0.0) {
            return bad("sigma_clk", format!("must be > 0, got {}", self.sigma_clk));
        }
        if !(self.quant_step >= 0.0) {
            return bad("quant_step", format!("must be ≥ 0, got {}", self.quant_step));
        }
        if !(self.sigma_dt >= 0.0) || !(self.sigma_dx >= 0.0) {
            return bad("sigma_dt", "position and delay stds must be ≥ 0".into());
        }
        if let NoiseTerms::Separate { thermal_std, sync_std } = self.noise {
            if !(thermal_std >= 0.0) || !(sync_std >= 0.0) {
                return bad("noise", "thermal and sync stds must be ≥ 0".into());
            }
        }
        match self.hearability {
            Hearability::Probability(p) if !(p > 0.0 && p <= 1.0) => {
                bad("hearability", format!("probability must be in (0, 1], got {p}"))
            }
            Hearability::MaxCount(n) if n < 2 => bad("hearability", format!("max count must be ≥ 2, got {n}")),
            _ => Ok(()),
        }
    }
}

/// Rounds to the nearest multiple of `step` (ties to even); identity for `step = 0`.
pub fn quantize(toa: f64, step: f64) -> f64 {
    if step == 0.0 {
        return toa;
    }
    (toa / step).round_ties_even() * step
}

/// Draws calibration delays and antenna position errors into the APs'
/// ground-truth fields. The first AP is the reference and gets no delay.
pub fn realize_ap_errors<R: Rng + ?Sized>(
    aps: &mut [AccessPoint],
    model: &ErrorModel,
    rng: &mut R,
) -> Vec<(f64, Point)> {
    let dt = normal(model.sigma_dt);
    let dx = normal(model.sigma_dx);
    aps.iter_mut()
        .enumerate()
        .map(|(i, ap)| {
            let delay = dt.sample(rng);
            let offset = Point((0..ap.position.dim()).map(|_| dx.sample(rng)).collect());
            ap.true_cal_delay = if i == 0 { 0.0 } else { delay };
            ap.true_position_offset = Some(offset.clone());
            (ap.true_cal_delay, offset)
        })
        .collect()
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("std validated nonnegative")
}

/// Simulates the epoch for `scenario.device_positions[epoch_index]`.
pub fn simulate_epoch<R: Rng + ?Sized>(
    scenario: &Scenario,
    epoch_index: usize,
    model: &ErrorModel,
    rng: &mut R,
) -> Result<ToaEpoch> {
    let position = scenario
        .device_positions
        .get(epoch_index)
        .ok_or(Error::DeviceIndexOutOfRange {
            index: epoch_index,
            count: scenario.device_positions.len(),
        })?;
    simulate_at(&scenario.aps, position, epoch_index as u64, model, rng)
}

/// Simulates one epoch for a device at `position`; `aps[0]` is the reference.
pub fn simulate_at<R: Rng + ?Sized>(
    aps: &[AccessPoint],
    position: &Point,
    epoch_id: u64,
    model: &ErrorModel,
    rng: &mut R,
) -> Result<ToaEpoch> {
    model.validate()?;
    if aps.len() < 2 {
        return Err(Error::InsufficientAps {
            needed: 2,
            have: aps.len(),
        });
    }
    let heard = draw_hearability(aps.len(), model.hearability, rng);

    let clock = normal(model.sigma_clk);
    let (thermal, sync) = match model.noise {
        NoiseTerms::Separate { thermal_std, sync_std } => (normal(thermal_std), normal(sync_std)),
        _ => (normal(0.0), normal(0.0)),
    };

    // Draws happen for every AP, heard or not, so the stream layout does not
    // depend on the hearability mask.
    let mut raw = Vec::with_capacity(aps.len());
    for ap in aps {
        let true_pos = ap.true_position();
        if true_pos.dim() != position.dim() {
            return Err(Error::DimensionMismatch {
                expected: true_pos.dim(),
                got: position.dim(),
            });
        }
        let range = dist_slice(&position.0, &true_pos.0);
        let gamma = match &model.nlos {
            Some(prior) if model.frozen_nlos => frozen_bias(prior, model.frozen_seed, ap.id, position),
            Some(prior) => prior.sample_bias(rng),
            None => 0.0,
        };
        let eps = match model.noise {
            NoiseTerms::Combined => clock.sample(rng),
            NoiseTerms::Separate { .. } => thermal.sample(rng) + sync.sample(rng),
            NoiseTerms::Off => 0.0,
        };
        let injected = model.injected_bias.get(&ap.id).copied().unwrap_or(0.0);
        let mut t = range + gamma + injected + ap.true_cal_delay + eps;
        if model.quant_enabled {
            t = quantize(t, model.quant_step);
        }
        raw.push(t);
    }

    let reference = raw[0];
    let observations = aps
        .iter()
        .zip(&raw)
        .zip(&heard)
        .filter(|(_, &h)| h)
        .map(|((ap, &t), _)| Observation {
            ap_id: ap.id,
            toa: if ap.id == aps[0].id { 0.0 } else { t - reference },
        })
        .collect();
    Ok(ToaEpoch::new(epoch_id, aps[0].id, observations))
}

/// Simulates one epoch per device position, each from its own seed derived
/// from `seed`, so results do not depend on thread scheduling.
pub fn simulate_epochs(scenario: &Scenario, model: &ErrorModel, seed: u64) -> Result<Vec<ToaEpoch>> {
    (0..scenario.device_positions.len())
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5eed_e90c, i as u64));
            simulate_epoch(scenario, i, model, &mut rng)
        })
        .collect()
}

/// Heard mask over all APs; index 0 (reference) is always heard and at least
/// one other AP is heard.
fn draw_hearability<R: Rng + ?Sized>(n: usize, h: Hearability, rng: &mut R) -> Vec<bool> {
    let mut mask = vec![false; n];
    mask[0] = true;
    match h {
        Hearability::Probability(p) => loop {
            let mut any = false;
            for m in mask.iter_mut().skip(1) {
                *m = rng.random::<f64>() < p;
                any |= *m;
            }
            if any {
                break;
            }
        },
        Hearability::MaxCount(count) => {
            let others = count.clamp(2, n) - 1;
            for i in sample(rng, n - 1, others) {
                mask[i + 1] = true;
            }
        }
    }
    mask
}

/// NLOS bias that stays fixed for a given AP and device location.
fn frozen_bias(prior: &NlosPrior, seed: u64, ap_id: u32, position: &Point) -> f64 {
    let mut h = mix64(seed ^ 0xf10e_2e4b_1a50_0000) ^ mix64(ap_id as u64 + 1);
    for c in &position.0 {
        h = mix64(h ^ c.to_bits());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    prior.sample_bias(&mut rng)
}
