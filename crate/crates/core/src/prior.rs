//! Discrete prior over the non-line-of-sight bias.
//!
//! The bias takes values `ℓ·σ_clk/10` for `ℓ = 0, 1, …`. Half of the mass sits
//! uniformly on the first `K` grid points (unresolvable multipath on top of a
//! present LOS path); the other half decays linearly over the next `L` points
//! (LOS path absent).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of bias grid steps per `σ_clk`.
pub const GRID_DIVISOR: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct NlosPrior {
    sigma_clk: f64,
    shape: PriorShape,
    masses: Vec<f64>,
    log_masses: Vec<f64>,
    cdf: Vec<f64>,
}

/// How a prior was built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PriorShape {
    Piecewise { k: usize, l: usize },
    Custom,
}

impl NlosPrior {
    /// Builds the piecewise prior with `K` LOS-cluster points and `L` NLOS points.
    pub fn new(sigma_clk: f64, k: usize, l: usize) -> Result<Self> {
        if !(sigma_clk > 0.0) || !sigma_clk.is_finite() {
            return Err(Error::InvalidParameter {
                name: "sigma_clk",
                reason: format!("must be positive and finite, got {sigma_clk}"),
            });
        }
        if k < 1 {
            return Err(Error::InvalidParameter {
                name: "k",
                reason: "must be ≥ 1".into(),
            });
        }
        if l < 2 {
            return Err(Error::InvalidParameter {
                name: "l",
                reason: format!("must be ≥ 2, got {l}"),
            });
        }
        let los = 1.0 / (2.0 * k as f64);
        let denom = (l as f64) * (l as f64 - 1.0);
        let masses = (0..l + k)
            .map(|ell| if ell < k { los } else { (l + k - 1 - ell) as f64 / denom })
            .collect();
        Ok(Self::assemble(sigma_clk, PriorShape::Piecewise { k, l }, masses))
    }

    /// Prior with all mass at zero bias (pure LOS model).
    pub fn los_only(sigma_clk: f64) -> Result<Self> {
        Self::from_masses(sigma_clk, vec![1.0])
    }

    /// Arbitrary mass function over the bias grid. Masses must be nonnegative and
    /// sum to one within 1e-9; they are renormalized exactly.
    pub fn from_masses(sigma_clk: f64, masses: Vec<f64>) -> Result<Self> {
        if !(sigma_clk > 0.0) || !sigma_clk.is_finite() {
            return Err(Error::InvalidParameter {
                name: "sigma_clk",
                reason: format!("must be positive and finite, got {sigma_clk}"),
            });
        }
        if masses.is_empty() || masses.iter().any(|m| !(*m >= 0.0) || !m.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "masses",
                reason: "must be a nonempty list of nonnegative finite values".into(),
            });
        }
        let total: f64 = masses.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter {
                name: "masses",
                reason: format!("sum to {total}, expected 1"),
            });
        }
        let masses = masses.into_iter().map(|m| m / total).collect();
        Ok(Self::assemble(sigma_clk, PriorShape::Custom, masses))
    }

    fn assemble(sigma_clk: f64, shape: PriorShape, masses: Vec<f64>) -> Self {
        let log_masses = masses.iter().map(|m| m.ln()).collect();
        let mut acc = 0.0;
        let cdf = masses
            .iter()
            .map(|m| {
                acc += m;
                acc
            })
            .collect();
        NlosPrior {
            sigma_clk,
            shape,
            masses,
            log_masses,
            cdf,
        }
    }

    pub fn sigma_clk(&self) -> f64 {
        self.sigma_clk
    }

    pub fn shape(&self) -> PriorShape {
        self.shape
    }

    /// Mass function `π_ℓ`; entries past the end are zero.
    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub(crate) fn log_masses(&self) -> &[f64] {
        &self.log_masses
    }

    pub fn mass(&self, ell: usize) -> f64 {
        self.masses.get(ell).copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }

    /// Spacing of the bias grid, `σ_clk/10`.
    pub fn step(&self) -> f64 {
        self.sigma_clk / GRID_DIVISOR
    }

    pub fn bias(&self, ell: usize) -> f64 {
        ell as f64 * self.step()
    }

    /// Largest bias value on the support grid.
    pub fn max_bias(&self) -> f64 {
        self.bias(self.masses.len().saturating_sub(1))
    }

    /// Draws a bias value `ℓ·σ_clk/10` with probability `π_ℓ`.
    pub fn sample_bias<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.bias(self.sample_index(rng))
    }

    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random::<f64>() * self.cdf[self.cdf.len() - 1];
        let idx = self.cdf.partition_point(|&c| c <= u);
        // Rounding in the cumulative sum can push u past the last entry.
        let mut idx = idx.min(self.masses.len() - 1);
        while self.masses[idx] == 0.0 && idx > 0 {
            idx -= 1;
        }
        idx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn small_prior_matches_formula() {
        let p = NlosPrior::new(1.0, 2, 3).unwrap();
        let want = [0.25, 0.25, 1.0 / 3.0, 1.0 / 6.0, 0.0];
        assert_eq!(p.len(), want.len());
        for (a, b) in p.masses().iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
        assert!((p.masses().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn go_kart_prior_first_half() {
        let p = NlosPrior::new(1.0, 40, 1500).unwrap();
        let first: f64 = p.masses()[..40].iter().sum();
        assert!((first - 0.5).abs() < 1e-12);
    }

    #[test]
    fn lte_prior_reaches_two_km() {
        let p = NlosPrior::new(10.0, 30, 2000).unwrap();
        assert!((p.max_bias() - 2029.0).abs() < 1e-9);
        // last grid point carries zero mass, the one before is the last positive
        assert_eq!(p.mass(2029), 0.0);
        assert!(p.mass(2028) > 0.0);
    }

    #[test]
    fn boundary_discontinuity_is_kept() {
        let p = NlosPrior::new(1.0, 4, 10).unwrap();
        assert!((p.mass(3) - 1.0 / 8.0).abs() < 1e-15);
        assert!((p.mass(4) - 1.0 / 10.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(NlosPrior::new(1.0, 2, 1).is_err());
        assert!(NlosPrior::new(1.0, 0, 10).is_err());
        assert!(NlosPrior::new(0.0, 2, 10).is_err());
        assert!(NlosPrior::from_masses(1.0, vec![0.5, 0.2]).is_err());
        assert!(NlosPrior::from_masses(1.0, vec![1.5, -0.5]).is_err());
    }

    #[test]
    fn degenerate_prior_samples_zero() {
        let p = NlosPrior::from_masses(3.0, vec![1.0, 0.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..1000).all(|_| p.sample_bias(&mut rng) == 0.0));
    }

    #[test]
    fn half_of_draws_fall_below_k() {
        let p = NlosPrior::new(1.0, 2, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 1_000_000;
        let threshold = 2.0 * p.step();
        let mut below = 0usize;
        for _ in 0..n {
            let b = p.sample_bias(&mut rng);
            assert!(b >= 0.0);
            if b < threshold - 1e-12 {
                below += 1;
            }
        }
        let frac = below as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.002, "{frac}");
    }

    #[test]
    fn histogram_passes_chi_square() {
        let p = NlosPrior::new(1.0, 3, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 200_000;
        let mut counts = vec![0usize; p.len()];
        for _ in 0..n {
            counts[p.sample_index(&mut rng)] += 1;
        }
        let mut chi2 = 0.0;
        let mut dof = 0;
        for (c, m) in counts.iter().zip(p.masses()) {
            if *m > 0.0 {
                let e = m * n as f64;
                chi2 += (*c as f64 - e).powi(2) / e;
                dof += 1;
            } else {
                assert_eq!(*c, 0);
            }
        }
        // 7 degrees of freedom, 99.9% quantile is 24.32
        assert_eq!(dof - 1, 7);
        assert!(chi2 < 24.32, "chi2 = {chi2}");
    }

    #[test]
    fn split_and_monotone_for_grid_of_parameters() {
        for k in [1, 2, 5, 17, 40] {
            for l in [2, 3, 50, 1500] {
                let p = NlosPrior::new(2.0, k, l).unwrap();
                let m = p.masses();
                let first: f64 = m[..k].iter().sum();
                let rest: f64 = m[k..].iter().sum();
                assert!((first - 0.5).abs() < 1e-12);
                assert!((rest - 0.5).abs() < 1e-12);
                assert!(m[k..].windows(2).all(|w| w[1] <= w[0]));
                assert_eq!(m[l + k - 1], 0.0);
            }
        }
    }
}
