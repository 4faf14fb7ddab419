//! Small numerical helpers shared by the solvers.

use nalgebra::{DMatrix, DVector};

/// `log(Σ exp(x_i))`, stable for large magnitudes. Returns `-inf` for an empty
/// slice or when every entry is `-inf`.
#[cfg(test)]
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Log density of `N(x; 0, var)`.
#[inline]
pub fn log_normal(x: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln() + x * x / var)
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

pub fn is_spd(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite()) && m.clone().cholesky().is_some()
}

/// Inverse of a symmetric positive definite matrix, symmetrized. `None` if the
/// Cholesky factorization fails.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if !m.iter().all(|v| v.is_finite()) {
        return None;
    }
    let chol = m.clone().cholesky()?;
    let mut inv = chol.inverse();
    symmetrize(&mut inv);
    Some(inv)
}

/// Mean and covariance from natural parameters `(eta, precision)`.
pub fn natural_to_moments(eta: &DVector<f64>, precision: &DMatrix<f64>) -> Option<(DVector<f64>, DMatrix<f64>)> {
    if !precision.iter().all(|v| v.is_finite()) || !eta.iter().all(|v| v.is_finite()) {
        return None;
    }
    let chol = precision.clone().cholesky()?;
    let mean = chol.solve(eta);
    let mut cov = chol.inverse();
    symmetrize(&mut cov);
    Some((mean, cov))
}

/// Splitmix64 finalizer, used to derive independent stream seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    mix64(mix64(seed ^ mix64(stream)) ^ index)
}
