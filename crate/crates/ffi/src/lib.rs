//! C ABI for the probtoa localization engine.
//!
//! Every entry point returns a [`ProbtoaStatus`]; on failure the message is
//! available from [`probtoa_last_error`] on the same thread. Handles are
//! opaque and owned by the caller, who releases them with the matching
//! `_free`. A solver may be shared across threads for solving, but the
//! `_set_` functions need exclusive access.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use probtoa::{
    run_ep, solve_linear, solve_nonlinear, AccessPoint, BaselineResult, BaselineStatus, BoundingBox, CalibrationTable,
    EpConfig, Error, NlosPrior, NonlinearInit, Observation, Point, SolverInputs, ToaEpoch, WeightMode,
};

/// Largest supported spatial dimension.
pub const PROBTOA_MAX_DIM: usize = 3;
/// `(PROBTOA_MAX_DIM + 1)²`, the covariance buffer length.
pub const PROBTOA_COV_LEN: usize = 16;

const _: () = assert!(PROBTOA_COV_LEN == (PROBTOA_MAX_DIM + 1) * (PROBTOA_MAX_DIM + 1));

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbtoaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InsufficientAps = 3,
    UnknownAp = 4,
    /// Numerical breakdown inside a solver.
    Numerical = 5,
    /// A Rust panic was caught at the boundary.
    Panic = 6,
}

/// Opaque NLOS bias prior.
pub struct ProbtoaPrior(NlosPrior);

/// Opaque solver: AP layout, prior, noise scale, box, calibration, EP settings.
pub struct ProbtoaSolver {
    aps: Vec<AccessPoint>,
    prior: NlosPrior,
    sigma_clk: f64,
    bbox: BoundingBox,
    calibration: Option<CalibrationTable>,
    ep: EpConfig,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbtoaEpConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub damping: f64,
    /// Nonzero for simultaneous site updates.
    pub parallel: i32,
    /// Nonzero to drop the per-component evidence from the mixture weights.
    pub paper_weights: i32,
    pub linearization_passes: usize,
}

/// Outcome of one solve. Unused trailing entries are zero.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbtoaEstimate {
    pub dim: usize,
    pub position: [f64; PROBTOA_MAX_DIM],
    /// Relative time offset τ (meters).
    pub tau: f64,
    /// Row-major `(dim + 1)²` covariance over `(x, τ)`; zero for baselines.
    pub covariance: [f64; PROBTOA_COV_LEN],
    pub iterations: usize,
    /// 1 when the solver met its stopping rule.
    pub converged: i32,
    /// Baselines only: residual norm of the fitted arrivals.
    pub residual_norm: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> ProbtoaStatus {
    match e {
        Error::InsufficientAps { .. } => ProbtoaStatus::InsufficientAps,
        Error::UnknownAp(_) => ProbtoaStatus::UnknownAp,
        Error::DegenerateState(_) | Error::CavityNotPositiveDefinite { .. } | Error::IncompatibleObservation { .. } => {
            ProbtoaStatus::Numerical
        }
        Error::Context { source, .. } => status_of(source),
        _ => ProbtoaStatus::InvalidArgument,
    }
}

struct Fail(ProbtoaStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(ProbtoaStatus::InvalidArgument, msg.into())
}

fn null(name: &str) -> Fail {
    Fail(ProbtoaStatus::NullPointer, format!("`{name}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ProbtoaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ProbtoaStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            ProbtoaStatus::Panic
        }
    }
}

/// # Safety
/// `p` must be null or valid for `n` reads.
unsafe fn view<'a, T>(p: *const T, n: usize, name: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(name))
}

unsafe fn handle_mut<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(name))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn probtoa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn probtoa_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

// ------------------------------------------------------------------ prior

/// Piecewise prior with grid step `sigma_clk / 10`: half the mass uniform on
/// the first `k` points, the rest decaying linearly over the next `l`.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn probtoa_prior_new(
    sigma_clk: f64,
    k: usize,
    l: usize,
    out: *mut *mut ProbtoaPrior,
) -> ProbtoaStatus {
    guard(|| put(out, ProbtoaPrior(NlosPrior::new(sigma_clk, k, l)?)))
}

/// Prior from explicit nonnegative masses (normalized internally).
///
/// # Safety
/// `masses` must be valid for `n` reads and `out` for writes.
#[no_mangle]
pub unsafe extern "C" fn probtoa_prior_from_masses(
    sigma_clk: f64,
    masses: *const f64,
    n: usize,
    out: *mut *mut ProbtoaPrior,
) -> ProbtoaStatus {
    guard(|| {
        let m = view(masses, n, "masses")?.to_vec();
        put(out, ProbtoaPrior(NlosPrior::from_masses(sigma_clk, m)?))
    })
}

/// # Safety
/// `prior` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn probtoa_prior_free(prior: *mut ProbtoaPrior) {
    if !prior.is_null() {
        drop(Box::from_raw(prior));
    }
}

/// Number of grid points, or 0 for a null handle.
///
/// # Safety
/// `prior` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn probtoa_prior_len(prior: *const ProbtoaPrior) -> usize {
    prior.as_ref().map_or(0, |p| p.0.len())
}

/// Mass and bias (meters) of grid point `ell`.
///
/// # Safety
/// `prior` must be a live handle; `mass` and `bias` null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn probtoa_prior_point(
    prior: *const ProbtoaPrior,
    ell: usize,
    mass: *mut f64,
    bias: *mut f64,
) -> ProbtoaStatus {
    guard(|| {
        let p = &handle(prior, "prior")?.0;
        if ell >= p.len() {
            return Err(invalid(format!("grid index {ell} out of range ({} points)", p.len())));
        }
        if !mass.is_null() {
            *mass = p.mass(ell);
        }
        if !bias.is_null() {
            *bias = p.bias(ell);
        }
        Ok(())
    })
}

// ------------------------------------------------------------------ solver

/// Default EP settings.
#[no_mangle]
pub extern "C" fn probtoa_ep_config_default() -> ProbtoaEpConfig {
    let d = EpConfig::default();
    ProbtoaEpConfig {
        max_iters: d.max_iters,
        tol: d.tol,
        damping: d.damping,
        parallel: d.parallel as i32,
        paper_weights: (d.weight_mode == WeightMode::Paper) as i32,
        linearization_passes: d.linearization_passes,
    }
}

/// Creates a solver over `n_aps` APs with row-major `positions`
/// (`n_aps × dim`). The prior is copied. The solve box defaults to the APs'
/// bounding box.
///
/// # Safety
/// `ap_ids` and `positions` must be valid for `n_aps` and `n_aps * dim`
/// reads; `prior` must be a live handle; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn probtoa_solver_new(
    dim: usize,
    ap_ids: *const u32,
    positions: *const f64,
    n_aps: usize,
    prior: *const ProbtoaPrior,
    sigma_clk: f64,
    out: *mut *mut ProbtoaSolver,
) -> ProbtoaStatus {
    guard(|| {
        if !(2..=PROBTOA_MAX_DIM).contains(&dim) {
            return Err(invalid(format!("dimension must be 2 or 3, got {dim}")));
        }
        if n_aps == 0 {
            return Err(invalid("no access points"));
        }
        if !(sigma_clk > 0.0 && sigma_clk.is_finite()) {
            return Err(invalid(format!(
                "sigma_clk must be positive and finite, got {sigma_clk}"
            )));
        }
        let ids = view(ap_ids, n_aps, "ap_ids")?;
        let pos = view(positions, n_aps * dim, "positions")?;
        let aps: Vec<AccessPoint> = ids
            .iter()
            .zip(pos.chunks_exact(dim))
            .map(|(&id, p)| AccessPoint::new(id, p.to_vec()))
            .collect();
        let prior = handle(prior, "prior")?.0.clone();
        let bbox =
            BoundingBox::enclosing(aps.iter().map(|a| &a.position)).ok_or_else(|| invalid("degenerate AP layout"))?;
        put(
            out,
            ProbtoaSolver {
                aps,
                prior,
                sigma_clk,
                bbox,
                calibration: None,
                ep: EpConfig::default(),
            },
        )
    })
}

/// # Safety
/// `solver` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn probtoa_solver_free(solver: *mut ProbtoaSolver) {
    if !solver.is_null() {
        drop(Box::from_raw(solver));
    }
}

/// Replaces the solve box (EP initialization).
///
/// # Safety
/// `min` and `max` must be valid for `dim` reads.
#[no_mangle]
pub unsafe extern "C" fn probtoa_solver_set_box(
    solver: *mut ProbtoaSolver,
    min: *const f64,
    max: *const f64,
) -> ProbtoaStatus {
    guard(|| {
        let s = handle_mut(solver, "solver")?;
        let d = s.bbox.dim();
        let b = BoundingBox::new(view(min, d, "min")?.to_vec(), view(max, d, "max")?.to_vec())?;
        s.bbox = b;
        Ok(())
    })
}

/// Sets per-AP calibration delays (meters); APs not listed get zero. `n = 0`
/// clears the table.
///
/// # Safety
/// `ap_ids` and `deltas` must be valid for `n` reads.
#[no_mangle]
pub unsafe extern "C" fn probtoa_solver_set_calibration(
    solver: *mut ProbtoaSolver,
    ap_ids: *const u32,
    deltas: *const f64,
    n: usize,
) -> ProbtoaStatus {
    guard(|| {
        let s = handle_mut(solver, "solver")?;
        let ids = view(ap_ids, n, "ap_ids")?;
        let ds = view(deltas, n, "deltas")?;
        if let Some(bad) = ds.iter().find(|d| !d.is_finite()) {
            return Err(invalid(format!("non-finite calibration delay {bad}")));
        }
        s.calibration = (n > 0).then(|| CalibrationTable::from_deltas(ids.iter().copied().zip(ds.iter().copied())));
        Ok(())
    })
}

/// # Safety
/// `config` must be valid for reads.
#[no_mangle]
pub unsafe extern "C" fn probtoa_solver_set_ep_config(
    solver: *mut ProbtoaSolver,
    config: *const ProbtoaEpConfig,
) -> ProbtoaStatus {
    guard(|| {
        let s = handle_mut(solver, "solver")?;
        let c = handle(config, "config")?;
        let ep = EpConfig {
            max_iters: c.max_iters,
            tol: c.tol,
            damping: c.damping,
            parallel: c.parallel != 0,
            weight_mode: if c.paper_weights != 0 {
                WeightMode::Paper
            } else {
                WeightMode::Corrected
            },
            linearization_passes: c.linearization_passes,
            ..EpConfig::default()
        };
        ep.validate()?;
        s.ep = ep;
        Ok(())
    })
}

unsafe fn epoch(reference_ap: u32, ap_ids: *const u32, toas: *const f64, n: usize) -> Result<ToaEpoch, Fail> {
    let ids = view(ap_ids, n, "ap_ids")?;
    let ts = view(toas, n, "toas")?;
    let e = ToaEpoch::new(
        0,
        reference_ap,
        ids.iter()
            .zip(ts)
            .map(|(&ap_id, &toa)| Observation { ap_id, toa })
            .collect(),
    );
    e.validate()?;
    Ok(e)
}

fn blank(dim: usize) -> ProbtoaEstimate {
    ProbtoaEstimate {
        dim,
        position: [0.0; PROBTOA_MAX_DIM],
        tau: 0.0,
        covariance: [0.0; PROBTOA_COV_LEN],
        iterations: 0,
        converged: 0,
        residual_norm: 0.0,
    }
}

fn write_position(est: &mut ProbtoaEstimate, p: &Point) {
    est.position[..p.dim()].copy_from_slice(p.coords());
}

/// Expectation-propagation solve of one epoch. `toas` are relative arrivals
/// in meters, with the reference AP's entry 0.
///
/// # Safety
/// `ap_ids` and `toas` must be valid for `n` reads; `out` for writes.
#[no_mangle]
pub unsafe extern "C" fn probtoa_solve_ep(
    solver: *const ProbtoaSolver,
    reference_ap: u32,
    ap_ids: *const u32,
    toas: *const f64,
    n: usize,
    out: *mut ProbtoaEstimate,
) -> ProbtoaStatus {
    guard(|| {
        let s = handle(solver, "solver")?;
        let out = handle_mut(out, "out")?;
        let e = epoch(reference_ap, ap_ids, toas, n)?;
        let inputs = SolverInputs::new(&e, &s.aps, &s.prior, s.calibration.as_ref(), s.sigma_clk)?;
        let r = run_ep(&inputs, &s.bbox, &s.ep)?;
        let d = s.bbox.dim();
        let mut est = blank(d);
        write_position(&mut est, &r.position());
        est.tau = r.tau();
        for i in 0..=d {
            for j in 0..=d {
                est.covariance[i * (d + 1) + j] = r.covariance[(i, j)];
            }
        }
        est.iterations = r.iterations;
        est.converged = r.converged as i32;
        *out = est;
        Ok(())
    })
}

fn baseline_estimate(dim: usize, r: BaselineResult) -> ProbtoaEstimate {
    let mut est = blank(dim);
    write_position(&mut est, &r.position);
    est.tau = r.tau;
    est.iterations = r.iterations;
    est.converged = (r.status == BaselineStatus::Ok) as i32;
    est.residual_norm = r.residual_norm;
    est
}

/// Linear squared-range TDoA solve.
///
/// # Safety
/// As for [`probtoa_solve_ep`].
#[no_mangle]
pub unsafe extern "C" fn probtoa_solve_linear(
    solver: *const ProbtoaSolver,
    reference_ap: u32,
    ap_ids: *const u32,
    toas: *const f64,
    n: usize,
    out: *mut ProbtoaEstimate,
) -> ProbtoaStatus {
    guard(|| {
        let s = handle(solver, "solver")?;
        let out = handle_mut(out, "out")?;
        let e = epoch(reference_ap, ap_ids, toas, n)?;
        *out = baseline_estimate(s.bbox.dim(), solve_linear(&e, &s.aps, s.calibration.as_ref())?);
        Ok(())
    })
}

/// Levenberg-Marquardt solve, started from the linear solution.
///
/// # Safety
/// As for [`probtoa_solve_ep`].
#[no_mangle]
pub unsafe extern "C" fn probtoa_solve_nonlinear(
    solver: *const ProbtoaSolver,
    reference_ap: u32,
    ap_ids: *const u32,
    toas: *const f64,
    n: usize,
    out: *mut ProbtoaEstimate,
) -> ProbtoaStatus {
    guard(|| {
        let s = handle(solver, "solver")?;
        let out = handle_mut(out, "out")?;
        let e = epoch(reference_ap, ap_ids, toas, n)?;
        let r = solve_nonlinear(&e, &s.aps, s.calibration.as_ref(), &NonlinearInit::Auto)?;
        *out = baseline_estimate(s.bbox.dim(), r);
        Ok(())
    })
}
