//! C interface to `glmix`.
//!
//! Every function returns a [`GlmixStatus`]; on failure the message is
//! available from [`glmix_last_error_message`] on the same thread. Objects
//! are opaque handles released with their `_free` function. Panics are
//! caught and reported as `GLMIX_STATUS_INTERNAL`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use glmix::em_test::EmTestConfig;
use glmix::family::{Dataset, Family};
use glmix::mixture::FitConfig;
use glmix::nnqp::solve_nnqp;
use glmix::null_dist::{chibar_pvalue, ChiBarWeights};
use glmix::procedure::{run_test, TestConfig, TestReport};
use glmix::{Error, ErrorKind};
use nalgebra::{DMatrix, DVector};

/// Result codes. Values 1 to 5 match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlmixStatus {
    Ok = 0,
    Io = 1,
    Usage = 2,
    Parse = 3,
    Fit = 4,
    Numerical = 5,
    NullPointer = 6,
    Internal = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlmixFamily {
    Normal = 0,
    Logit = 1,
}

/// Tuning for [`glmix_run_test`]. Obtain defaults from
/// [`glmix_test_config_default`]. A null `beta_grid` means the default grid.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct GlmixTestConfig {
    pub k: usize,
    pub c: f64,
    pub lambda: f64,
    pub beta_grid: *const f64,
    pub beta_grid_len: usize,
    pub mc_draws: usize,
    pub restarts: usize,
    pub seed: u64,
}

/// Opaque dataset handle.
pub struct GlmixDataset(Dataset);

/// Opaque test report handle.
pub struct GlmixReport(TestReport);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> GlmixStatus {
    match e.kind() {
        ErrorKind::Io => GlmixStatus::Io,
        ErrorKind::Usage => GlmixStatus::Usage,
        ErrorKind::Parse => GlmixStatus::Parse,
        ErrorKind::Fit => GlmixStatus::Fit,
        ErrorKind::Numerical => GlmixStatus::Numerical,
    }
}

enum Failure {
    Lib(Error),
    Null(&'static str),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> GlmixStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GlmixStatus::Ok,
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            GlmixStatus::NullPointer
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            GlmixStatus::Internal
        }
    }
}

fn non_null<T>(p: *const T, what: &'static str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure::Null(what))
    } else {
        Ok(())
    }
}

/// Reads `len` values; a zero length accepts a null pointer.
unsafe fn slice<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn glmix_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn glmix_version() -> *const c_char {
    static VERSION: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => panic!("version string"),
    };
    VERSION.as_ptr()
}

/// Frees a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn glmix_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds a dataset from row-major `x` (`n * p`) and `z` (`n * q`).
/// `family` is a [`GlmixFamily`] value; `sigma` is used by the normal
/// family only.
///
/// # Safety
/// Buffers must hold the stated number of values; `out` must be writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn glmix_dataset_new(
    family: i32,
    sigma: f64,
    y: *const f64,
    n: usize,
    x: *const f64,
    p: usize,
    z: *const f64,
    q: usize,
    out: *mut *mut GlmixDataset,
) -> GlmixStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let family = match family {
            f if f == GlmixFamily::Normal as i32 => Family::normal(sigma)?,
            f if f == GlmixFamily::Logit as i32 => Family::Logit,
            other => return Err(Error::InvalidInput(format!("unknown family code {other}")).into()),
        };
        let y = slice(y, n, "y")?;
        let x = slice(x, n.checked_mul(p).ok_or(Error::TooLarge("n * p".into()))?, "x")?;
        let z = slice(z, n.checked_mul(q).ok_or(Error::TooLarge("n * q".into()))?, "z")?;
        let data = Dataset::from_row_major(y.to_vec(), x, p, z, q, family)?;
        *out = Box::into_raw(Box::new(GlmixDataset(data)));
        Ok(())
    })
}

/// # Safety
/// `data` must come from [`glmix_dataset_new`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn glmix_dataset_free(data: *mut GlmixDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Default test settings.
#[no_mangle]
pub extern "C" fn glmix_test_config_default() -> GlmixTestConfig {
    let d = TestConfig::default();
    GlmixTestConfig {
        k: d.em.k,
        c: d.em.c,
        lambda: d.em.lambda,
        beta_grid: ptr::null(),
        beta_grid_len: 0,
        mc_draws: d.mc_draws,
        restarts: d.fit.restarts,
        seed: d.seed,
    }
}

unsafe fn to_config(c: &GlmixTestConfig) -> Result<TestConfig, Failure> {
    let defaults = TestConfig::default();
    let beta_grid = if c.beta_grid.is_null() {
        defaults.em.beta_grid.clone()
    } else {
        slice(c.beta_grid, c.beta_grid_len, "beta_grid")?.to_vec()
    };
    Ok(TestConfig {
        fit: FitConfig {
            restarts: c.restarts,
            ..defaults.fit
        },
        em: EmTestConfig {
            k: c.k,
            c: c.c,
            lambda: c.lambda,
            beta_grid,
            ..defaults.em
        },
        mc_draws: c.mc_draws,
        seed: c.seed,
    })
}

/// Tests `m0` subgroups against `2 * m0`. A null `config` uses defaults.
///
/// # Safety
/// `data` must be a live dataset handle, `config` null or valid, `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn glmix_run_test(
    data: *const GlmixDataset,
    m0: usize,
    config: *const GlmixTestConfig,
    out: *mut *mut GlmixReport,
) -> GlmixStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        non_null(data, "data")?;
        let config = match config.as_ref() {
            Some(c) => to_config(c)?,
            None => TestConfig::default(),
        };
        let report = run_test(&(*data).0, m0, &config)?;
        *out = Box::into_raw(Box::new(GlmixReport(report)));
        Ok(())
    })
}

/// # Safety
/// `report` must come from [`glmix_run_test`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn glmix_report_free(report: *mut GlmixReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// # Safety
/// `report` must be live and `statistic` writable.
#[no_mangle]
pub unsafe extern "C" fn glmix_report_statistic(report: *const GlmixReport, statistic: *mut f64) -> GlmixStatus {
    guard(|| {
        non_null(report, "report")?;
        non_null(statistic, "statistic")?;
        *statistic = (*report).0.statistic;
        Ok(())
    })
}

/// # Safety
/// `report` must be live and `pvalue` writable.
#[no_mangle]
pub unsafe extern "C" fn glmix_report_pvalue(report: *const GlmixReport, pvalue: *mut f64) -> GlmixStatus {
    guard(|| {
        non_null(report, "report")?;
        non_null(pvalue, "pvalue")?;
        *pvalue = (*report).0.pvalue;
        Ok(())
    })
}

/// Copies the chi-bar weights into `buf`. `len` receives the number of
/// weights; pass a null `buf` to query it.
///
/// # Safety
/// `report` must be live, `len` writable, and `buf` null or holding
/// `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn glmix_report_weights(
    report: *const GlmixReport,
    buf: *mut f64,
    capacity: usize,
    len: *mut usize,
) -> GlmixStatus {
    guard(|| {
        non_null(report, "report")?;
        non_null(len, "len")?;
        let a = &(*report).0.weights.a;
        *len = a.len();
        if buf.is_null() {
            return Ok(());
        }
        if capacity < a.len() {
            return Err(Error::InvalidInput(format!("buffer holds {capacity} values, need {}", a.len())).into());
        }
        ptr::copy_nonoverlapping(a.as_ptr(), buf, a.len());
        Ok(())
    })
}

/// Full report as JSON. Free the result with [`glmix_string_free`].
///
/// # Safety
/// `report` must be live and `json` writable.
#[no_mangle]
pub unsafe extern "C" fn glmix_report_to_json(report: *const GlmixReport, json: *mut *mut c_char) -> GlmixStatus {
    guard(|| {
        non_null(json, "json")?;
        *json = ptr::null_mut();
        non_null(report, "report")?;
        let text = serde_json::to_string(&(*report).0).map_err(Error::from)?;
        *json = CString::new(text).expect("JSON has no interior NUL").into_raw();
        Ok(())
    })
}

/// Maximizes `2 v.w - v' Q v` over `v >= 0` for a `d x d` row-major
/// positive definite `q`. Writes the maximizer `v` (length `d`) and, if
/// `objective` is not null, the maximum.
///
/// # Safety
/// `q` holds `d * d` values, `w` and `v` hold `d`.
#[no_mangle]
pub unsafe extern "C" fn glmix_nnqp_solve(
    q: *const f64,
    d: usize,
    w: *const f64,
    v: *mut f64,
    objective: *mut f64,
) -> GlmixStatus {
    guard(|| {
        non_null(v, "v")?;
        let q = slice(q, d.checked_mul(d).ok_or(Error::TooLarge("d * d".into()))?, "q")?;
        let w = slice(w, d, "w")?;
        let sol = solve_nnqp(&DVector::from_column_slice(w), &DMatrix::from_row_slice(d, d, q))?;
        ptr::copy_nonoverlapping(sol.v.as_ptr(), v, d);
        if !objective.is_null() {
            *objective = sol.objective;
        }
        Ok(())
    })
}

/// Upper tail at `t` of the chi-bar-square mixture with weights
/// `weights[0..len]` (weight `s` on `chi2_s`).
///
/// # Safety
/// `weights` holds `len` values and `pvalue` is writable.
#[no_mangle]
pub unsafe extern "C" fn glmix_chibar_pvalue(
    t: f64,
    weights: *const f64,
    len: usize,
    pvalue: *mut f64,
) -> GlmixStatus {
    guard(|| {
        non_null(pvalue, "pvalue")?;
        let a = slice(weights, len, "weights")?;
        if a.is_empty() || a.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidInput("weights must be nonempty, finite and nonnegative".into()).into());
        }
        if t.is_nan() {
            return Err(Error::InvalidInput("t is NaN".into()).into());
        }
        let w = ChiBarWeights {
            a: a.to_vec(),
            mc_draws: 0,
            seed: 0,
        };
        *pvalue = chibar_pvalue(t, &w);
        Ok(())
    })
}
