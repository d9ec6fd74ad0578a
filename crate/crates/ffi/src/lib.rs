//! C ABI over `homog-core`.
//!
//! Objects cross the boundary as opaque handles created by `*_new` and
//! released by the matching `*_free`. Every fallible call returns a
//! [`HomogStatus`]; the message of the most recent failure on the calling
//! thread is available through [`homog_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use homog_core::dynamics::{orbit_fold, MapKind, MapSpec, Observable};
use homog_core::harness::{run, ExperimentConfig};
use homog_core::rng::StreamKey;
use homog_core::stats::{direct_coeffs, CoefficientEstimate, IteratedStats};
use homog_core::tower::{centered_observable, tower_coefficients, DEFAULT_TAU_CAP};
use homog_core::Error;

/// Status codes. Positive values match the `homog` exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HomogStatus {
    Ok = 0,
    Io = 1,
    Config = 2,
    Convergence = 3,
    GateFailed = 4,
    NullPointer = 10,
    BufferTooSmall = 11,
    InvalidUtf8 = 12,
    Panic = 13,
}

/// An interval map.
pub struct HomogMap(MapSpec);

/// An observable on the map domain.
pub struct HomogObservable(Observable);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn from_error(e: Error) -> HomogStatus {
    let code = match e.exit_code() {
        1 => HomogStatus::Io,
        3 => HomogStatus::Convergence,
        _ => HomogStatus::Config,
    };
    set_error(e.to_string());
    code
}

fn guard(f: impl FnOnce() -> Result<(), HomogStatus>) -> HomogStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            HomogStatus::Ok
        }
        Ok(Err(status)) => status,
        Err(_) => {
            set_error("internal panic".into());
            HomogStatus::Panic
        }
    }
}

fn fail(status: HomogStatus, msg: &str) -> HomogStatus {
    set_error(msg.into());
    status
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, HomogStatus> {
    if p.is_null() {
        return Err(fail(HomogStatus::NullPointer, &format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(HomogStatus::InvalidUtf8, &format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, HomogStatus> {
    p.as_ref().ok_or_else(|| fail(HomogStatus::NullPointer, &format!("{what} is null")))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, need: usize, what: &str) -> Result<&'a mut [f64], HomogStatus> {
    if p.is_null() {
        return Err(fail(HomogStatus::NullPointer, &format!("{what} is null")));
    }
    if len < need {
        return Err(fail(HomogStatus::BufferTooSmall, &format!("{what} needs {need} entries, got {len}")));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

/// Copy the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn homog_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn homog_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Create a map from a preset name (`lsv`, `doubling`, `quadratic`). `gamma`
/// is read for `lsv` only; `p` ≤ 0 selects the default moment order.
///
/// # Safety
/// `kind` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn homog_map_new(kind: *const c_char, gamma: f64, p: f64, out: *mut *mut HomogMap) -> HomogStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(HomogStatus::NullPointer, "out is null"));
        }
        let kind = MapKind::parse(str_arg(kind, "kind")?).map_err(from_error)?;
        let gamma = (kind == MapKind::Lsv).then_some(gamma);
        let p = (p > 0.0).then_some(p);
        let spec = MapSpec::from_parts(kind, gamma, p, None).map_err(from_error)?;
        *out = Box::into_raw(Box::new(HomogMap(spec)));
        Ok(())
    })
}

/// # Safety
/// `map` must be null or a handle from [`homog_map_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn homog_map_free(map: *mut HomogMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// One application of the map.
///
/// # Safety
/// `map` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn homog_map_step(map: *const HomogMap, x: f64, out: *mut f64) -> HomogStatus {
    guard(|| {
        let map = ref_arg(map, "map")?;
        let y = homog_core::dynamics::apply_map(&map.0, x).map_err(from_error)?;
        *out_slice(out, 1, 1, "out")?.first_mut().unwrap() = y;
        Ok(())
    })
}

/// Observable preset (`linear`, `cos`, `sin`, `mixed3`, `zero`). With a
/// non-null `map` the observable is centered against its invariant measure.
///
/// # Safety
/// `name` must be a NUL-terminated string, `map` null or valid, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn homog_observable_new(
    name: *const c_char,
    map: *const HomogMap,
    out: *mut *mut HomogObservable,
) -> HomogStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(HomogStatus::NullPointer, "out is null"));
        }
        let name = str_arg(name, "name")?;
        let obs = match map.as_ref() {
            Some(m) => centered_observable(&m.0, name),
            None => Observable::preset(name),
        }
        .map_err(from_error)?;
        *out = Box::into_raw(Box::new(HomogObservable(obs)));
        Ok(())
    })
}

/// # Safety
/// `obs` must be null or a handle from [`homog_observable_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn homog_observable_free(obs: *mut HomogObservable) {
    if !obs.is_null() {
        drop(Box::from_raw(obs));
    }
}

/// Dimension of the observable, or 0 for a null handle.
///
/// # Safety
/// `obs` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn homog_observable_dim(obs: *const HomogObservable) -> usize {
    obs.as_ref().map_or(0, |o| o.0.dim())
}

/// `S_n` (length `d`) and `𝕊_n` (length `d²`, row-major) along the orbit of
/// `x0`, plus the relative residual of the pair identity.
///
/// # Safety
/// Handles must be valid; `s` and `ss` must hold `s_len` and `ss_len`
/// doubles; `residual` may be null.
#[no_mangle]
pub unsafe extern "C" fn homog_iterated_sums(
    map: *const HomogMap,
    obs: *const HomogObservable,
    x0: f64,
    n: usize,
    s: *mut f64,
    s_len: usize,
    ss: *mut f64,
    ss_len: usize,
    residual: *mut f64,
) -> HomogStatus {
    guard(|| {
        let map = ref_arg(map, "map")?;
        let obs = ref_arg(obs, "obs")?;
        let d = obs.0.dim();
        let s = out_slice(s, s_len, d, "s")?;
        let ss = out_slice(ss, ss_len, d * d, "ss")?;
        let mut buf = vec![0.0; d];
        let stats = orbit_fold(&map.0, x0, n, IteratedStats::new(d), |mut acc, x| {
            obs.0.eval(x, &mut buf);
            acc.push(&buf);
            acc
        })
        .map_err(from_error)?;
        s.copy_from_slice(&stats.s);
        ss.copy_from_slice(&stats.ss);
        if let Some(r) = residual.as_mut() {
            *r = stats.pair_residual();
        }
        Ok(())
    })
}

unsafe fn write_estimate(
    est: &CoefficientEstimate,
    sigma: *mut f64,
    e: *mut f64,
    sigma_stderr: *mut f64,
    e_stderr: *mut f64,
    len: usize,
) -> Result<(), HomogStatus> {
    let dd = est.dim * est.dim;
    out_slice(sigma, len, dd, "sigma")?.copy_from_slice(&est.sigma);
    out_slice(e, len, dd, "e")?.copy_from_slice(&est.e);
    if !sigma_stderr.is_null() {
        out_slice(sigma_stderr, len, dd, "sigma_stderr")?.copy_from_slice(&est.sigma_stderr);
    }
    if !e_stderr.is_null() {
        out_slice(e_stderr, len, dd, "e_stderr")?.copy_from_slice(&est.e_stderr);
    }
    Ok(())
}

/// `Σ` and `E` from the tower decomposition (`lsv` and `doubling` only).
/// Output arrays hold `len ≥ d²` doubles; the error-bar arrays may be null.
///
/// # Safety
/// Handles must be valid and non-null outputs must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn homog_tower_coefficients(
    map: *const HomogMap,
    obs: *const HomogObservable,
    bins: usize,
    sigma: *mut f64,
    e: *mut f64,
    sigma_stderr: *mut f64,
    e_stderr: *mut f64,
    len: usize,
) -> HomogStatus {
    guard(|| {
        let map = ref_arg(map, "map")?;
        let obs = ref_arg(obs, "obs")?;
        let tc = tower_coefficients(&map.0, &obs.0, bins, DEFAULT_TAU_CAP).map_err(from_error)?;
        write_estimate(&tc.estimate, sigma, e, sigma_stderr, e_stderr, len)
    })
}

/// `Σ` and `E` from `samples` independent sums of length `n`.
///
/// # Safety
/// As for [`homog_tower_coefficients`].
#[no_mangle]
pub unsafe extern "C" fn homog_direct_coefficients(
    map: *const HomogMap,
    obs: *const HomogObservable,
    n: usize,
    samples: usize,
    seed: u64,
    sigma: *mut f64,
    e: *mut f64,
    sigma_stderr: *mut f64,
    e_stderr: *mut f64,
    len: usize,
) -> HomogStatus {
    guard(|| {
        let map = ref_arg(map, "map")?;
        let obs = ref_arg(obs, "obs")?;
        let est = direct_coeffs(&map.0, &obs.0, n, samples, &StreamKey::new(seed)).map_err(from_error)?;
        write_estimate(&est, sigma, e, sigma_stderr, e_stderr, len)
    })
}

/// Run an experiment described by a JSON config, as the `homog` tool does.
/// Returns [`HomogStatus::GateFailed`] when outputs were written but a
/// statistical check failed.
///
/// # Safety
/// `config_json` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn homog_run_json(config_json: *const c_char) -> HomogStatus {
    let mut gate = true;
    let status = guard(|| {
        let cfg = ExperimentConfig::from_json(str_arg(config_json, "config_json")?).map_err(from_error)?;
        gate = run(&cfg).map_err(from_error)?.gate_passed;
        Ok(())
    });
    if status == HomogStatus::Ok && !gate {
        set_error("statistical gate failed".into());
        return HomogStatus::GateFailed;
    }
    status
}
