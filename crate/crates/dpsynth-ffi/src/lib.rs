//! C ABI for the dpsynth library: opaque handles, status codes, and a
//! thread-local last-error string. The header is generated by cbindgen into
//! include/dpsynth.h at build time.

use libc::c_char;
use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::ptr;

use dpsynth::combine::{combine, VarianceRule};
use dpsynth::dp::{BudgetLedger, PrivacyBudget};
use dpsynth::estimators::Estimand;
use dpsynth::randkit::RngStream;
use dpsynth::synth::{generate_m_datasets, write_bundle, SynthMethod, SynthesisRequest};
use dpsynth::tabular::{load_csv, Dataset, Schema};

/// Status codes returned by every fallible function. Anything nonzero means
/// failure; `dps_last_error` returns a message for the calling thread.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DpsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    InvalidArgument = 5,
    OverBudget = 6,
    Internal = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &dpsynth::Error) -> DpsStatus {
    use dpsynth::Error as E;
    match err {
        E::Io { .. } | E::Csv(_) => DpsStatus::Io,
        E::Parse(_) | E::Config(_) | E::Json(_) | E::Schema(_) => DpsStatus::Parse,
        E::OverBudget { .. } => DpsStatus::OverBudget,
        E::InvalidArgument(_) | E::InfeasibleCorrelation { .. } => DpsStatus::InvalidArgument,
        E::NotPositiveDefinite { .. } => DpsStatus::Internal,
    }
}

fn fail(err: dpsynth::Error) -> DpsStatus {
    let code = status_of(&err);
    set_error(&err.to_string());
    code
}

unsafe fn cstr<'a>(ptr: *const c_char) -> Result<&'a str, DpsStatus> {
    if ptr.is_null() {
        set_error("null pointer argument");
        return Err(DpsStatus::NullPointer);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("argument is not valid UTF-8");
        DpsStatus::InvalidUtf8
    })
}

/// Opaque schema handle.
pub struct DpsSchema {
    inner: Schema,
}

/// Opaque dataset handle.
pub struct DpsDataset {
    inner: Dataset,
}

/// Combined inference result, mirror of the library's CombinedInference.
/// `df` < 0 encodes a normal reference distribution (infinite df).
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DpsCombined {
    pub q_bar: f64,
    pub u_bar: f64,
    pub b_m: f64,
    pub variance: f64,
    pub df: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn dps_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent failure on this thread. The pointer is valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dps_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Load a schema from a JSON file. Returns null on failure.
#[no_mangle]
pub unsafe extern "C" fn dps_schema_load(path: *const c_char) -> *mut DpsSchema {
    let Ok(path) = cstr(path) else {
        return ptr::null_mut();
    };
    match Schema::from_json_file(path) {
        Ok(inner) => Box::into_raw(Box::new(DpsSchema { inner })),
        Err(e) => {
            fail(e);
            ptr::null_mut()
        }
    }
}

#[no_mangle]
pub unsafe extern "C" fn dps_schema_free(schema: *mut DpsSchema) {
    if !schema.is_null() {
        drop(Box::from_raw(schema));
    }
}

/// Load a CSV dataset against a schema. Returns null on failure.
#[no_mangle]
pub unsafe extern "C" fn dps_dataset_load(
    path: *const c_char,
    schema: *const DpsSchema,
) -> *mut DpsDataset {
    let Ok(path) = cstr(path) else {
        return ptr::null_mut();
    };
    if schema.is_null() {
        set_error("null schema handle");
        return ptr::null_mut();
    }
    match load_csv(path, &(*schema).inner) {
        Ok(report) => Box::into_raw(Box::new(DpsDataset {
            inner: report.dataset,
        })),
        Err(e) => {
            fail(e);
            ptr::null_mut()
        }
    }
}

#[no_mangle]
pub unsafe extern "C" fn dps_dataset_free(ds: *mut DpsDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Number of rows, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn dps_dataset_rows(ds: *const DpsDataset) -> usize {
    if ds.is_null() {
        return 0;
    }
    (*ds).inner.n()
}

/// Number of columns, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn dps_dataset_cols(ds: *const DpsDataset) -> usize {
    if ds.is_null() {
        return 0;
    }
    (*ds).inner.p()
}

fn parse_budget(epsilon: f64) -> Result<PrivacyBudget, dpsynth::Error> {
    if epsilon.is_infinite() {
        Ok(PrivacyBudget::non_private())
    } else {
        PrivacyBudget::pure(epsilon)
    }
}

/// Generate m synthetic copies of `ds` and write syn_1.csv .. syn_m.csv plus
/// manifest.json into `out_dir`. `method` is one of histogram | bayesnet |
/// gaussian | gaussian-ppd; `epsilon` may be infinity for the non-private
/// sentinel.
#[no_mangle]
pub unsafe extern "C" fn dps_synthesize(
    ds: *const DpsDataset,
    method: *const c_char,
    epsilon: f64,
    m: usize,
    seed: u64,
    out_dir: *const c_char,
) -> DpsStatus {
    if ds.is_null() {
        set_error("null dataset handle");
        return DpsStatus::NullPointer;
    }
    let method = match cstr(method) {
        Ok(s) => s,
        Err(c) => return c,
    };
    let out_dir = match cstr(out_dir) {
        Ok(s) => PathBuf::from(s),
        Err(c) => return c,
    };
    let method: SynthMethod = match method.parse() {
        Ok(m) => m,
        Err(e) => return fail(e),
    };
    let budget = match parse_budget(epsilon) {
        Ok(b) => b,
        Err(e) => return fail(e),
    };
    let req = SynthesisRequest::new(method, budget, m);
    if let Err(e) = req.validate() {
        return fail(e);
    }
    let mut ledger = BudgetLedger::new(budget);
    let stream = RngStream::new(seed, 0);
    let bundle = match generate_m_datasets(&(*ds).inner, &req, &stream, &mut ledger) {
        Ok(b) => b,
        Err(e) => return fail(e),
    };
    match write_bundle(&out_dir, &bundle, seed, &ledger) {
        Ok(()) => DpsStatus::Ok,
        Err(e) => fail(e),
    }
}

fn fill_combined(out: &mut DpsCombined, c: &dpsynth::CombinedInference) {
    out.q_bar = c.q_bar;
    out.u_bar = c.u_bar;
    out.b_m = c.b_m;
    out.variance = c.variance;
    out.df = c.df.unwrap_or(-1.0);
    out.ci_lo = c.ci[0];
    out.ci_hi = c.ci[1];
}

/// Pool m (q_i, u_i) pairs under a variance rule. `rule` is one of
/// tp | ts | tsppd | naive.
#[no_mangle]
pub unsafe extern "C" fn dps_combine(
    q: *const f64,
    u: *const f64,
    m: usize,
    rule: *const c_char,
    level: f64,
    out: *mut DpsCombined,
) -> DpsStatus {
    if q.is_null() || u.is_null() || out.is_null() {
        set_error("null pointer argument");
        return DpsStatus::NullPointer;
    }
    let rule = match cstr(rule) {
        Ok(s) => s,
        Err(c) => return c,
    };
    let rule: VarianceRule = match rule.parse() {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    let qs = std::slice::from_raw_parts(q, m);
    let us = std::slice::from_raw_parts(u, m);
    match combine(qs, us, rule, level) {
        Ok(c) => {
            fill_combined(&mut *out, &c);
            DpsStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Evaluate an estimand on each of `n_paths` synthetic CSVs and pool the
/// results. `paths` is an array of `n_paths` C strings.
#[no_mangle]
pub unsafe extern "C" fn dps_infer(
    paths: *const *const c_char,
    n_paths: usize,
    schema: *const DpsSchema,
    estimand: *const c_char,
    rule: *const c_char,
    level: f64,
    out: *mut DpsCombined,
) -> DpsStatus {
    if paths.is_null() || schema.is_null() || out.is_null() {
        set_error("null pointer argument");
        return DpsStatus::NullPointer;
    }
    let estimand = match cstr(estimand) {
        Ok(s) => s,
        Err(c) => return c,
    };
    let rule = match cstr(rule) {
        Ok(s) => s,
        Err(c) => return c,
    };
    let estimand: Estimand = match estimand.parse() {
        Ok(e) => e,
        Err(e) => return fail(e),
    };
    let rule: VarianceRule = match rule.parse() {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    let mut qs = Vec::with_capacity(n_paths);
    let mut us = Vec::with_capacity(n_paths);
    for i in 0..n_paths {
        let p = *paths.add(i);
        let p = match cstr(p) {
            Ok(s) => s,
            Err(c) => return c,
        };
        let report = match load_csv(p, &(*schema).inner) {
            Ok(r) => r,
            Err(e) => return fail(e),
        };
        match estimand.evaluate(&report.dataset) {
            Ok(r) => {
                qs.push(r.q);
                us.push(r.u);
            }
            Err(e) => return fail(e),
        }
    }
    match combine(&qs, &us, rule, level) {
        Ok(c) => {
            fill_combined(&mut *out, &c);
            DpsStatus::Ok
        }
        Err(e) => fail(e),
    }
}
