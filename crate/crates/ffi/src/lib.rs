//! C ABI over the `pgce` library.
//!
//! Handles are opaque and owned by the caller once returned; release them
//! with the matching `*_free` function. Every fallible call returns a
//! [`PgceStatus`]; on failure [`pgce_last_error`] describes the problem for
//! the calling thread. Strings returned through out-parameters must be
//! released with [`pgce_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use pgce::forest::ForestModel;
use pgce::genetic::{evolve, GaConfig, ObjectiveWeights};
use pgce::physics::PhysicsSpec;
use pgce::series::FeatureVector;
use pgce::PgceError;
use serde::{Deserialize, Serialize};

/// Result codes shared by every function in this interface.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgceStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Bad input file, schema or configuration.
    Usage = 3,
    DimensionMismatch = 4,
    /// The search finished without a candidate of the target class.
    NoValidCandidate = 5,
    Runtime = 6,
    Panic = 7,
}

/// Trained forest classifier.
pub struct PgceModel(ForestModel);

/// Fitted physics constraint spec.
pub struct PgceSpec(PhysicsSpec);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn status_of(e: &PgceError) -> PgceStatus {
    match e {
        PgceError::DimensionMismatch { .. } => PgceStatus::DimensionMismatch,
        PgceError::NoValidCandidate => PgceStatus::NoValidCandidate,
        e if e.is_usage_error() => PgceStatus::Usage,
        _ => PgceStatus::Runtime,
    }
}

enum Failure {
    Null(&'static str),
    Utf8(&'static str),
    Core(PgceError),
}

impl From<PgceError> for Failure {
    fn from(e: PgceError) -> Self {
        Failure::Core(e)
    }
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> PgceStatus {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => PgceStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            PgceStatus::NullPointer
        }
        Ok(Err(Failure::Utf8(what))) => {
            set_error(format!("invalid UTF-8 in {what}"));
            PgceStatus::InvalidUtf8
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            PgceStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure::Utf8(what))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " "))
        .expect("nul bytes replaced")
        .into_raw()
}

/// Message for the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn pgce_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pgce_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn pgce_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a model JSON file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pgce_model_load(path: *const c_char, out: *mut *mut PgceModel) -> PgceStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let model = ForestModel::load(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(PgceModel(model)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`pgce_model_load`] or be null.
#[no_mangle]
pub unsafe extern "C" fn pgce_model_free(model: *mut PgceModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Feature dimension the model expects; 0 for a null handle.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn pgce_model_n_features(model: *const PgceModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.n_features)
}

/// Predicts the class of one feature vector (0 = non-SEP, 1 = SEP) and the
/// forest's SEP probability. Either out-pointer may be null.
///
/// # Safety
/// `values` must point to `len` doubles; out-pointers must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn pgce_model_predict(
    model: *const PgceModel,
    values: *const f64,
    len: usize,
    label: *mut u8,
    sep_probability: *mut f64,
) -> PgceStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let x = slice_arg(values, len, "values")?;
        let proba = model.0.predict_proba(x)?;
        let predicted = model.0.predict(x)?;
        if let Some(l) = label.as_mut() {
            *l = predicted;
        }
        if let Some(p) = sep_probability.as_mut() {
            *p = proba[1];
        }
        Ok(())
    })
}

/// Loads a physics spec TOML file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pgce_spec_load(path: *const c_char, out: *mut *mut PgceSpec) -> PgceStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let spec = PhysicsSpec::load(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(PgceSpec(spec)));
        Ok(())
    })
}

/// # Safety
/// `spec` must come from [`pgce_spec_load`] or be null.
#[no_mangle]
pub unsafe extern "C" fn pgce_spec_free(spec: *mut PgceSpec) {
    if !spec.is_null() {
        drop(Box::from_raw(spec));
    }
}

/// Counts ordering and range violations of one feature vector.
///
/// # Safety
/// `values` must point to `len` doubles; out-pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn pgce_spec_violations(
    spec: *const PgceSpec,
    values: *const f64,
    len: usize,
    ordering: *mut usize,
    range: *mut usize,
) -> PgceStatus {
    guard(|| {
        let spec = ref_arg(spec, "spec")?;
        let x = slice_arg(values, len, "values")?;
        let (o, r) = (out_arg(ordering, "ordering")?, out_arg(range, "range")?);
        *o = spec.0.ordering_violations(x)?;
        *r = spec.0.range_violations(x)?;
        Ok(())
    })
}

/// Settings accepted by [`pgce_explain`] as TOML.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct ExplainSettings {
    weights: ObjectiveWeights,
    ga: GaConfig,
}

/// Generates a counterfactual set for one instance and returns it as JSON.
///
/// `config_toml` may be null; otherwise it overrides fields of the
/// `[weights]` and `[ga]` tables. With `baseline` set, defaults switch to the
/// unconstrained comparison mode. A finished search without any valid
/// candidate still returns the set and reports
/// [`PgceStatus::NoValidCandidate`].
///
/// # Safety
/// Handles must be live; `values` must point to `len` doubles; `config_toml`
/// must be a NUL-terminated string or null; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pgce_explain(
    model: *const PgceModel,
    spec: *const PgceSpec,
    values: *const f64,
    len: usize,
    config_toml: *const c_char,
    baseline: bool,
    out_json: *mut *mut c_char,
) -> PgceStatus {
    guard(|| {
        let out = out_arg(out_json, "out_json")?;
        *out = ptr::null_mut();
        let model = ref_arg(model, "model")?;
        let spec = ref_arg(spec, "spec")?;
        let x = slice_arg(values, len, "values")?;
        let base = if baseline {
            ExplainSettings {
                weights: ObjectiveWeights::baseline(),
                ga: GaConfig::default().baseline(),
            }
        } else {
            ExplainSettings::default()
        };
        let settings = if config_toml.is_null() {
            base
        } else {
            pgce::cli::resolve_text(base, str_arg(config_toml, "config_toml")?, Path::new("<config_toml>"))?
        };
        let query = FeatureVector::with_layout(x.to_vec(), spec.0.layout())?;
        let set = evolve(&query, &model.0, &spec.0, &settings.weights, &settings.ga)?;
        *out = into_c_string(set.to_json()?);
        if set.any_valid() {
            Ok(())
        } else {
            Err(Failure::Core(PgceError::NoValidCandidate))
        }
    })
}

/// Channel-summed DTW distance between two equal-layout feature vectors.
///
/// # Safety
/// `a` and `b` must point to `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pgce_dtw(
    spec: *const PgceSpec,
    a: *const f64,
    b: *const f64,
    len: usize,
    out: *mut f64,
) -> PgceStatus {
    guard(|| {
        let spec = ref_arg(spec, "spec")?;
        let (a, b) = (slice_arg(a, len, "a")?, slice_arg(b, len, "b")?);
        let out = out_arg(out, "out")?;
        *out = pgce::metrics::dtw_by_channel(a, b, spec.0.layout())?;
        Ok(())
    })
}
