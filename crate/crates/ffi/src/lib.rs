//! C ABI for the supervised factor-model toolkit.
//!
//! Conventions shared by every entry point:
//! - Matrices cross the boundary as dense column-major `double` arrays
//!   with explicit dimensions; an observation is one contiguous column.
//!   Time-series windows are the exception: they are channel-major, one
//!   channel's samples contiguous, matching the window file format.
//! - Models are opaque handles created by `_fit`/`_load` and released by
//!   their matching `_free`; handles are never shared across threads
//!   without external synchronization.
//! - Every call returns an [`SfStatus`]; on failure the thread-local
//!   message behind [`sf_last_error`] describes the cause. Output
//!   buffers are written only on `SF_STATUS_OK`.
//! - Panics are caught at the boundary and reported as
//!   `SF_STATUS_PANIC`; they never unwind into the caller.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use nalgebra::DMatrix;

use supfactor::error::Error;
use supfactor::linear::{self, Centered, LinearFactorModel, Mode};
use supfactor::nmf::SupervisedNmfModel;
use supfactor::spectral::{self, SpectralFeatureVector, TimeSeriesWindow, WelchConfig};

/// Status code returned by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SfStatus {
    Ok = 0,
    /// Input values violate a data precondition.
    InvalidData = 1,
    /// Dimensions do not line up.
    ShapeError = 2,
    /// A parameter is outside its documented range.
    InvalidConfig = 3,
    /// A required linear system is numerically singular.
    SingularSystem = 4,
    /// A numerical routine produced no finite, usable result.
    NumericalError = 5,
    /// A reference optimizer failed to make progress.
    OracleDiverged = 6,
    /// The problem exceeds the documented desk-scale guard.
    SizeLimit = 7,
    /// A required input file does not exist.
    MissingInput = 8,
    /// The requested quantity is undefined for the given input.
    Undefined = 9,
    /// Filesystem failure.
    IoError = 10,
    /// A required pointer argument was null.
    NullPointer = 11,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 12,
    /// An internal panic was caught at the boundary.
    Panic = 13,
}

/// Supervision variant of the linear factor model.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SfLinearMode {
    /// Scores are free per-observation variables seeing X and Y.
    Local = 0,
    /// Scores are an affine encoding of X alone.
    Encoded = 1,
}

/// Opaque handle to a fitted linear factor model.
pub struct SfLinearModel {
    inner: LinearFactorModel,
}

/// Opaque handle to a loaded supervised NMF model.
pub struct SfNmfModel {
    inner: SupervisedNmfModel,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(message: impl Into<String>) {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = message.into());
}

fn status_for(err: &Error) -> SfStatus {
    match err {
        Error::InvalidData(_) => SfStatus::InvalidData,
        Error::ShapeError(_) => SfStatus::ShapeError,
        Error::InvalidConfig(_) => SfStatus::InvalidConfig,
        Error::SingularSystem(_) => SfStatus::SingularSystem,
        Error::NumericalError(_) => SfStatus::NumericalError,
        Error::OracleDiverged(_) => SfStatus::OracleDiverged,
        Error::SizeLimit(_) => SfStatus::SizeLimit,
        Error::MissingInput(_) => SfStatus::MissingInput,
        Error::Undefined(_) => SfStatus::Undefined,
        Error::Io(_) => SfStatus::IoError,
    }
}

fn fail(err: Error) -> SfStatus {
    let status = status_for(&err);
    set_error(err.to_string());
    status
}

fn fail_null(what: &str) -> SfStatus {
    set_error(format!("{what} must not be null"));
    SfStatus::NullPointer
}

/// Run a body with panics converted to `SF_STATUS_PANIC`.
fn guarded<F: FnOnce() -> SfStatus>(body: F) -> SfStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic caught at the C boundary");
            SfStatus::Panic
        }
    }
}

/// Column-major matrix from a raw pointer; `None` when the pointer is null.
unsafe fn matrix_from_raw(data: *const f64, rows: usize, cols: usize) -> Option<DMatrix<f64>> {
    if data.is_null() {
        return None;
    }
    let values = std::slice::from_raw_parts(data, rows * cols);
    Some(DMatrix::from_column_slice(rows, cols, values))
}

/// Channel-major window from a raw pointer (channel samples contiguous).
unsafe fn window_from_raw(
    data: *const f64,
    channels: usize,
    nsamples: usize,
) -> Option<DMatrix<f64>> {
    if data.is_null() {
        return None;
    }
    let values = std::slice::from_raw_parts(data, channels * nsamples);
    Some(DMatrix::from_fn(channels, nsamples, |c, i| {
        values[c * nsamples + i]
    }))
}

/// Copy a column-major matrix into a caller buffer of exactly its size.
unsafe fn write_matrix(dst: *mut f64, matrix: &DMatrix<f64>) {
    let out = std::slice::from_raw_parts_mut(dst, matrix.len());
    out.copy_from_slice(matrix.as_slice());
}

unsafe fn path_from_raw(path: *const c_char) -> Result<PathBuf, SfStatus> {
    if path.is_null() {
        return Err(fail_null("path"));
    }
    match CStr::from_ptr(path).to_str() {
        Ok(text) => Ok(PathBuf::from(text)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(SfStatus::InvalidUtf8)
        }
    }
}

/// Copy the message for the most recent failure on this thread into
/// `buffer` (NUL-terminated, truncated to `capacity` bytes) and return
/// the full message length in bytes, excluding the terminator. A null
/// or empty buffer still returns the length, so callers can size a
/// second call. The message is only meaningful after a non-OK status.
#[no_mangle]
pub unsafe extern "C" fn sf_last_error(buffer: *mut c_char, capacity: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let message = slot.borrow();
        let bytes = message.as_bytes();
        if !buffer.is_null() && capacity > 0 {
            let n = bytes.len().min(capacity - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buffer.cast::<u8>(), n);
            *buffer.add(n) = 0;
        }
        bytes.len()
    })
}

/// Fit a linear factor model. `x` is p×n, `y` is q×n, both column-major
/// with observations as columns; the fit centers both internally and the
/// stored means are applied by the scoring and prediction calls. On
/// success `*out` owns the model; release it with `sf_linear_free`.
#[no_mangle]
pub unsafe extern "C" fn sf_linear_fit(
    x: *const f64,
    p: usize,
    y: *const f64,
    q: usize,
    n: usize,
    factors: usize,
    mu: f64,
    mode: SfLinearMode,
    out: *mut *mut SfLinearModel,
) -> SfStatus {
    guarded(|| {
        if out.is_null() {
            return fail_null("out");
        }
        let Some(x) = matrix_from_raw(x, p, n) else {
            return fail_null("x");
        };
        let Some(y) = matrix_from_raw(y, q, n) else {
            return fail_null("y");
        };
        let mode = match mode {
            SfLinearMode::Local => Mode::Local,
            SfLinearMode::Encoded => Mode::Encoded,
        };
        let fit = Centered::center(&x)
            .and_then(|xc| Ok((xc, Centered::center(&y)?)))
            .and_then(|(xc, yc)| linear::fit(&xc, &yc, factors, mu, mode));
        match fit {
            Ok(model) => {
                *out = Box::into_raw(Box::new(SfLinearModel { inner: model }));
                SfStatus::Ok
            }
            Err(err) => fail(err),
        }
    })
}

/// Release a model returned by `sf_linear_fit`. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn sf_linear_free(model: *mut SfLinearModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Report the model's predictor dimension, outcome dimension, and factor
/// count. Any output pointer may be null to skip that value.
#[no_mangle]
pub unsafe extern "C" fn sf_linear_dims(
    model: *const SfLinearModel,
    p: *mut usize,
    q: *mut usize,
    factors: *mut usize,
) -> SfStatus {
    guarded(|| {
        let Some(model) = model.as_ref() else {
            return fail_null("model");
        };
        if !p.is_null() {
            *p = model.inner.w().nrows();
        }
        if !q.is_null() {
            *q = model.inner.d().nrows();
        }
        if !factors.is_null() {
            *factors = model.inner.w().ncols();
        }
        SfStatus::Ok
    })
}

/// Copy the p×factors predictor loadings W into `out` (column-major).
#[no_mangle]
pub unsafe extern "C" fn sf_linear_loadings(
    model: *const SfLinearModel,
    out: *mut f64,
) -> SfStatus {
    guarded(|| {
        let Some(model) = model.as_ref() else {
            return fail_null("model");
        };
        if out.is_null() {
            return fail_null("out");
        }
        write_matrix(out, model.inner.w());
        SfStatus::Ok
    })
}

/// Copy the q×factors outcome weights D into `out` (column-major).
#[no_mangle]
pub unsafe extern "C" fn sf_linear_outcome_weights(
    model: *const SfLinearModel,
    out: *mut f64,
) -> SfStatus {
    guarded(|| {
        let Some(model) = model.as_ref() else {
            return fail_null("model");
        };
        if out.is_null() {
            return fail_null("out");
        }
        write_matrix(out, model.inner.d());
        SfStatus::Ok
    })
}

/// Score new observations from predictors alone: `x` is p×n raw (not
/// centered), `out` receives factors×n scores, column-major.
#[no_mangle]
pub unsafe extern "C" fn sf_linear_encode_scores(
    model: *const SfLinearModel,
    x: *const f64,
    p: usize,
    n: usize,
    out: *mut f64,
) -> SfStatus {
    guarded(|| {
        let Some(model) = model.as_ref() else {
            return fail_null("model");
        };
        let Some(x) = matrix_from_raw(x, p, n) else {
            return fail_null("x");
        };
        if out.is_null() {
            return fail_null("out");
        }
        let scores = model
            .inner
            .center_x(&x)
            .and_then(|xc| model.inner.encode_scores(&xc));
        match scores {
            Ok(scores) => {
                write_matrix(out, &scores);
                SfStatus::Ok
            }
            Err(err) => fail(err),
        }
    })
}

/// Score observations using the outcome as well (`x` p×n, `y` q×n, raw).
/// Defined for Local models only; an Encoded model's scores never depend
/// on Y, so the call reports `SF_STATUS_INVALID_CONFIG` for it.
#[no_mangle]
pub unsafe extern "C" fn sf_linear_scores_with_outcome(
    model: *const SfLinearModel,
    x: *const f64,
    p: usize,
    y: *const f64,
    q: usize,
    n: usize,
    out: *mut f64,
) -> SfStatus {
    guarded(|| {
        let Some(model) = model.as_ref() else {
            return fail_null("model");
        };
        let Some(x) = matrix_from_raw(x, p, n) else {
            return fail_null("x");
        };
        let Some(y) = matrix_from_raw(y, q, n) else {
            return fail_null("y");
        };
        if out.is_null() {
            return fail_null("out");
        }
        let scores = model.inner.center_x(&x).and_then(|xc| {
            let yc = model.inner.center_y(&y)?;
            model.inner.scores_with_outcome(&xc, &yc)
        });
        match scores {
            Ok(scores) => {
                write_matrix(out, &scores);
                SfStatus::Ok
            }
            Err(err) => fail(err),
        }
    })
}

/// Reconstruct predictors through the factor bottleneck: `x` p×n raw in,
/// `out` p×n denoised estimate (means restored).
#[no_mangle]
pub unsafe extern "C" fn sf_linear_reconstruct(
    model: *const SfLinearModel,
    x: *const f64,
    p: usize,
    n: usize,
    out: *mut f64,
) -> SfStatus {
    guarded(|| {
        let Some(model) = model.as_ref() else {
            return fail_null("model");
        };
        let Some(x) = matrix_from_raw(x, p, n) else {
            return fail_null("x");
        };
        if out.is_null() {
            return fail_null("out");
        }
        let recon = model
            .inner
            .center_x(&x)
            .and_then(|xc| model.inner.encode_scores(&xc))
            .and_then(|s| model.inner.reconstruct(&s));
        match recon {
            Ok(recon) => {
                write_matrix(out, &recon);
                SfStatus::Ok
            }
            Err(err) => fail(err),
        }
    })
}

/// Predict outcomes from predictors alone: `x` p×n raw in, `out` q×n
/// outcome estimate (means restored).
#[no_mangle]
pub unsafe extern "C" fn sf_linear_predict(
    model: *const SfLinearModel,
    x: *const f64,
    p: usize,
    n: usize,
    out: *mut f64,
) -> SfStatus {
    guarded(|| {
        let Some(model) = model.as_ref() else {
            return fail_null("model");
        };
        let Some(x) = matrix_from_raw(x, p, n) else {
            return fail_null("x");
        };
        if out.is_null() {
            return fail_null("out");
        }
        let pred = model
            .inner
            .center_x(&x)
            .and_then(|xc| model.inner.encode_scores(&xc))
            .and_then(|s| model.inner.predict(&s));
        match pred {
            Ok(pred) => {
                write_matrix(out, &pred);
                SfStatus::Ok
            }
            Err(err) => fail(err),
        }
    })
}

/// Load a supervised NMF model from a file written by the library. On
/// success `*out` owns the model; release it with `sf_nmf_free`.
#[no_mangle]
pub unsafe extern "C" fn sf_nmf_load(path: *const c_char, out: *mut *mut SfNmfModel) -> SfStatus {
    guarded(|| {
        if out.is_null() {
            return fail_null("out");
        }
        let path = match path_from_raw(path) {
            Ok(path) => path,
            Err(status) => return status,
        };
        match SupervisedNmfModel::load(&path) {
            Ok(model) => {
                *out = Box::into_raw(Box::new(SfNmfModel { inner: model }));
                SfStatus::Ok
            }
            Err(err) => fail(err),
        }
    })
}

/// Serialize a model to a file, overwriting any existing file.
#[no_mangle]
pub unsafe extern "C" fn sf_nmf_save(model: *const SfNmfModel, path: *const c_char) -> SfStatus {
    guarded(|| {
        let Some(model) = model.as_ref() else {
            return fail_null("model");
        };
        let path = match path_from_raw(path) {
            Ok(path) => path,
            Err(status) => return status,
        };
        match model.inner.save(&path) {
            Ok(()) => SfStatus::Ok,
            Err(err) => fail(err),
        }
    })
}

/// Release a model returned by `sf_nmf_load`. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn sf_nmf_free(model: *mut SfNmfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Report the model's variable count and component count. Any output
/// pointer may be null to skip that value.
#[no_mangle]
pub unsafe extern "C" fn sf_nmf_dims(
    model: *const SfNmfModel,
    nvars: *mut usize,
    ncomponents: *mut usize,
) -> SfStatus {
    guarded(|| {
        let Some(model) = model.as_ref() else {
            return fail_null("model");
        };
        if !nvars.is_null() {
            *nvars = model.inner.nvars();
        }
        if !ncomponents.is_null() {
            *ncomponents = model.inner.ncomponents();
        }
        SfStatus::Ok
    })
}

/// Non-negative scores for new observations (`x` p×n, `out` k×n,
/// column-major). Encoded models apply their encoder; the other modes
/// solve a non-negative projection against the fixed loadings.
#[no_mangle]
pub unsafe extern "C" fn sf_nmf_encode(
    model: *const SfNmfModel,
    x: *const f64,
    p: usize,
    n: usize,
    out: *mut f64,
) -> SfStatus {
    guarded(|| {
        let Some(model) = model.as_ref() else {
            return fail_null("model");
        };
        let Some(x) = matrix_from_raw(x, p, n) else {
            return fail_null("x");
        };
        if out.is_null() {
            return fail_null("out");
        }
        match model.inner.encode(&x) {
            Ok(scores) => {
                write_matrix(out, &scores);
                SfStatus::Ok
            }
            Err(err) => fail(err),
        }
    })
}

/// P(y = 1 | x) for each observation column of `x` (p×n); `out` receives
/// n probabilities. Labels are never consulted.
#[no_mangle]
pub unsafe extern "C" fn sf_nmf_predict_proba(
    model: *const SfNmfModel,
    x: *const f64,
    p: usize,
    n: usize,
    out: *mut f64,
) -> SfStatus {
    guarded(|| {
        let Some(model) = model.as_ref() else {
            return fail_null("model");
        };
        let Some(x) = matrix_from_raw(x, p, n) else {
            return fail_null("x");
        };
        if out.is_null() {
            return fail_null("out");
        }
        match model.inner.predict_proba(&x) {
            Ok(probs) => {
                std::slice::from_raw_parts_mut(out, probs.len()).copy_from_slice(&probs);
                SfStatus::Ok
            }
            Err(err) => fail(err),
        }
    })
}

/// Number of features produced by `sf_extract_features` for a channel
/// count and a band-edge count: bands × (channels + channel pairs).
#[no_mangle]
pub unsafe extern "C" fn sf_feature_count(
    channels: usize,
    n_band_edges: usize,
    out: *mut usize,
) -> SfStatus {
    guarded(|| {
        if out.is_null() {
            return fail_null("out");
        }
        if channels == 0 {
            set_error("need at least one channel");
            return SfStatus::InvalidConfig;
        }
        if n_band_edges < 2 {
            set_error("need at least two band edges");
            return SfStatus::InvalidConfig;
        }
        let bands = n_band_edges - 1;
        let pairs = channels * (channels - 1) / 2;
        *out = bands * (channels + pairs);
        SfStatus::Ok
    })
}

/// Banded Welch power and coherence features for one window. `samples`
/// is channel-major (each channel's `nsamples` values contiguous);
/// `band_edges` holds `n_band_edges` ascending frequencies in Hz. The
/// Welch segmentation is the library default for the window length.
/// `out_len` must equal the value reported by `sf_feature_count`; the
/// features hold every power value channel by channel (bands contiguous
/// per channel), then every coherence value pair by pair in
/// lexicographic pair order.
#[no_mangle]
pub unsafe extern "C" fn sf_extract_features(
    samples: *const f64,
    channels: usize,
    nsamples: usize,
    sample_rate_hz: f64,
    band_edges: *const f64,
    n_band_edges: usize,
    out: *mut f64,
    out_len: usize,
) -> SfStatus {
    guarded(|| {
        let Some(samples) = window_from_raw(samples, channels, nsamples) else {
            return fail_null("samples");
        };
        if band_edges.is_null() {
            return fail_null("band_edges");
        }
        if out.is_null() {
            return fail_null("out");
        }
        let edges = std::slice::from_raw_parts(band_edges, n_band_edges).to_vec();
        let features = (|| -> supfactor::error::Result<SpectralFeatureVector> {
            let window = TimeSeriesWindow::new(samples, sample_rate_hz, 0)?;
            let welch = WelchConfig::default_for(window.nsamples());
            let psd = spectral::welch_psd(&window, &welch)?;
            let coh = spectral::ms_coherence(&window, &welch)?;
            let power = spectral::band_aggregate(&psd.frequencies_hz, &psd.power, &edges)?;
            let coherence = spectral::band_aggregate(&coh.frequencies_hz, &coh.coherence, &edges)?;
            spectral::assemble_features(power, coherence, edges)
        })();
        match features {
            Ok(features) => {
                let flat = features.flatten();
                if flat.len() != out_len {
                    set_error(format!(
                        "caller buffer holds {out_len} values but the features need {}",
                        flat.len()
                    ));
                    return SfStatus::ShapeError;
                }
                std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(&flat);
                SfStatus::Ok
            }
            Err(err) => fail(err),
        }
    })
}
