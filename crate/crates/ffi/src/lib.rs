//! C ABI over the certification statistics, noise schedule and smoothed
//! classifier certification of `consmooth`.
//!
//! Every fallible function returns a [`CsStatus`]; on failure the message is
//! kept per thread and read with [`cs_last_error_message`]. Handles are opaque
//! and released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use consmooth::certify::stats;
use consmooth::certify::{certify, BaseClassifier, CertifyConfig, HalfspaceOracle, ModelClassifier};
use consmooth::io::Checkpoint;
use consmooth::model::ModelParams;
use consmooth::schedule::NoiseSchedule;
use consmooth::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    NonFinite = 4,
    Format = 5,
    Checksum = 6,
    Version = 7,
    Config = 8,
    Io = 9,
    Panic = 10,
}

impl From<&Error> for CsStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape(_) => CsStatus::Shape,
            Error::NonFinite(_) => CsStatus::NonFinite,
            Error::InvalidArgument(_) | Error::DetachedLeaf(_) => CsStatus::InvalidArgument,
            Error::Format(_) => CsStatus::Format,
            Error::Checksum(_) => CsStatus::Checksum,
            Error::Version { .. } => CsStatus::Version,
            Error::Config(_) => CsStatus::Config,
            Error::Io { .. } => CsStatus::Io,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Failure(CsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(CsStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(CsStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            CsStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside consmooth".into());
            CsStatus::Panic
        }
    }
}

fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    // SAFETY: caller guarantees `out` points to writable storage for a `T`.
    unsafe { out.write(value) };
    Ok(())
}

/// Length in bytes of the last error message on this thread, excluding the
/// terminating NUL.
#[no_mangle]
pub extern "C" fn cs_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().len())
}

/// Copies the last error message, NUL-terminated and truncated to `capacity`
/// bytes, and returns its full length.
///
/// # Safety
/// `buffer` must be null or point to `capacity` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn cs_last_error_message(buffer: *mut c_char, capacity: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buffer.is_null() && capacity > 0 {
            let n = msg.len().min(capacity - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buffer.cast::<u8>(), n);
            *buffer.add(n) = 0;
        }
        msg.len()
    })
}

#[no_mangle]
pub extern "C" fn cs_normal_cdf(z: f64) -> f64 {
    stats::normal_cdf(z)
}

/// # Safety
/// `out` must point to a writable `double`.
#[no_mangle]
pub unsafe extern "C" fn cs_inv_normal_cdf(p: f64, out: *mut f64) -> CsStatus {
    guard(|| write_out(out, stats::inv_normal_cdf(p)?, "out"))
}

/// One-sided Clopper-Pearson lower bound on a binomial proportion.
///
/// # Safety
/// `out` must point to a writable `double`.
#[no_mangle]
pub unsafe extern "C" fn cs_clopper_pearson_lower(successes: u64, trials: u64, alpha: f64, out: *mut f64) -> CsStatus {
    guard(|| write_out(out, stats::clopper_pearson_lower(successes, trials, alpha)?, "out"))
}

/// # Safety
/// `out` must point to a writable `double`.
#[no_mangle]
pub unsafe extern "C" fn cs_radius_two_class(sigma: f64, p_a: f64, p_b: f64, out: *mut f64) -> CsStatus {
    guard(|| write_out(out, stats::radius_two_class(sigma, p_a, p_b)?, "out"))
}

/// Discretized noise levels `t_0 < ... < t_N`.
pub struct CsSchedule(NoiseSchedule);

/// # Safety
/// `out` must point to writable storage for a handle pointer.
#[no_mangle]
pub unsafe extern "C" fn cs_schedule_new(
    t_max: f64,
    t_min: f64,
    intervals: usize,
    rho: f64,
    out: *mut *mut CsSchedule,
) -> CsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let s = NoiseSchedule::discretize(t_max, t_min, intervals, rho)?;
        write_out(out, Box::into_raw(Box::new(CsSchedule(s))), "out")
    })
}

/// Number of intervals `N`, or 0 for a null handle.
///
/// # Safety
/// `schedule` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cs_schedule_intervals(schedule: *const CsSchedule) -> usize {
    schedule.as_ref().map_or(0, |s| s.0.intervals())
}

/// `t_n` for `0 <= n <= N`.
///
/// # Safety
/// `schedule` must be a live handle and `out` a writable `double`.
#[no_mangle]
pub unsafe extern "C" fn cs_schedule_time(schedule: *const CsSchedule, n: usize, out: *mut f64) -> CsStatus {
    guard(|| {
        let s = schedule.as_ref().ok_or_else(|| null("schedule"))?;
        if n > s.0.intervals() {
            return Err(Failure(
                CsStatus::InvalidArgument,
                format!("index {n} beyond {} intervals", s.0.intervals()),
            ));
        }
        write_out(out, s.0.time(n), "out")
    })
}

/// # Safety
/// `schedule` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cs_schedule_free(schedule: *mut CsSchedule) {
    if !schedule.is_null() {
        drop(Box::from_raw(schedule));
    }
}

enum Inner {
    Halfspace(HalfspaceOracle),
    Model(Box<ModelParams>),
}

/// A base classifier to be smoothed: an analytic halfspace or a trained model.
pub struct CsClassifier(Inner);

impl CsClassifier {
    fn input_len(&self) -> usize {
        match &self.0 {
            Inner::Halfspace(h) => h.input_len(),
            Inner::Model(p) => p.config.input_len(),
        }
    }

    fn num_classes(&self) -> usize {
        match &self.0 {
            Inner::Halfspace(h) => h.num_classes(),
            Inner::Model(p) => p.config.num_classes,
        }
    }
}

/// Class 1 where `w . x + b >= 0`, else class 0.
///
/// # Safety
/// `weights` must point to `dim` readable doubles and `out` to writable
/// storage for a handle pointer.
#[no_mangle]
pub unsafe extern "C" fn cs_halfspace_new(
    weights: *const f64,
    dim: usize,
    bias: f64,
    out: *mut *mut CsClassifier,
) -> CsStatus {
    guard(|| {
        if weights.is_null() {
            return Err(null("weights"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let w = std::slice::from_raw_parts(weights, dim).to_vec();
        let h = HalfspaceOracle::new(w, bias)?;
        write_out(out, Box::into_raw(Box::new(CsClassifier(Inner::Halfspace(h)))), "out")
    })
}

/// Loads the model stored in a pre-training or fine-tuning checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string and `out` writable storage
/// for a handle pointer.
#[no_mangle]
pub unsafe extern "C" fn cs_classifier_load(path: *const c_char, out: *mut *mut CsClassifier) -> CsStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(CsStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let ck = Checkpoint::load(Path::new(p))?;
        write_out(out, Box::into_raw(Box::new(CsClassifier(Inner::Model(Box::new(ck.params))))), "out")
    })
}

/// Input length expected by the classifier, or 0 for a null handle.
///
/// # Safety
/// `classifier` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cs_classifier_input_len(classifier: *const CsClassifier) -> usize {
    classifier.as_ref().map_or(0, CsClassifier::input_len)
}

/// # Safety
/// `classifier` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cs_classifier_num_classes(classifier: *const CsClassifier) -> usize {
    classifier.as_ref().map_or(0, CsClassifier::num_classes)
}

/// # Safety
/// `classifier` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cs_classifier_free(classifier: *mut CsClassifier) {
    if !classifier.is_null() {
        drop(Box::from_raw(classifier));
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CsCertifyParams {
    pub sigma: f64,
    /// Noise draws used to select the top class.
    pub n0: u64,
    /// Noise draws used to bound its probability.
    pub n: u64,
    pub alpha: f64,
    /// Draws evaluated per classifier call.
    pub batch: usize,
    pub seed: u64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CsCertifyRecord {
    pub sample_id: u64,
    pub label: usize,
    /// Predicted class, or -1 on abstention.
    pub predicted: i64,
    pub pa_lower: f64,
    pub radius: f64,
    pub ms: f64,
    pub correct: bool,
}

#[no_mangle]
pub extern "C" fn cs_certify_params_default() -> CsCertifyParams {
    let c = CertifyConfig::default();
    CsCertifyParams {
        sigma: c.sigma,
        n0: c.n0,
        n: c.n,
        alpha: c.alpha,
        batch: c.batch,
        seed: 0,
    }
}

/// Certifies one input. Identical arguments give identical records apart
/// from `ms`.
///
/// # Safety
/// `classifier` must be a live handle, `x` must point to `len` readable
/// doubles, `params` to a readable struct and `out` to a writable record.
#[no_mangle]
pub unsafe extern "C" fn cs_certify(
    classifier: *const CsClassifier,
    x: *const f64,
    len: usize,
    label: usize,
    sample_id: u64,
    params: *const CsCertifyParams,
    out: *mut CsCertifyRecord,
) -> CsStatus {
    guard(|| {
        let f = classifier.as_ref().ok_or_else(|| null("classifier"))?;
        let p = params.as_ref().ok_or_else(|| null("params"))?;
        if x.is_null() {
            return Err(null("x"));
        }
        if len != f.input_len() {
            return Err(Failure(
                CsStatus::Shape,
                format!("input of length {len}, classifier expects {}", f.input_len()),
            ));
        }
        let x = std::slice::from_raw_parts(x, len);
        let config = CertifyConfig {
            sigma: p.sigma,
            n0: p.n0,
            n: p.n,
            alpha: p.alpha,
            batch: p.batch,
            record_timing: true,
        };
        let r = match &f.0 {
            Inner::Halfspace(h) => certify(h, x, label, sample_id, &config, p.seed)?,
            Inner::Model(m) => {
                let mc = ModelClassifier::new(m, p.sigma)?;
                certify(&mc, x, label, sample_id, &config, p.seed)?
            }
        };
        let record = CsCertifyRecord {
            sample_id: r.sample_id,
            label: r.label,
            predicted: r.predicted.map_or(-1, |c| c as i64),
            pa_lower: r.pa_lower,
            radius: r.radius,
            ms: r.ms,
            correct: r.correct,
        };
        write_out(out, record, "out")
    })
}
