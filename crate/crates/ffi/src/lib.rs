//! C ABI over the heartnet toolkit.
//!
//! Every fallible function returns an [`HnStatus`]; on failure a
//! description is available from [`hn_last_error`] on the same thread.
//! Handles are opaque and owned by the caller, who releases them with the
//! matching `*_free` function. Labels are reported as `1` (abnormal) or
//! `-1` (normal). Sample indices are at the 1 kHz processing rate.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use heartnet::denoise::denoise;
use heartnet::neuralnet::Checkpoint;
use heartnet::pipeline::{self, preprocess, BaselineModel, Processed};
use heartnet::segmental::VoteRule;
use heartnet::segmenter::Segmenter;
use heartnet::signal_io::Recording;
use heartnet::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Checkpoint = 5,
    /// The signal is shorter than the operation needs.
    TooShort = 6,
    /// No cardiac cycle of usable length was found.
    Unsegmentable = 7,
    /// The output buffer is too small; the required count was written.
    BufferTooSmall = 8,
    Numeric = 9,
    Internal = 10,
}

/// Sample-index boundaries of one cardiac cycle.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HnCycle {
    pub s1_start: usize,
    pub sys_start: usize,
    pub s2_start: usize,
    pub dia_start: usize,
    pub cycle_end: usize,
}

/// HSMM heart-sound segmenter.
pub struct HnSegmenter(Segmenter);

/// Segmental CNN with its vote threshold.
pub struct HnCnn {
    checkpoint: Checkpoint,
    rule: VoteRule,
}

/// Feature-based classifier.
pub struct HnBaseline(BaselineModel);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(HnStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => HnStatus::Io,
            Error::Format(_) | Error::Parse(_) | Error::Csv(_) | Error::Json(_) | Error::Config(_) => HnStatus::Parse,
            Error::Checkpoint(_) => HnStatus::Checkpoint,
            Error::TooShort { .. } | Error::EmptyRecording => HnStatus::TooShort,
            Error::NonFinite(_) | Error::Diverged { .. } => HnStatus::Numeric,
            _ => HnStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: HnStatus, message: &str) -> Failure {
    Failure(status, message.to_string())
}

fn set_last_error(message: Option<String>) {
    let message = message.map(|m| CString::new(m.replace('\0', " ")).expect("nul bytes removed"));
    LAST_ERROR.with(|slot| *slot.borrow_mut() = message);
}

/// Runs `f`, recording its error message and converting panics.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> HnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error(None);
            HnStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_last_error(Some(message));
            status
        }
        Err(_) => {
            set_last_error(Some("internal panic".into()));
            HnStatus::Internal
        }
    }
}

unsafe fn non_null<'a, T>(ptr: *const T, name: &str) -> Result<&'a T, Failure> {
    ptr.as_ref()
        .ok_or_else(|| fail(HnStatus::NullPointer, &format!("`{name}` is null")))
}

unsafe fn out_ptr<'a, T>(ptr: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    ptr.as_mut()
        .ok_or_else(|| fail(HnStatus::NullPointer, &format!("`{name}` is null")))
}

unsafe fn samples_arg<'a>(samples: *const f64, len: usize) -> Result<&'a [f64], Failure> {
    if samples.is_null() {
        return Err(fail(HnStatus::NullPointer, "`samples` is null"));
    }
    if len == 0 {
        return Err(fail(HnStatus::TooShort, "empty signal"));
    }
    Ok(std::slice::from_raw_parts(samples, len))
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, Failure> {
    if path.is_null() {
        return Err(fail(HnStatus::NullPointer, "`path` is null"));
    }
    let text = CStr::from_ptr(path)
        .to_str()
        .map_err(|_| fail(HnStatus::InvalidArgument, "path is not UTF-8"))?;
    Ok(PathBuf::from(text))
}

fn process(segmenter: &Segmenter, samples: &[f64], sample_rate: u32) -> Result<Processed, Failure> {
    let recording = Recording::new("ffi", samples.to_vec(), sample_rate)?;
    Ok(preprocess(&recording, segmenter)?)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL after a
/// successful call. Valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn hn_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(std::ptr::null(), |m| m.as_ptr()))
}

/// Wavelet-denoises `len` samples into `out` (also `len` long) and writes
/// the estimated SNR in dB.
///
/// # Safety
/// `samples` and `out` must point to `len` valid doubles; `out_snr_db` must
/// be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hn_denoise(samples: *const f64, len: usize, out: *mut f64, out_snr_db: *mut f64) -> HnStatus {
    guard(|| {
        let x = samples_arg(samples, len)?;
        if out.is_null() {
            return Err(fail(HnStatus::NullPointer, "`out` is null"));
        }
        let snr = out_ptr(out_snr_db, "out_snr_db")?;
        let d = denoise(x)?;
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(&d.signal);
        *snr = d.snr_db;
        Ok(())
    })
}

/// Creates the default segmenter.
///
/// # Safety
/// `out` must be a valid pointer; it receives a handle to release with
/// [`hn_segmenter_free`].
#[no_mangle]
pub unsafe extern "C" fn hn_segmenter_new(out: *mut *mut HnSegmenter) -> HnStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = Box::into_raw(Box::new(HnSegmenter(Segmenter::pretrained()?)));
        Ok(())
    })
}

/// # Safety
/// `handle` must come from [`hn_segmenter_new`] and not be used again; NULL
/// is ignored.
#[no_mangle]
pub unsafe extern "C" fn hn_segmenter_free(handle: *mut HnSegmenter) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Resamples, normalizes, denoises and segments a recording. Writes up to
/// `capacity` cycles to `out_cycles` and the total count to `out_count`;
/// returns `BufferTooSmall` when `capacity` is short.
///
/// # Safety
/// `samples` must point to `len` doubles, `out_cycles` to `capacity`
/// cycles (may be NULL when `capacity` is 0), and `out_count` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hn_segment(
    segmenter: *const HnSegmenter,
    samples: *const f64,
    len: usize,
    sample_rate: u32,
    out_cycles: *mut HnCycle,
    capacity: usize,
    out_count: *mut usize,
) -> HnStatus {
    guard(|| {
        let segmenter = non_null(segmenter, "segmenter")?;
        let x = samples_arg(samples, len)?;
        let count = out_ptr(out_count, "out_count")?;
        let cycles = process(&segmenter.0, x, sample_rate)?.cycles;
        *count = cycles.len();
        if cycles.len() > capacity {
            return Err(fail(
                HnStatus::BufferTooSmall,
                &format!("{} cycles do not fit in {capacity}", cycles.len()),
            ));
        }
        if !cycles.is_empty() {
            if out_cycles.is_null() {
                return Err(fail(HnStatus::NullPointer, "`out_cycles` is null"));
            }
            let out = std::slice::from_raw_parts_mut(out_cycles, cycles.len());
            for (o, c) in out.iter_mut().zip(&cycles) {
                *o = HnCycle {
                    s1_start: c.s1_start,
                    sys_start: c.sys_start,
                    s2_start: c.s2_start,
                    dia_start: c.dia_start,
                    cycle_end: c.cycle_end,
                };
            }
        }
        Ok(())
    })
}

/// Loads a CNN from a directory written by `heartnet train-cnn`.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer; the
/// handle is released with [`hn_cnn_free`].
#[no_mangle]
pub unsafe extern "C" fn hn_cnn_load(dir: *const c_char, out: *mut *mut HnCnn) -> HnStatus {
    guard(|| {
        let dir = path_arg(dir)?;
        let out = out_ptr(out, "out")?;
        let (checkpoint, rule) = pipeline::load_cnn(dir)?;
        *out = Box::into_raw(Box::new(HnCnn { checkpoint, rule }));
        Ok(())
    })
}

/// # Safety
/// `handle` must come from [`hn_cnn_load`] and not be used again; NULL is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn hn_cnn_free(handle: *mut HnCnn) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Classifies a recording by voting over its segments. `out_score` gets
/// the abnormal segment fraction.
///
/// # Safety
/// Handles must be live, `samples` must point to `len` doubles and the
/// output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn hn_cnn_classify(
    cnn: *const HnCnn,
    segmenter: *const HnSegmenter,
    samples: *const f64,
    len: usize,
    sample_rate: u32,
    out_score: *mut f64,
    out_label: *mut i32,
) -> HnStatus {
    guard(|| {
        let cnn = non_null(cnn, "cnn")?;
        let segmenter = non_null(segmenter, "segmenter")?;
        let x = samples_arg(samples, len)?;
        let score = out_ptr(out_score, "out_score")?;
        let label = out_ptr(out_label, "out_label")?;
        let processed = process(&segmenter.0, x, sample_rate)?;
        let (fraction, voted) = pipeline::cnn_predict(&cnn.checkpoint, cnn.rule, &processed)?
            .ok_or_else(|| fail(HnStatus::Unsegmentable, "no cardiac cycle of usable length"))?;
        *score = fraction;
        *label = voted.code();
        Ok(())
    })
}

/// Loads a model file written by `heartnet train-baseline`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer; the
/// handle is released with [`hn_baseline_free`].
#[no_mangle]
pub unsafe extern "C" fn hn_baseline_load(path: *const c_char, out: *mut *mut HnBaseline) -> HnStatus {
    guard(|| {
        let path = path_arg(path)?;
        let out = out_ptr(out, "out")?;
        *out = Box::into_raw(Box::new(HnBaseline(BaselineModel::load(path)?)));
        Ok(())
    })
}

/// # Safety
/// `handle` must come from [`hn_baseline_load`] and not be used again; NULL
/// is ignored.
#[no_mangle]
pub unsafe extern "C" fn hn_baseline_free(handle: *mut HnBaseline) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Classifies a recording from its cycle statistics. `out_score` gets the
/// model's abnormal score.
///
/// # Safety
/// Handles must be live, `samples` must point to `len` doubles and the
/// output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn hn_baseline_classify(
    model: *const HnBaseline,
    segmenter: *const HnSegmenter,
    samples: *const f64,
    len: usize,
    sample_rate: u32,
    out_score: *mut f64,
    out_label: *mut i32,
) -> HnStatus {
    guard(|| {
        let model = non_null(model, "model")?;
        let segmenter = non_null(segmenter, "segmenter")?;
        let x = samples_arg(samples, len)?;
        let score = out_ptr(out_score, "out_score")?;
        let label = out_ptr(out_label, "out_label")?;
        let processed = process(&segmenter.0, x, sample_rate)?;
        let (s, l) = model.0.predict(&processed.features()?);
        *score = s;
        *label = l.code();
        Ok(())
    })
}
