//! C interface to trained learners and the log-mel front end.
//!
//! Every fallible function returns an [`IaStatus`]; on failure a message is
//! kept per thread and can be read with [`ia_last_error_message`]. Handles
//! are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use incremental_audio::features::{MelExtractor, N_MELS};
use incremental_audio::losses::adaptive_lambda;
use incremental_audio::model::{Checkpoint, Learner};
use incremental_audio::tensor::Tensor;
use incremental_audio::Error;

/// Result codes. Values are stable.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    BufferTooSmall = 3,
    Dimension = 10,
    Contract = 11,
    Parameter = 12,
    Configuration = 13,
    Format = 14,
    Manifest = 15,
    Registry = 16,
    IndlViolation = 17,
    Label = 18,
    NonFinite = 19,
    Io = 20,
    Panic = 99,
}

impl From<&Error> for IaStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Dimension(_) => IaStatus::Dimension,
            Error::Contract(_) => IaStatus::Contract,
            Error::Parameter(_) => IaStatus::Parameter,
            Error::Configuration(_) => IaStatus::Configuration,
            Error::Format { .. } => IaStatus::Format,
            Error::Manifest { .. } => IaStatus::Manifest,
            Error::Registry(_) => IaStatus::Registry,
            Error::IndlViolation(_) => IaStatus::IndlViolation,
            Error::Label(_) => IaStatus::Label,
            Error::NonFinite { .. } => IaStatus::NonFinite,
            Error::Io { .. } => IaStatus::Io,
        }
    }
}

/// A trained learner loaded from a checkpoint.
pub struct IaLearner {
    inner: Learner<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: IaStatus, msg: impl Into<String>) -> IaStatus {
    set_error(msg.into());
    status
}

fn guard(f: impl FnOnce() -> Result<(), IaStatus>) -> IaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => IaStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(IaStatus::Panic, "internal panic"),
    }
}

fn lib(e: Error) -> IaStatus {
    let status = IaStatus::from(&e);
    fail(status, e.to_string())
}

/// Message of the last failure on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ia_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint file. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ia_learner_load(path: *const c_char, out: *mut *mut IaLearner) -> IaStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return Err(fail(IaStatus::NullPointer, "path and out must be non-null"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(IaStatus::InvalidUtf8, "path is not UTF-8"))?;
        let ckpt = Checkpoint::<f32>::read(Path::new(path)).map_err(lib)?;
        *out = Box::into_raw(Box::new(IaLearner {
            inner: ckpt.learner,
        }));
        Ok(())
    })
}

/// Releases a handle. NULL is ignored.
///
/// # Safety
/// `learner` must come from [`ia_learner_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ia_learner_free(learner: *mut IaLearner) {
    if !learner.is_null() {
        drop(Box::from_raw(learner));
    }
}

/// # Safety
/// `learner` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ia_learner_num_classes(learner: *const IaLearner, out: *mut usize) -> IaStatus {
    guard(|| {
        let l = learner
            .as_ref()
            .ok_or_else(|| fail(IaStatus::NullPointer, "learner is null"))?;
        let out = out
            .as_mut()
            .ok_or_else(|| fail(IaStatus::NullPointer, "out is null"))?;
        *out = l.inner.num_classes();
        Ok(())
    })
}

/// Input geometry expected by [`ia_learner_predict`].
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ia_learner_input_shape(
    learner: *const IaLearner,
    n_mels: *mut usize,
    n_frames: *mut usize,
) -> IaStatus {
    guard(|| {
        let l = learner
            .as_ref()
            .ok_or_else(|| fail(IaStatus::NullPointer, "learner is null"))?;
        if n_mels.is_null() || n_frames.is_null() {
            return Err(fail(IaStatus::NullPointer, "output pointers must be non-null"));
        }
        let spec = l.inner.input_spec();
        *n_mels = spec.n_mels;
        *n_frames = spec.n_frames;
        Ok(())
    })
}

/// Eval-mode logits. `features` holds `batch` examples laid out
/// `[batch][n_mels][n_frames]`; `logits` receives `[batch][num_classes]`.
///
/// # Safety
/// `features` must point to `features_len` floats and `logits` to
/// `logits_len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn ia_learner_predict(
    learner: *const IaLearner,
    features: *const f32,
    features_len: usize,
    batch: usize,
    logits: *mut f32,
    logits_len: usize,
) -> IaStatus {
    guard(|| {
        let l = learner
            .as_ref()
            .ok_or_else(|| fail(IaStatus::NullPointer, "learner is null"))?;
        if features.is_null() || logits.is_null() {
            return Err(fail(IaStatus::NullPointer, "buffers must be non-null"));
        }
        let spec = l.inner.input_spec();
        let need = batch * spec.n_mels * spec.n_frames;
        if features_len != need {
            return Err(fail(
                IaStatus::Dimension,
                format!("expected {need} feature values, got {features_len}"),
            ));
        }
        let c = l.inner.num_classes();
        if logits_len < batch * c {
            return Err(fail(
                IaStatus::BufferTooSmall,
                format!("logits buffer holds {logits_len}, need {}", batch * c),
            ));
        }
        let data = std::slice::from_raw_parts(features, features_len).to_vec();
        let x = Tensor::new(vec![batch, 1, spec.n_mels, spec.n_frames], data).map_err(lib)?;
        let y = l.inner.infer(&x).map_err(lib)?;
        std::slice::from_raw_parts_mut(logits, batch * c).copy_from_slice(y.data());
        Ok(())
    })
}

/// 40-band log-mel energies of mono PCM in `[-1, 1]`, written
/// `[n_frames][40]`. Call with `out == NULL` to query `*n_frames` only.
///
/// # Safety
/// `samples` must point to `n_samples` floats; `out`, when non-null, to
/// `out_len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn ia_extract_log_mel(
    samples: *const f32,
    n_samples: usize,
    sample_rate_hz: u32,
    out: *mut f32,
    out_len: usize,
    n_frames: *mut usize,
) -> IaStatus {
    guard(|| {
        if samples.is_null() || n_frames.is_null() {
            return Err(fail(IaStatus::NullPointer, "samples and n_frames must be non-null"));
        }
        let ex = MelExtractor::new(sample_rate_hz, N_MELS).map_err(lib)?;
        let frames = ex.framing().frame_count(n_samples).map_err(lib)?;
        *n_frames = frames;
        if out.is_null() {
            return Ok(());
        }
        if out_len < frames * N_MELS {
            return Err(fail(
                IaStatus::BufferTooSmall,
                format!("output holds {out_len}, need {}", frames * N_MELS),
            ));
        }
        let fm = ex
            .extract(std::slice::from_raw_parts(samples, n_samples))
            .map_err(lib)?;
        std::slice::from_raw_parts_mut(out, fm.data.len()).copy_from_slice(&fm.data);
        Ok(())
    })
}

/// Distillation weight `omega * sqrt((total - old) / total)`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ia_adaptive_lambda(
    total_classes: usize,
    old_classes: usize,
    omega: f64,
    out: *mut f64,
) -> IaStatus {
    guard(|| {
        let out = out
            .as_mut()
            .ok_or_else(|| fail(IaStatus::NullPointer, "out is null"))?;
        *out = adaptive_lambda(total_classes, old_classes, omega).map_err(lib)?;
        Ok(())
    })
}
