//! C interface to `abmll`.
//!
//! Every function returns an [`AbmllStatus`]. On failure a message is kept
//! per thread and can be read with [`abmll_last_error`]. Checkpoints are
//! exposed as an opaque handle that the caller frees with
//! [`abmll_checkpoint_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use abmll::cli::commands::{cmd_metatrain, cmd_pretrain};
use abmll::cli::Checkpoint;
use abmll::metatrain::Method;
use abmll::metrics::{ece, evaluate_suite, PredictionRecord};
use abmll::Error;

/// Result codes; the nonzero values match the command-line exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AbmllStatus {
    AbmllOk = 0,
    /// Numerical or I/O failure.
    AbmllErrOther = 1,
    /// Bad configuration or arguments, including null pointers.
    AbmllErrConfig = 2,
    /// Unreadable or inconsistent data files.
    AbmllErrData = 3,
    /// Corrupt or mismatched checkpoint.
    AbmllErrIntegrity = 4,
}

/// Opaque loaded checkpoint.
pub struct AbmllCheckpoint {
    inner: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> AbmllStatus {
    match e.exit_code() {
        2 => AbmllStatus::AbmllErrConfig,
        3 => AbmllStatus::AbmllErrData,
        4 => AbmllStatus::AbmllErrIntegrity,
        _ => AbmllStatus::AbmllErrOther,
    }
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Error>) -> AbmllStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AbmllStatus::AbmllOk,
        Ok(Err(e)) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            AbmllStatus::AbmllErrOther
        }
    }
}

fn usage(msg: &str) -> Error {
    Error::Config(msg.to_string())
}

/// # Safety
/// `s` is null or a valid nul-terminated string.
unsafe fn opt_str<'a>(s: *const c_char, what: &str) -> Result<Option<&'a str>, Error> {
    if s.is_null() {
        return Ok(None);
    }
    CStr::from_ptr(s)
        .to_str()
        .map(Some)
        .map_err(|_| usage(&format!("{what} is not valid UTF-8")))
}

/// # Safety
/// `s` is null or a valid nul-terminated string.
unsafe fn req_str<'a>(s: *const c_char, what: &str) -> Result<&'a str, Error> {
    opt_str(s, what)?.ok_or_else(|| usage(&format!("{what} is null")))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn abmll_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Pretrains a base model as configured and writes `base.ckpt` into
/// `out_dir`.
///
/// # Safety
/// Both arguments are valid nul-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn abmll_pretrain(config_path: *const c_char, out_dir: *const c_char) -> AbmllStatus {
    guard(|| {
        let config = req_str(config_path, "config_path")?;
        let out = req_str(out_dir, "out_dir")?;
        cmd_pretrain(config.as_ref(), out.as_ref()).map(|_| ())
    })
}

/// Meta-trains from a base checkpoint. `method` overrides the configured
/// method and `resume` names a run checkpoint to continue; both may be
/// null.
///
/// # Safety
/// Non-null arguments are valid nul-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn abmll_metatrain(
    config_path: *const c_char,
    base_checkpoint: *const c_char,
    method: *const c_char,
    resume: *const c_char,
    out_dir: *const c_char,
) -> AbmllStatus {
    guard(|| {
        let config = req_str(config_path, "config_path")?;
        let base = req_str(base_checkpoint, "base_checkpoint")?;
        let method = opt_str(method, "method")?;
        let resume = opt_str(resume, "resume")?.map(PathBuf::from);
        let out = req_str(out_dir, "out_dir")?;
        cmd_metatrain(config.as_ref(), base.as_ref(), method, resume.as_deref(), out.as_ref()).map(|_| ())
    })
}

/// Loads and verifies a checkpoint file.
///
/// # Safety
/// `path` is a valid nul-terminated string and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn abmll_checkpoint_open(path: *const c_char, out: *mut *mut AbmllCheckpoint) -> AbmllStatus {
    guard(|| {
        if out.is_null() {
            return Err(usage("out is null"));
        }
        let path = req_str(path, "path")?;
        let inner = Checkpoint::load(path.as_ref())?;
        *out = Box::into_raw(Box::new(AbmllCheckpoint { inner }));
        Ok(())
    })
}

/// Releases a handle from [`abmll_checkpoint_open`]; null is ignored.
///
/// # Safety
/// `handle` is null or an unfreed handle from this library.
#[no_mangle]
pub unsafe extern "C" fn abmll_checkpoint_free(handle: *mut AbmllCheckpoint) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// # Safety
/// `handle` is null or a live handle.
unsafe fn checkpoint<'a>(handle: *const AbmllCheckpoint) -> Result<&'a Checkpoint, Error> {
    handle.as_ref().map(|h| &h.inner).ok_or_else(|| usage("checkpoint handle is null"))
}

/// Reported epochs completed (0 for a base-only checkpoint) and the number
/// of trained adapter parameters (0 when there are none).
///
/// # Safety
/// `handle` is a live handle; the output pointers are writable.
#[no_mangle]
pub unsafe extern "C" fn abmll_checkpoint_info(
    handle: *const AbmllCheckpoint,
    epochs: *mut usize,
    adapter_params: *mut usize,
) -> AbmllStatus {
    guard(|| {
        let ck = checkpoint(handle)?;
        if epochs.is_null() || adapter_params.is_null() {
            return Err(usage("output pointer is null"));
        }
        let run = ck.run.as_ref();
        *epochs = run.map_or(0, |r| r.history.len());
        *adapter_params = run.map_or(0, |r| r.global.param_count());
        Ok(())
    })
}

/// Adapts the checkpoint's posture to each held-out task of the suite
/// generated from `suite_seed` and reports pooled accuracy and ECE.
///
/// # Safety
/// `handle` is a live handle; the output pointers are writable.
#[no_mangle]
pub unsafe extern "C" fn abmll_checkpoint_evaluate(
    handle: *const AbmllCheckpoint,
    suite_seed: u64,
    adapt_steps: usize,
    accuracy: *mut f64,
    calibration_error: *mut f64,
) -> AbmllStatus {
    guard(|| {
        let ck = checkpoint(handle)?;
        if accuracy.is_null() || calibration_error.is_null() {
            return Err(usage("output pointer is null"));
        }
        let mut cfg = ck.config.clone();
        cfg.train.eval_steps = adapt_steps;
        let fresh;
        let global = match ck.run.as_ref() {
            Some(run) => &run.global,
            None => {
                fresh = abmll::metatrain::init_posture(&ck.base, Method::RegularLora, cfg.train.c, cfg.train.seed)?;
                &fresh
            }
        };
        let suite = abmll::cli::commands::suite_for(&cfg, suite_seed)?;
        let s = evaluate_suite(&ck.base, global, &suite.unseen, &cfg.train)?;
        *accuracy = s.accuracy;
        *calibration_error = s.ece;
        Ok(())
    })
}

/// Expected calibration error over `n` predictions with `bins` equal-width
/// confidence bins. `correct[i]` is nonzero for a right answer.
///
/// # Safety
/// `confidence` and `correct` point to `n` readable elements; `out` is
/// writable.
#[no_mangle]
pub unsafe extern "C" fn abmll_ece(
    confidence: *const f64,
    correct: *const u8,
    n: usize,
    bins: usize,
    out: *mut f64,
) -> AbmllStatus {
    guard(|| {
        if confidence.is_null() || correct.is_null() || out.is_null() {
            return Err(usage("null pointer argument"));
        }
        let conf = std::slice::from_raw_parts(confidence, n);
        let ok = std::slice::from_raw_parts(correct, n);
        let records: Vec<PredictionRecord> = conf
            .iter()
            .zip(ok)
            .enumerate()
            .map(|(i, (&c, &k))| PredictionRecord {
                example_id: i,
                chosen: 0,
                confidence: c,
                correct: k != 0,
                n_options: 2,
            })
            .collect();
        *out = ece(&records, bins)?.0;
        Ok(())
    })
}
