//! C interface. Configs and runs are opaque handles owned by the caller and
//! released with the matching `_free` function. Every fallible call returns an
//! `MsStatus`; the message of the most recent failure on the calling thread is
//! available from `ms_last_error`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use mpcsieve::config::{ExperimentConfig, Variant};
use mpcsieve::pipeline::{self, RunReport};
use mpcsieve::{Category, Error};

/// Status codes. Nonzero values other than the last three match the CLI exit
/// codes for the same error category.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MsStatus {
    Ok = 0,
    Config = 2,
    Io = 3,
    Protocol = 4,
    Numeric = 5,
    Training = 6,
    Privacy = 7,
    NullArgument = 20,
    InvalidUtf8 = 21,
    Panic = 22,
}

impl From<Category> for MsStatus {
    fn from(c: Category) -> Self {
        match c {
            Category::Config => MsStatus::Config,
            Category::Io => MsStatus::Io,
            Category::Protocol => MsStatus::Protocol,
            Category::Numeric => MsStatus::Numeric,
            Category::Training => MsStatus::Training,
            Category::Privacy => MsStatus::Privacy,
        }
    }
}

/// Experiment configuration.
pub struct MsConfig {
    inner: ExperimentConfig,
}

/// Result of one selection run.
pub struct MsRun {
    report: RunReport,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: MsStatus, msg: String) -> MsStatus {
    set_error(msg);
    status
}

fn from_error(e: Error) -> MsStatus {
    let s = MsStatus::from(e.category());
    fail(s, e.to_string())
}

/// Runs `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), MsStatus>) -> MsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MsStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(MsStatus::Panic, msg)
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, MsStatus> {
    if p.is_null() {
        return Err(fail(MsStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(MsStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn cfg_ref<'a>(c: *const MsConfig) -> Result<&'a MsConfig, MsStatus> {
    c.as_ref()
        .ok_or_else(|| fail(MsStatus::NullArgument, "config handle is null".into()))
}

unsafe fn cfg_mut<'a>(c: *mut MsConfig) -> Result<&'a mut MsConfig, MsStatus> {
    c.as_mut()
        .ok_or_else(|| fail(MsStatus::NullArgument, "config handle is null".into()))
}

unsafe fn run_ref<'a>(r: *const MsRun) -> Option<&'a MsRun> {
    r.as_ref()
}

fn emit<T>(out: *mut *mut T, v: T) -> Result<(), MsStatus> {
    if out.is_null() {
        return Err(fail(MsStatus::NullArgument, "output pointer is null".into()));
    }
    unsafe { *out = Box::into_raw(Box::new(v)) };
    Ok(())
}

/// Message of the last failure on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ms_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Default configuration.
#[no_mangle]
pub extern "C" fn ms_config_default() -> *mut MsConfig {
    Box::into_raw(Box::new(MsConfig {
        inner: ExperimentConfig::default(),
    }))
}

/// Parses config text.
///
/// # Safety
/// `text` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ms_config_parse(text: *const c_char, out: *mut *mut MsConfig) -> MsStatus {
    guard(|| {
        let t = str_arg(text, "text")?;
        let inner = ExperimentConfig::parse(t).map_err(from_error)?;
        emit(out, MsConfig { inner })
    })
}

/// Loads a config file.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ms_config_load(path: *const c_char, out: *mut *mut MsConfig) -> MsStatus {
    guard(|| {
        let p = str_arg(path, "path")?;
        let inner = ExperimentConfig::load(&PathBuf::from(p)).map_err(from_error)?;
        emit(out, MsConfig { inner })
    })
}

/// Serializes the config in the file grammar. Free the result with
/// `ms_string_free`. Returns NULL for a NULL handle.
///
/// # Safety
/// `cfg` must be NULL or a live config handle.
#[no_mangle]
pub unsafe extern "C" fn ms_config_to_text(cfg: *const MsConfig) -> *mut c_char {
    match cfg.as_ref() {
        Some(c) => CString::new(c.inner.to_text()).map_or(ptr::null_mut(), CString::into_raw),
        None => ptr::null_mut(),
    }
}

/// # Safety
/// `cfg` must be a live config handle.
#[no_mangle]
pub unsafe extern "C" fn ms_config_set_seed(cfg: *mut MsConfig, seed: u64) -> MsStatus {
    guard(|| {
        cfg_mut(cfg)?.inner.seed = seed;
        Ok(())
    })
}

/// Working directory for inputs and outputs.
///
/// # Safety
/// `cfg` must be a live config handle and `dir` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ms_config_set_out(cfg: *mut MsConfig, dir: *const c_char) -> MsStatus {
    guard(|| {
        let c = cfg_mut(cfg)?;
        c.inner.out = PathBuf::from(str_arg(dir, "dir")?);
        Ok(())
    })
}

/// One of "P", "PM", "PMT", "full".
///
/// # Safety
/// `cfg` must be a live config handle and `name` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ms_config_set_variant(cfg: *mut MsConfig, name: *const c_char) -> MsStatus {
    guard(|| {
        let c = cfg_mut(cfg)?;
        c.inner.variant = str_arg(name, "variant")?.parse::<Variant>().map_err(from_error)?;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be a live config handle.
#[no_mangle]
pub unsafe extern "C" fn ms_config_validate(cfg: *const MsConfig) -> MsStatus {
    guard(|| cfg_ref(cfg)?.inner.validate().map_err(from_error))
}

/// # Safety
/// `cfg` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ms_config_free(cfg: *mut MsConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Writes the seeded model and dataset into the working directory.
///
/// # Safety
/// `cfg` must be a live config handle.
#[no_mangle]
pub unsafe extern "C" fn ms_gen(cfg: *const MsConfig) -> MsStatus {
    guard(|| {
        let c = &cfg_ref(cfg)?.inner;
        c.validate().map_err(from_error)?;
        pipeline::cmd_gen(c).map(drop).map_err(from_error)
    })
}

/// Builds and trains every phase's proxy.
///
/// # Safety
/// `cfg` must be a live config handle.
#[no_mangle]
pub unsafe extern "C" fn ms_train_approx(cfg: *const MsConfig) -> MsStatus {
    guard(|| {
        let c = &cfg_ref(cfg)?.inner;
        c.validate().map_err(from_error)?;
        pipeline::cmd_train_approx(c).map(drop).map_err(from_error)
    })
}

/// Runs selection with the configured variant, writes its outputs and
/// returns the run.
///
/// # Safety
/// `cfg` must be a live config handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ms_select(cfg: *const MsConfig, out: *mut *mut MsRun) -> MsStatus {
    guard(|| {
        let c = &cfg_ref(cfg)?.inner;
        c.validate().map_err(from_error)?;
        let run = pipeline::cmd_select(c).map_err(from_error)?;
        emit(out, MsRun { report: run.report })
    })
}

/// Number of selected indices; 0 for a NULL handle.
///
/// # Safety
/// `run` must be NULL or a live run handle.
#[no_mangle]
pub unsafe extern "C" fn ms_run_selected_len(run: *const MsRun) -> usize {
    run_ref(run).map_or(0, |r| r.report.selected.len())
}

/// Copies up to `cap` selected indices into `buf` and returns how many were
/// copied.
///
/// # Safety
/// `run` must be NULL or a live run handle; `buf` must hold `cap` values.
#[no_mangle]
pub unsafe extern "C" fn ms_run_selected(run: *const MsRun, buf: *mut u64, cap: usize) -> usize {
    let Some(r) = run_ref(run) else { return 0 };
    if buf.is_null() {
        return 0;
    }
    let n = r.report.selected.len().min(cap);
    for (i, &v) in r.report.selected[..n].iter().enumerate() {
        *buf.add(i) = v as u64;
    }
    n
}

/// # Safety
/// `run` must be NULL or a live run handle.
#[no_mangle]
pub unsafe extern "C" fn ms_run_rounds(run: *const MsRun) -> u64 {
    run_ref(run).map_or(0, |r| r.report.rounds)
}

/// # Safety
/// `run` must be NULL or a live run handle.
#[no_mangle]
pub unsafe extern "C" fn ms_run_bytes(run: *const MsRun) -> u64 {
    run_ref(run).map_or(0, |r| r.report.bytes)
}

/// Simulated end-to-end seconds.
///
/// # Safety
/// `run` must be NULL or a live run handle.
#[no_mangle]
pub unsafe extern "C" fn ms_run_seconds(run: *const MsRun) -> f64 {
    run_ref(run).map_or(0.0, |r| r.report.simulated_seconds)
}

/// # Safety
/// `run` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ms_run_free(run: *mut MsRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// # Safety
/// `s` must be NULL or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ms_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
