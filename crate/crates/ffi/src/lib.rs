//! C ABI for the b4ns supervisor.
//!
//! Every fallible entry point returns a [`B4nsStatus`]; on failure the
//! message is available from [`b4ns_last_error_message`] on the same thread.
//! Strings handed out through `out` parameters are owned by the caller and
//! released with [`b4ns_string_free`]. Structured values cross the boundary
//! as JSON.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::net::Ipv4Addr;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;

use b4ns::daemon::{ContainerSpec, Daemon, DaemonConfig, DaemonError, Isolation, MultinodeSetup};
use b4ns::multinode::MultinodeConfig;
use b4ns::socket_state::{classify_syscall, SyscallClass};
use b4ns::trace::{parse_trace, reconstruct, report, TraceError};

/// Result of every fallible call. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum B4nsStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidJson = 3,
    DuplicateContainer = 4,
    UnknownContainer = 5,
    AttachFailed = 6,
    InvalidSpec = 7,
    Setup = 8,
    EmptyTrace = 9,
    Io = 10,
    Panic = 11,
}

/// Class of a socket-related syscall; `NotHooked` for everything else.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum B4nsSyscallClass {
    NotHooked = 0,
    Creation = 1,
    Configuration = 2,
    Connection = 3,
    Status = 4,
    Derivation = 5,
    Communication = 6,
    Close = 7,
}

impl From<SyscallClass> for B4nsSyscallClass {
    fn from(c: SyscallClass) -> Self {
        match c {
            SyscallClass::Creation => Self::Creation,
            SyscallClass::Configuration => Self::Configuration,
            SyscallClass::Connection => Self::Connection,
            SyscallClass::Status => Self::Status,
            SyscallClass::Derivation => Self::Derivation,
            SyscallClass::Communication => Self::Communication,
            SyscallClass::Close => Self::Close,
        }
    }
}

/// Opaque handle to a running daemon.
pub struct B4nsDaemon {
    inner: Arc<Daemon>,
}

#[derive(Debug)]
struct FfiError {
    status: B4nsStatus,
    message: String,
}

impl FfiError {
    fn new(status: B4nsStatus, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }
}

impl From<DaemonError> for FfiError {
    fn from(e: DaemonError) -> Self {
        let status = match e {
            DaemonError::DuplicateContainer(_) => B4nsStatus::DuplicateContainer,
            DaemonError::UnknownContainer(_) => B4nsStatus::UnknownContainer,
            DaemonError::AttachFailed(_) => B4nsStatus::AttachFailed,
            DaemonError::InvalidSpec(_) => B4nsStatus::InvalidSpec,
            DaemonError::Setup(_) => B4nsStatus::Setup,
        };
        Self::new(status, e.to_string())
    }
}

impl From<TraceError> for FfiError {
    fn from(e: TraceError) -> Self {
        let status = match e {
            TraceError::EmptyTrace => B4nsStatus::EmptyTrace,
            TraceError::Io(_) => B4nsStatus::Io,
        };
        Self::new(status, e.to_string())
    }
}

impl From<serde_json::Error> for FfiError {
    fn from(e: serde_json::Error) -> Self {
        Self::new(B4nsStatus::InvalidJson, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).expect("interior NULs replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Runs `f`, converting errors and panics into a status and the thread's
/// last error.
fn guard(f: impl FnOnce() -> Result<(), FfiError>) -> B4nsStatus {
    let err = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => return B4nsStatus::Ok,
        Ok(Err(e)) => e,
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            FfiError::new(B4nsStatus::Panic, format!("panic: {msg}"))
        }
    };
    set_last_error(&err.message);
    err.status
}

/// # Safety
/// `p` is null or a NUL-terminated string valid for the call.
unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, FfiError> {
    if p.is_null() {
        return Err(FfiError::new(B4nsStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| FfiError::new(B4nsStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

/// # Safety
/// `out` is null or valid for one pointer write.
unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), FfiError> {
    if out.is_null() {
        return Err(FfiError::new(B4nsStatus::NullArgument, "out is null"));
    }
    let c = CString::new(s).map_err(|_| FfiError::new(B4nsStatus::InvalidJson, "output contains NUL"))?;
    *out = c.into_raw();
    Ok(())
}

unsafe fn daemon_ref<'a>(d: *const B4nsDaemon) -> Result<&'a B4nsDaemon, FfiError> {
    d.as_ref().ok_or_else(|| FfiError::new(B4nsStatus::NullArgument, "daemon is null"))
}

/// Daemon settings accepted by [`b4ns_daemon_new`].
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DaemonSettings {
    runtime_dir: PathBuf,
    #[serde(default)]
    isolation: Isolation,
    #[serde(default = "default_true")]
    probe: bool,
    #[serde(default)]
    supervisor_exe: Option<PathBuf>,
    #[serde(default)]
    handoff_timeout_secs: Option<u64>,
    #[serde(default)]
    multinode: Option<MultinodeSettings>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MultinodeSettings {
    /// Directory path or `http://` URL of the key-value store.
    kvs: String,
    node_id: String,
    node_addr: Ipv4Addr,
}

fn default_true() -> bool {
    true
}

impl DaemonSettings {
    fn into_config(self) -> DaemonConfig {
        let mut cfg = DaemonConfig::new(self.runtime_dir);
        if !self.probe {
            cfg.probe = None;
        }
        cfg.isolation = self.isolation;
        cfg.supervisor_exe = self.supervisor_exe;
        if let Some(s) = self.handoff_timeout_secs {
            cfg.handoff_timeout = Duration::from_secs(s);
        }
        cfg.multinode = self.multinode.map(|m| MultinodeSetup {
            config: MultinodeConfig::new(m.node_id, m.node_addr),
            endpoint: m.kvs,
        });
        cfg
    }
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn b4ns_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned through an `out` parameter. Null is ignored.
///
/// # Safety
/// `s` is null or a string obtained from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn b4ns_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version, statically allocated.
#[no_mangle]
pub extern "C" fn b4ns_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Classifies a syscall by name. Null and unknown names are `NotHooked`.
///
/// # Safety
/// `name` is null or a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn b4ns_classify_syscall(name: *const c_char) -> B4nsSyscallClass {
    match str_arg(name, "name") {
        Ok(n) => classify_syscall(n).map_or(B4nsSyscallClass::NotHooked, Into::into),
        Err(_) => B4nsSyscallClass::NotHooked,
    }
}

/// Lowercase name of a class, statically allocated.
#[no_mangle]
pub extern "C" fn b4ns_syscall_class_name(class: B4nsSyscallClass) -> *const c_char {
    let s: &'static str = match class {
        B4nsSyscallClass::NotHooked => "not-hooked\0",
        B4nsSyscallClass::Creation => "creation\0",
        B4nsSyscallClass::Configuration => "configuration\0",
        B4nsSyscallClass::Connection => "connection\0",
        B4nsSyscallClass::Status => "status\0",
        B4nsSyscallClass::Derivation => "derivation\0",
        B4nsSyscallClass::Communication => "communication\0",
        B4nsSyscallClass::Close => "close\0",
    };
    s.as_ptr().cast()
}

/// Reconstructs socket lifecycles from a JSONL trace and writes the report
/// as JSON to `out_json`.
///
/// # Safety
/// `trace_jsonl` is a NUL-terminated string; `out_json` is valid for one
/// pointer write.
#[no_mangle]
pub unsafe extern "C" fn b4ns_trace_analyze(trace_jsonl: *const c_char, out_json: *mut *mut c_char) -> B4nsStatus {
    guard(|| {
        let text = str_arg(trace_jsonl, "trace_jsonl")?;
        let parsed = parse_trace(text.as_bytes())?;
        let rep = report(&reconstruct(&parsed.events), parsed.skipped.len());
        put_string(out_json, rep.to_json())
    })
}

/// Creates a daemon from JSON settings:
/// `{"runtime_dir": "...", "isolation": "thread"|"process", "probe": bool,
/// "supervisor_exe": "...", "handoff_timeout_secs": n,
/// "multinode": {"kvs": "...", "node_id": "...", "node_addr": "a.b.c.d"}}`.
/// Only `runtime_dir` is required.
///
/// # Safety
/// `settings_json` is a NUL-terminated string; `out` is valid for one
/// pointer write.
#[no_mangle]
pub unsafe extern "C" fn b4ns_daemon_new(settings_json: *const c_char, out: *mut *mut B4nsDaemon) -> B4nsStatus {
    guard(|| {
        if out.is_null() {
            return Err(FfiError::new(B4nsStatus::NullArgument, "out is null"));
        }
        let settings: DaemonSettings = serde_json::from_str(str_arg(settings_json, "settings_json")?)?;
        let inner = Daemon::new(settings.into_config())?;
        *out = Box::into_raw(Box::new(B4nsDaemon { inner }));
        Ok(())
    })
}

/// Starts an instance for a JSON container spec and writes its status as
/// JSON to `out_status_json`.
///
/// # Safety
/// `d` comes from [`b4ns_daemon_new`]; `spec_json` is a NUL-terminated
/// string; `out_status_json` is valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn b4ns_daemon_start_instance(
    d: *const B4nsDaemon,
    spec_json: *const c_char,
    out_status_json: *mut *mut c_char,
) -> B4nsStatus {
    guard(|| {
        let d = daemon_ref(d)?;
        let spec: ContainerSpec = serde_json::from_str(str_arg(spec_json, "spec_json")?)?;
        let status = d.inner.start_instance(spec)?;
        put_string(out_status_json, serde_json::to_string(&status)?)
    })
}

/// Stops an instance; stopping a stopped instance succeeds.
///
/// # Safety
/// As for [`b4ns_daemon_start_instance`].
#[no_mangle]
pub unsafe extern "C" fn b4ns_daemon_stop_instance(
    d: *const B4nsDaemon,
    container_id: *const c_char,
    out_status_json: *mut *mut c_char,
) -> B4nsStatus {
    guard(|| {
        let d = daemon_ref(d)?;
        let status = d.inner.stop_instance(str_arg(container_id, "container_id")?)?;
        put_string(out_status_json, serde_json::to_string(&status)?)
    })
}

/// Writes a JSON array of instance statuses. A null `container_id` lists
/// every instance.
///
/// # Safety
/// As for [`b4ns_daemon_start_instance`]; `container_id` may be null.
#[no_mangle]
pub unsafe extern "C" fn b4ns_daemon_status(
    d: *const B4nsDaemon,
    container_id: *const c_char,
    out_json: *mut *mut c_char,
) -> B4nsStatus {
    guard(|| {
        let d = daemon_ref(d)?;
        let id = if container_id.is_null() { None } else { Some(str_arg(container_id, "container_id")?) };
        let all = d.inner.status(id)?;
        put_string(out_json, serde_json::to_string(&all)?)
    })
}

/// Stops every instance and releases the handle. Null is ignored.
///
/// # Safety
/// `d` is null or comes from [`b4ns_daemon_new`], freed once.
#[no_mangle]
pub unsafe extern "C" fn b4ns_daemon_free(d: *mut B4nsDaemon) {
    if d.is_null() {
        return;
    }
    let d = Box::from_raw(d);
    let _ = catch_unwind(AssertUnwindSafe(|| d.inner.shutdown()));
}
