//! C ABI over the dolma runtime.
//!
//! Every entry point returns a [`DolmaStatus`]; on failure the message is kept
//! per thread and can be fetched with [`dolma_last_error`]. Object handles are
//! the runtime's 64-bit handles and pass through unchanged. Panics never cross
//! the boundary, they come back as `DOLMA_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use dolma::checkpoint::{self, CheckpointError, Checkpointer};
use dolma::fabric::sim::SimFabric;
use dolma::fabric::tcp::TcpFabric;
use dolma::fabric::{Fabric, FabricError, LatencyModel};
use dolma::runtime::{ObjectHandle, RegionLayout, Runtime, RuntimeConfig, RuntimeError};

/// Result of every call.
#[repr(C)]
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum DolmaStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    UnknownObject = 3,
    OutOfRange = 4,
    CacheFull = 5,
    RemoteOom = 6,
    Fabric = 7,
    Checkpoint = 8,
    Io = 9,
    Panic = 10,
}

/// A runtime plus the checkpoint epoch state that goes with it.
pub struct DolmaRuntime {
    rt: Runtime,
    ckpt: Checkpointer,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn fabric_status(e: &FabricError) -> DolmaStatus {
    match e {
        FabricError::RemoteOom { .. } => DolmaStatus::RemoteOom,
        FabricError::Io(_) => DolmaStatus::Io,
        _ => DolmaStatus::Fabric,
    }
}

fn runtime_status(e: &RuntimeError) -> DolmaStatus {
    match e {
        RuntimeError::UnknownObject(_) => DolmaStatus::UnknownObject,
        RuntimeError::OutOfRange { .. } => DolmaStatus::OutOfRange,
        RuntimeError::CacheFull { .. } => DolmaStatus::CacheFull,
        RuntimeError::Fabric(f) => fabric_status(f),
        RuntimeError::RemoteOp { .. } => DolmaStatus::Fabric,
        _ => DolmaStatus::InvalidArgument,
    }
}

fn checkpoint_status(e: &CheckpointError) -> DolmaStatus {
    match e {
        CheckpointError::Io(_) => DolmaStatus::Io,
        CheckpointError::Runtime(r) => runtime_status(r),
        CheckpointError::Fabric(f) => fabric_status(f),
        _ => DolmaStatus::Checkpoint,
    }
}

struct Failure(DolmaStatus, String);

impl From<RuntimeError> for Failure {
    fn from(e: RuntimeError) -> Self {
        Failure(runtime_status(&e), e.to_string())
    }
}

impl From<FabricError> for Failure {
    fn from(e: FabricError) -> Self {
        Failure(fabric_status(&e), e.to_string())
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        Failure(checkpoint_status(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(DolmaStatus::NullArgument, format!("{what} is null"))
}

/// Runs `f`, records any failure and turns panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DolmaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DolmaStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(msg);
            DolmaStatus::Panic
        }
    }
}

unsafe fn runtime<'a>(rt: *mut DolmaRuntime) -> Result<&'a mut DolmaRuntime, Failure> {
    rt.as_mut().ok_or_else(|| null("runtime"))
}

unsafe fn path<'a>(p: *const c_char) -> Result<&'a Path, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(DolmaStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(Path::new(s))
}

fn build(fabric: Arc<dyn Fabric>, local: u64, cache: u64, metadata: u64) -> Result<Box<DolmaRuntime>, Failure> {
    let layout = RegionLayout::new(local, cache, metadata)?;
    let rt = Runtime::new(RuntimeConfig::new(layout), fabric)?;
    Ok(Box::new(DolmaRuntime {
        rt,
        ckpt: Checkpointer::new(),
    }))
}

/// Creates a runtime over an in-process simulated fabric of
/// `remote_capacity` bytes, timed by the default latency profile.
///
/// # Safety
/// `out` must be valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn dolma_runtime_new_sim(
    local_bytes: u64,
    cache_bytes: u64,
    metadata_bytes: u64,
    remote_capacity: u64,
    out: *mut *mut DolmaRuntime,
) -> DolmaStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let fabric = Arc::new(SimFabric::new(remote_capacity, LatencyModel::default()));
        *out = Box::into_raw(build(fabric, local_bytes, cache_bytes, metadata_bytes)?);
        Ok(())
    })
}

/// Creates a runtime backed by a memory node at `addr` ("host:port").
///
/// # Safety
/// `addr` must be a NUL-terminated string and `out` valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn dolma_runtime_connect(
    addr: *const c_char,
    local_bytes: u64,
    cache_bytes: u64,
    metadata_bytes: u64,
    out: *mut *mut DolmaRuntime,
) -> DolmaStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if addr.is_null() {
            return Err(null("addr"));
        }
        let addr = CStr::from_ptr(addr)
            .to_str()
            .map_err(|_| Failure(DolmaStatus::InvalidArgument, "addr is not UTF-8".into()))?;
        let fabric = Arc::new(TcpFabric::connect(addr, LatencyModel::default())?);
        *out = Box::into_raw(build(fabric, local_bytes, cache_bytes, metadata_bytes)?);
        Ok(())
    })
}

/// Destroys a runtime. Null is ignored.
///
/// # Safety
/// `rt` must come from a constructor above and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dolma_runtime_free(rt: *mut DolmaRuntime) {
    if !rt.is_null() {
        drop(Box::from_raw(rt));
    }
}

/// Allocates an object of `size` bytes and stores its handle in `out`.
///
/// # Safety
/// `rt` must be a live runtime and `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn dolma_alloc(rt: *mut DolmaRuntime, size: u64, out: *mut u64) -> DolmaStatus {
    guard(|| {
        let d = runtime(rt)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = d.rt.alloc(size)?.0;
        Ok(())
    })
}

/// Frees an object.
///
/// # Safety
/// `rt` must be a live runtime.
#[no_mangle]
pub unsafe extern "C" fn dolma_free(rt: *mut DolmaRuntime, handle: u64) -> DolmaStatus {
    guard(|| Ok(runtime(rt)?.rt.free(ObjectHandle(handle))?))
}

/// Whether the handle was remote when it was issued.
#[no_mangle]
pub extern "C" fn dolma_handle_is_remote(handle: u64) -> bool {
    ObjectHandle(handle).is_remote()
}

/// Copies `len` bytes from `data` into the object at `offset`.
///
/// # Safety
/// `rt` must be a live runtime and `data` readable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn dolma_write(rt: *mut DolmaRuntime, handle: u64, offset: u64, data: *const u8, len: usize) -> DolmaStatus {
    guard(|| {
        let d = runtime(rt)?;
        let bytes = if len == 0 {
            &[][..]
        } else if data.is_null() {
            return Err(null("data"));
        } else {
            std::slice::from_raw_parts(data, len)
        };
        Ok(d.rt.write(ObjectHandle(handle), offset, bytes)?)
    })
}

/// Reads `len` bytes of the object at `offset` into `out`, waiting for any
/// remote transfer.
///
/// # Safety
/// `rt` must be a live runtime and `out` writable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn dolma_read(rt: *mut DolmaRuntime, handle: u64, offset: u64, out: *mut u8, len: usize) -> DolmaStatus {
    guard(|| {
        let d = runtime(rt)?;
        let buf = if len == 0 {
            &mut [][..]
        } else if out.is_null() {
            return Err(null("out"));
        } else {
            std::slice::from_raw_parts_mut(out, len)
        };
        Ok(d.rt.read_sync(ObjectHandle(handle), offset, buf)?)
    })
}

/// Moves an object to remote memory, or drops its cached copies.
///
/// # Safety
/// `rt` must be a live runtime.
#[no_mangle]
pub unsafe extern "C" fn dolma_demote(rt: *mut DolmaRuntime, handle: u64) -> DolmaStatus {
    guard(|| Ok(runtime(rt)?.rt.demote(ObjectHandle(handle))?))
}

/// Writes back dirty cached data and waits for it.
///
/// # Safety
/// `rt` must be a live runtime.
#[no_mangle]
pub unsafe extern "C" fn dolma_flush(rt: *mut DolmaRuntime) -> DolmaStatus {
    guard(|| Ok(runtime(rt)?.rt.flush()?))
}

/// Charges `us` microseconds of local computation to the runtime clock.
///
/// # Safety
/// `rt` must be a live runtime.
#[no_mangle]
pub unsafe extern "C" fn dolma_compute(rt: *mut DolmaRuntime, us: f64) -> DolmaStatus {
    guard(|| {
        if !(us.is_finite() && us >= 0.0) {
            return Err(Failure(
                DolmaStatus::InvalidArgument,
                format!("compute time {us} is not a duration"),
            ));
        }
        runtime(rt)?.rt.compute(us);
        Ok(())
    })
}

/// Current runtime clock in microseconds.
///
/// # Safety
/// `rt` must be a live runtime and `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn dolma_now_us(rt: *mut DolmaRuntime, out: *mut f64) -> DolmaStatus {
    guard(|| {
        let d = runtime(rt)?;
        *out.as_mut().ok_or_else(|| null("out"))? = d.rt.now_us();
        Ok(())
    })
}

/// Peak local bytes in use so far and the number of times the budget was
/// exceeded.
///
/// # Safety
/// `rt` must be a live runtime; the out pointers must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dolma_usage(rt: *mut DolmaRuntime, peak_local_bytes: *mut u64, capacity_violations: *mut u64) -> DolmaStatus {
    guard(|| {
        let st = runtime(rt)?.rt.stats();
        *peak_local_bytes.as_mut().ok_or_else(|| null("peak_local_bytes"))? = st.peak_local_bytes;
        *capacity_violations.as_mut().ok_or_else(|| null("capacity_violations"))? = st.capacity_violations;
        Ok(())
    })
}

/// Writes a checkpoint to `path`. Objects unchanged since the previous
/// checkpoint of this runtime are carried forward by reference.
///
/// # Safety
/// `rt` must be a live runtime and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dolma_checkpoint(rt: *mut DolmaRuntime, path: *const c_char) -> DolmaStatus {
    guard(|| {
        let d = runtime(rt)?;
        let p = self::path(path)?;
        d.ckpt.checkpoint(&mut d.rt, p)?;
        Ok(())
    })
}

/// Restores objects from a checkpoint into an empty runtime. Handles keep
/// their values from the checkpointed run.
///
/// # Safety
/// `rt` must be a live runtime and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dolma_recover(rt: *mut DolmaRuntime, path: *const c_char) -> DolmaStatus {
    guard(|| {
        let d = runtime(rt)?;
        checkpoint::recover(self::path(path)?, &mut d.rt)?;
        Ok(())
    })
}

/// Copies the calling thread's last error message into `buf` as a
/// NUL-terminated string, truncating to fit. Returns the full message length
/// without the terminator.
///
/// # Safety
/// `buf` must be writable for `cap` bytes, or null with `cap` zero.
#[no_mangle]
pub unsafe extern "C" fn dolma_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Static name of a status code.
#[no_mangle]
pub extern "C" fn dolma_status_name(status: DolmaStatus) -> *const c_char {
    let s: &'static CStr = match status {
        DolmaStatus::Ok => c"ok",
        DolmaStatus::NullArgument => c"null argument",
        DolmaStatus::InvalidArgument => c"invalid argument",
        DolmaStatus::UnknownObject => c"unknown object",
        DolmaStatus::OutOfRange => c"out of range",
        DolmaStatus::CacheFull => c"cache full",
        DolmaStatus::RemoteOom => c"remote out of memory",
        DolmaStatus::Fabric => c"fabric error",
        DolmaStatus::Checkpoint => c"checkpoint error",
        DolmaStatus::Io => c"i/o error",
        DolmaStatus::Panic => c"panic",
    };
    s.as_ptr()
}
