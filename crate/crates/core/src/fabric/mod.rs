//! One-sided remote memory operations.
//!
//! A [`Fabric`] hands out [`Channel`]s (queue pairs). Work is posted with
//! [`Channel::submit`], which never waits; completions are reaped with
//! [`Channel::poll`]. Each channel serves its operations in FIFO order, and
//! [`Channel::fence`] marks an ordering point on it. Two backends implement
//! the contract: [`sim::SimFabric`], a deterministic virtual-clock model, and
//! [`tcp::TcpFabric`], a client for the memory node service.

pub mod latency;
pub mod region;
pub mod sim;
pub mod tcp;

use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, Nanos};
pub use latency::{LatencyModel, ModelKind, Profile};

pub type ChannelId = u32;
pub type OpId = u64;

/// Default cap on a single transfer: 1 GiB.
pub const DEFAULT_MAX_TRANSFER_BYTES: u64 = 1 << 30;

/// Address inside a memory node's registered region.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RemoteAddr {
    pub node_id: u16,
    pub offset: u64,
}

impl RemoteAddr {
    pub fn new(offset: u64) -> Self {
        RemoteAddr { node_id: 0, offset }
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, delta: u64) -> Self {
        RemoteAddr {
            node_id: self.node_id,
            offset: self.offset + delta,
        }
    }
}

impl fmt::Display for RemoteAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{:#x}", self.node_id, self.offset)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AccessPattern {
    Seq,
    Rand,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Read,
    Write,
    AtomicCas { expected: u64, desired: u64 },
    AtomicFadd { delta: u64 },
}

impl OpKind {
    pub fn is_atomic(&self) -> bool {
        matches!(self, OpKind::AtomicCas { .. } | OpKind::AtomicFadd { .. })
    }

    /// Which calibration curve prices this operation. Atomics are modeled as
    /// 8-byte reads.
    pub fn model_kind(&self) -> ModelKind {
        match self {
            OpKind::Write => ModelKind::Write,
            _ => ModelKind::Read,
        }
    }
}

/// Registered local memory that fabric operations read from and land into.
#[derive(Clone, Debug, Default)]
pub struct MemoryRegion(Arc<Mutex<Vec<u8>>>);

impl MemoryRegion {
    pub fn new(len: usize) -> Self {
        MemoryRegion(Arc::new(Mutex::new(vec![0; len])))
    }

    pub fn from_vec(bytes: Vec<u8>) -> Self {
        MemoryRegion(Arc::new(Mutex::new(bytes)))
    }

    pub fn len(&self) -> usize {
        self.0.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice(&self, offset: usize, len: usize) -> LocalSlice {
        LocalSlice {
            region: self.clone(),
            offset,
            len,
        }
    }

    pub fn whole(&self) -> LocalSlice {
        self.slice(0, self.len())
    }

    pub fn read(&self, offset: usize, out: &mut [u8]) {
        let g = self.0.lock();
        out.copy_from_slice(&g[offset..offset + out.len()]);
    }

    pub fn write(&self, offset: usize, data: &[u8]) {
        let mut g = self.0.lock();
        g[offset..offset + data.len()].copy_from_slice(data);
    }

    pub fn fill(&self, offset: usize, len: usize, byte: u8) {
        let mut g = self.0.lock();
        g[offset..offset + len].fill(byte);
    }

    pub fn to_vec(&self) -> Vec<u8> {
        self.0.lock().clone()
    }

    pub fn with<R>(&self, f: impl FnOnce(&[u8]) -> R) -> R {
        f(&self.0.lock())
    }

    pub fn with_mut<R>(&self, f: impl FnOnce(&mut [u8]) -> R) -> R {
        f(&mut self.0.lock())
    }

    pub fn ptr_eq(&self, other: &MemoryRegion) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

/// A caller-owned byte range inside a [`MemoryRegion`].
#[derive(Clone, Debug)]
pub struct LocalSlice {
    pub region: MemoryRegion,
    pub offset: usize,
    pub len: usize,
}

impl LocalSlice {
    pub fn to_vec(&self) -> Vec<u8> {
        let mut v = vec![0; self.len];
        self.region.read(self.offset, &mut v);
        v
    }

    /// Copies `data` to the start of the slice, truncating to the slice length.
    /// Returns false if truncation happened.
    pub fn land(&self, data: &[u8]) -> bool {
        let n = data.len().min(self.len);
        self.region.write(self.offset, &data[..n]);
        n == data.len()
    }
}

/// A work request.
#[derive(Clone, Debug)]
pub struct FabricOp {
    pub kind: OpKind,
    pub remote: RemoteAddr,
    pub length: u64,
    pub local: LocalSlice,
    pub signaled: bool,
    pub pattern: AccessPattern,
}

impl FabricOp {
    pub fn read(remote: RemoteAddr, local: LocalSlice) -> Self {
        FabricOp {
            kind: OpKind::Read,
            remote,
            length: local.len as u64,
            local,
            signaled: true,
            pattern: AccessPattern::Seq,
        }
    }

    pub fn write(remote: RemoteAddr, local: LocalSlice) -> Self {
        FabricOp {
            kind: OpKind::Write,
            ..FabricOp::read(remote, local)
        }
    }

    pub fn cas(remote: RemoteAddr, expected: u64, desired: u64, result: LocalSlice) -> Self {
        FabricOp {
            kind: OpKind::AtomicCas { expected, desired },
            length: 8,
            ..FabricOp::read(remote, result)
        }
    }

    pub fn fadd(remote: RemoteAddr, delta: u64, result: LocalSlice) -> Self {
        FabricOp {
            kind: OpKind::AtomicFadd { delta },
            length: 8,
            ..FabricOp::read(remote, result)
        }
    }

    pub fn with_pattern(mut self, pattern: AccessPattern) -> Self {
        self.pattern = pattern;
        self
    }

    pub fn unsignaled(mut self) -> Self {
        self.signaled = false;
        self
    }

    /// Checks length rules and bounds against a region of `capacity` bytes.
    pub fn validate(&self, capacity: u64, max_transfer: u64) -> Result<(), FabricError> {
        if self.kind.is_atomic() {
            if self.length != 8 {
                return Err(FabricError::InvalidLength(self.length));
            }
            if !self.remote.offset.is_multiple_of(8) {
                return Err(FabricError::Misaligned {
                    offset: self.remote.offset,
                });
            }
        } else if self.length == 0 {
            return Err(FabricError::InvalidLength(0));
        }
        if self.length > max_transfer {
            return Err(FabricError::Oversized {
                length: self.length,
                max: max_transfer,
            });
        }
        match self.remote.offset.checked_add(self.length) {
            Some(end) if end <= capacity => Ok(()),
            _ => Err(FabricError::OutOfBounds {
                offset: self.remote.offset,
                length: self.length,
            }),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CompletionStatus {
    Ok,
    RemoteError,
    Truncated,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Completion {
    pub op_id: OpId,
    pub status: CompletionStatus,
    pub completed_at: Nanos,
}

/// Stable numeric error codes, shared by the wire protocol and the C ABI.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum ErrorCode {
    OutOfBounds = 1,
    RemoteOom = 2,
    DoubleFree = 3,
    Misaligned = 4,
    Io = 5,
    BadRequest = 6,
    Oversized = 7,
    RemoteError = 8,
}

impl ErrorCode {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => ErrorCode::OutOfBounds,
            2 => ErrorCode::RemoteOom,
            3 => ErrorCode::DoubleFree,
            4 => ErrorCode::Misaligned,
            5 => ErrorCode::Io,
            6 => ErrorCode::BadRequest,
            7 => ErrorCode::Oversized,
            8 => ErrorCode::RemoteError,
            _ => return None,
        })
    }
}

#[derive(Debug, Error)]
pub enum FabricError {
    #[error("remote range {offset:#x}+{length} is outside the registered region")]
    OutOfBounds { offset: u64, length: u64 },
    #[error("transfer of {length} bytes exceeds max_transfer_bytes {max}")]
    Oversized { length: u64, max: u64 },
    #[error("invalid transfer length {0}")]
    InvalidLength(u64),
    #[error("remote allocation of {requested} bytes failed: out of memory")]
    RemoteOom { requested: u64 },
    #[error("double free of remote range at {offset:#x}")]
    DoubleFree { offset: u64 },
    #[error("atomic target {offset:#x} is not 8-byte aligned")]
    Misaligned { offset: u64 },
    #[error("operation {0} is unknown or its completion was already retrieved")]
    UnknownOp(OpId),
    #[error("operation {0} failed on the memory node")]
    RemoteError(OpId),
    #[error("memory node reported status {0:?}")]
    Status(ErrorCode),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("connection closed")]
    Disconnected,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl FabricError {
    pub fn code(&self) -> ErrorCode {
        match self {
            FabricError::OutOfBounds { .. } => ErrorCode::OutOfBounds,
            FabricError::Oversized { .. } => ErrorCode::Oversized,
            FabricError::InvalidLength(_) | FabricError::Protocol(_) | FabricError::UnknownOp(_) => ErrorCode::BadRequest,
            FabricError::RemoteOom { .. } => ErrorCode::RemoteOom,
            FabricError::DoubleFree { .. } => ErrorCode::DoubleFree,
            FabricError::Misaligned { .. } => ErrorCode::Misaligned,
            FabricError::RemoteError(_) => ErrorCode::RemoteError,
            FabricError::Status(c) => *c,
            FabricError::Disconnected | FabricError::Io(_) => ErrorCode::Io,
        }
    }
}

/// An ordered submission/completion lane. Driven by one thread at a time.
pub trait Channel: Send {
    fn id(&self) -> ChannelId;

    /// Posts an operation and returns without waiting for it.
    fn submit(&mut self, op: FabricOp) -> Result<OpId, FabricError>;

    /// Returns up to `max` signaled completions, oldest first.
    fn poll(&mut self, max: usize) -> Vec<Completion>;

    /// Blocks until `op_id` has completed and its bytes have landed, then
    /// hands over its completion. The completion is consumed: it will not be
    /// returned by [`Channel::poll`] as well.
    fn wait(&mut self, op_id: OpId) -> Result<Completion, FabricError>;

    /// Ordering point: everything posted before it completes before anything
    /// posted after it starts. Does not block the caller.
    fn fence(&mut self);

    /// Blocks until every posted operation has completed.
    fn drain(&mut self) -> Result<(), FabricError>;

    /// Posted operations whose completion has not been retrieved yet.
    fn outstanding(&self) -> usize;

    /// Completion time of `op_id` if it is known without blocking.
    fn completion_time(&self, op_id: OpId) -> Option<Nanos>;
}

pub trait Fabric: Send + Sync {
    fn open_channel(&self) -> Result<Box<dyn Channel>, FabricError>;

    /// Opens a channel timed against `clock` instead of the fabric clock.
    /// Backends without a virtual clock ignore the argument.
    fn open_channel_with_clock(&self, clock: Clock) -> Result<Box<dyn Channel>, FabricError> {
        let _ = clock;
        self.open_channel()
    }

    fn remote_alloc(&self, size: u64) -> Result<RemoteAddr, FabricError>;
    fn remote_free(&self, addr: RemoteAddr) -> Result<(), FabricError>;
    fn atomic_cas(&self, addr: RemoteAddr, expected: u64, desired: u64) -> Result<u64, FabricError>;
    fn atomic_fadd(&self, addr: RemoteAddr, delta: u64) -> Result<u64, FabricError>;

    /// Asks the memory node to write its region and allocation map to `path`.
    fn snapshot(&self, path: &Path) -> Result<(), FabricError>;

    fn capacity(&self) -> u64;
    fn max_transfer_bytes(&self) -> u64;
    fn model(&self) -> &LatencyModel;
    fn clock(&self) -> Clock;
    fn stats(&self) -> FabricStats;
}

/// Splits a transfer into `(offset, length)` pieces of at most `max` bytes.
pub fn split_transfer(length: u64, max: u64) -> impl Iterator<Item = (u64, u64)> {
    assert!(max > 0);
    let n = length.div_ceil(max);
    (0..n).map(move |i| {
        let off = i * max;
        (off, (length - off).min(max))
    })
}

/// Per-kind operation and byte counters.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FabricStats {
    pub reads: u64,
    pub read_bytes: u64,
    pub writes: u64,
    pub write_bytes: u64,
    pub atomics: u64,
    pub fences: u64,
}

#[derive(Debug, Default)]
pub(crate) struct StatCounters {
    reads: AtomicU64,
    read_bytes: AtomicU64,
    writes: AtomicU64,
    write_bytes: AtomicU64,
    atomics: AtomicU64,
    fences: AtomicU64,
}

impl StatCounters {
    pub(crate) fn record(&self, kind: OpKind, length: u64) {
        let (ops, bytes) = match kind {
            OpKind::Read => (&self.reads, Some(&self.read_bytes)),
            OpKind::Write => (&self.writes, Some(&self.write_bytes)),
            _ => (&self.atomics, None),
        };
        ops.fetch_add(1, Ordering::Relaxed);
        if let Some(b) = bytes {
            b.fetch_add(length, Ordering::Relaxed);
        }
    }

    pub(crate) fn record_fence(&self) {
        self.fences.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn snapshot(&self) -> FabricStats {
        FabricStats {
            reads: self.reads.load(Ordering::Relaxed),
            read_bytes: self.read_bytes.load(Ordering::Relaxed),
            writes: self.writes.load(Ordering::Relaxed),
            write_bytes: self.write_bytes.load(Ordering::Relaxed),
            atomics: self.atomics.load(Ordering::Relaxed),
            fences: self.fences.load(Ordering::Relaxed),
        }
    }
}
