//! Local memory manager for a compute node.
//!
//! Local memory is split into a region for whole local objects, a cache for
//! remote objects (two halves when double buffering) and a metadata region
//! that also holds the demotion staging pool. Large objects that do not fit
//! locally are demoted to remote memory; reads of remote objects return a
//! [`FetchTicket`] whose data becomes usable only after [`Runtime::acquire`].
//!
//! The runtime has a single owner. Threads share it behind a lock; the
//! per-lane cache partitions and cluster channels model worker threads.

mod cache;
mod handle;
mod layout;
mod lock;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::Arc;

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{us_to_ns, Clock, Nanos};
use crate::fabric::{
    split_transfer, AccessPattern, Channel, Completion, CompletionStatus, Fabric, FabricError, FabricOp, MemoryRegion, OpId, RemoteAddr,
};
use crate::placement::{self, Location, ObjectDescriptor, ObjectId, SizeClass};
use crate::threads::ThreadPoolConfig;

use cache::{CacheBuffer, Slot, SlotId};
pub use handle::{FetchTicket, ObjectHandle, MAX_OBJECT_ID};
pub use layout::RegionLayout;
pub use lock::{LockMode, DEFAULT_LOCK_ATTEMPTS, LOCK_EXCLUSIVE};

/// Each remote home starts with an 8-byte lock word; the payload follows.
pub const LOCK_WORD_BYTES: u64 = 8;
/// Metadata charged per object that has a remote home.
pub const ENTRY_BYTES: u64 = 64;
pub const DEFAULT_STAGING_BYTES: u64 = 64 << 20;
/// Fill pattern for freshly admitted cache slots in debug mode.
pub const POISON: u8 = 0xDB;
pub const DEBUG_POISON_ENV: &str = "DOLMA_DEBUG_POISON";
/// Remote objects this small are accessed with 8-byte atomics.
pub const ATOMIC_OBJECT_MAX: u64 = 8;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("invalid layout: {0}")]
    Layout(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("object size must be at least 1 byte")]
    EmptyObject,
    #[error("unknown or freed object {0}")]
    UnknownObject(ObjectId),
    #[error("range {offset}+{len} is outside object {object} of {size} bytes")]
    OutOfRange {
        object: ObjectId,
        offset: u64,
        len: u64,
        size: u64,
    },
    #[error("ticket {0} was already acquired")]
    TicketReused(u64),
    #[error("unknown ticket {0}")]
    UnknownTicket(u64),
    #[error("bytes {offset}+{len} of object {object} are read before their ticket was acquired")]
    UseBeforeAcquire { object: ObjectId, offset: u64, len: u64 },
    #[error("bytes {offset}+{len} of object {object} are not resident")]
    NotResident { object: ObjectId, offset: u64, len: u64 },
    #[error("no cache space left in lane {lane}: every slot is pinned by an outstanding ticket")]
    CacheFull { lane: usize },
    #[error("lane {lane} does not exist ({lanes} lanes)")]
    BadLane { lane: usize, lanes: usize },
    #[error("remote operation on object {object} failed with {status:?}")]
    RemoteOp { object: ObjectId, status: CompletionStatus },
    #[error("object {0} has no remote home")]
    NotRemote(ObjectId),
    #[error("timed out acquiring the remote lock of object {0}")]
    LockTimeout(ObjectId),
    #[error("lock misuse on object {object}: {msg}")]
    LockState { object: ObjectId, msg: String },
    #[error("prefetching needs the dual buffer")]
    NoIdleBuffer,
    #[error(transparent)]
    Fabric(#[from] FabricError),
}

pub type Result<T, E = RuntimeError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuntimeConfig {
    pub layout: RegionLayout,
    pub page_size: u64,
    pub threads: ThreadPoolConfig,
    pub dual_buffer: bool,
    pub async_write: bool,
    /// Staging pool for in-flight demotion writes; part of `metadata_bytes`.
    pub staging_bytes: u64,
    pub debug_poison: bool,
    pub lock_attempts: u32,
}

impl RuntimeConfig {
    /// Defaults for `layout`: one lane, double buffering, asynchronous
    /// writes, and a staging pool of up to 64 MiB taken from metadata.
    pub fn new(layout: RegionLayout) -> Self {
        RuntimeConfig {
            layout,
            page_size: placement::DEFAULT_PAGE_SIZE,
            threads: ThreadPoolConfig::default(),
            dual_buffer: true,
            async_write: true,
            staging_bytes: DEFAULT_STAGING_BYTES.min(layout.metadata_bytes),
            debug_poison: std::env::var(DEBUG_POISON_ENV).is_ok_and(|v| v != "0" && !v.is_empty()),
            lock_attempts: DEFAULT_LOCK_ATTEMPTS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        self.threads.validate().map_err(|e| RuntimeError::Config(e.to_string()))?;
        if self.staging_bytes < 8 {
            return Err(RuntimeError::Config("staging pool must hold at least 8 bytes".into()));
        }
        if self.staging_bytes > self.layout.metadata_bytes {
            return Err(RuntimeError::Config(format!(
                "staging pool {} exceeds metadata region {}",
                self.staging_bytes, self.layout.metadata_bytes
            )));
        }
        if self.page_size == 0 {
            return Err(RuntimeError::Config("page size must be positive".into()));
        }
        Ok(())
    }

    pub fn buffers(&self) -> usize {
        if self.dual_buffer {
            2
        } else {
            1
        }
    }

    /// Bytes in each cache buffer.
    pub fn buffer_bytes(&self) -> u64 {
        if self.dual_buffer {
            self.layout.half()
        } else {
            self.layout.remote_cache_bytes
        }
    }
}

/// Counters for one runtime.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub fetch_ops: u64,
    pub fetch_bytes: u64,
    pub write_ops: u64,
    pub write_bytes: u64,
    pub atomic_ops: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub partial_fetches: u64,
    pub evictions: u64,
    pub writebacks: u64,
    pub demotions: u64,
    pub remote_allocs: u64,
    pub fences: u64,
    pub overlays: u64,
    /// Misses served by copying a dirty slot from the other buffer.
    pub buffer_copies: u64,
    pub tickets: u64,
    pub write_errors: u64,
    pub acquire_stall_ns: Nanos,
    pub staging_stall_ns: Nanos,
    pub order_stall_ns: Nanos,
    pub peak_local_bytes: u64,
    pub capacity_violations: u64,
}

impl RuntimeStats {
    pub fn stall_ns(&self) -> Nanos {
        self.acquire_stall_ns + self.staging_stall_ns + self.order_stall_ns
    }
}

/// Lane and access pattern for one read or write.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct AccessOpts {
    pub lane: usize,
    pub pattern: AccessPattern,
    /// Writes of remote objects skip the cache and go straight home, for
    /// data that will not be read back soon.
    pub streaming: bool,
}

impl Default for AccessOpts {
    fn default() -> Self {
        AccessOpts {
            lane: 0,
            pattern: AccessPattern::Seq,
            streaming: false,
        }
    }
}

impl AccessOpts {
    pub fn lane(lane: usize) -> Self {
        AccessOpts {
            lane,
            ..Default::default()
        }
    }
}

/// Current split of local memory use.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub local_objects: u64,
    pub cache: u64,
    pub staging: u64,
    pub metadata: u64,
}

impl Usage {
    pub fn total(&self) -> u64 {
        self.local_objects + self.cache + self.staging + self.metadata
    }
}

#[derive(Debug)]
pub(crate) struct Object {
    pub desc: ObjectDescriptor,
    pub tag: Option<String>,
    /// Authoritative bytes while the object is local.
    pub local: Option<Vec<u8>>,
    /// Remote home: lock word, then payload.
    pub home: Option<RemoteAddr>,
    /// Home not owned by this runtime; never freed here.
    pub attached: bool,
    pub slots: Vec<SlotId>,
    /// Writes to the home that have not completed.
    pub pending_writes: Vec<PendingWrite>,
    /// Last value seen for atomically accessed objects.
    pub inline: Option<[u8; 8]>,
    /// Written since the last checkpoint.
    pub epoch_dirty: bool,
    /// Allocated here and never written: every byte is zero.
    pub pristine: bool,
    pub lock_held: Option<LockMode>,
    pub write_error: Option<CompletionStatus>,
}

impl Object {
    fn payload(&self) -> Option<RemoteAddr> {
        self.home.map(|h| h.add(LOCK_WORD_BYTES))
    }

    fn is_atomic(&self) -> bool {
        self.local.is_none() && self.desc.size <= ATOMIC_OBJECT_MAX
    }
}

/// An outstanding WRITE to `[at, at + len)` of remote memory.
#[derive(Copy, Clone, Debug)]
pub(crate) struct PendingWrite {
    ch: usize,
    op: OpId,
    at: u64,
    len: u64,
}

impl PendingWrite {
    fn overlaps(&self, at: u64, len: u64) -> bool {
        at < self.at + self.len && self.at < at + len
    }
}

#[derive(Debug)]
enum Owner {
    Slot(SlotId),
    Staged { obj: ObjectId, bytes: u64 },
}

#[derive(Debug)]
struct TicketState {
    obj: ObjectId,
    slot: Option<SlotId>,
    ops: Vec<(usize, OpId)>,
    satisfied: (u64, u64),
}

pub struct Runtime {
    pub(crate) cfg: RuntimeConfig,
    pub(crate) fabric: Arc<dyn Fabric>,
    clock: Clock,
    channels: Vec<Box<dyn Channel>>,
    pub(crate) objects: BTreeMap<ObjectId, Object>,
    pub(crate) next_id: ObjectId,
    buffers: Vec<CacheBuffer>,
    active: usize,
    slots: BTreeMap<SlotId, Slot>,
    next_slot: SlotId,
    op_owner: HashMap<(usize, OpId), Owner>,
    staged_order: VecDeque<(usize, OpId)>,
    tickets: HashMap<u64, TicketState>,
    next_ticket: u64,
    local_used: u64,
    cache_used: u64,
    staging_used: u64,
    meta_entries: u64,
    touch: u64,
    pub(crate) iteration: u64,
    recorded: Option<Vec<(ObjectId, u64, u64)>>,
    stats: RuntimeStats,
}

impl Runtime {
    pub fn new(cfg: RuntimeConfig, fabric: Arc<dyn Fabric>) -> Result<Self> {
        cfg.validate()?;
        // One channel per cluster, plus one for prefetches into the idle buffer.
        let channels = (0..cfg.threads.clusters() + cfg.dual_buffer as usize)
            .map(|_| fabric.open_channel())
            .collect::<Result<Vec<_>, _>>()?;
        let parts = cfg.threads.partitions(cfg.buffer_bytes());
        let buffers = (0..cfg.buffers()).map(|_| CacheBuffer::new(&parts, cfg.buffer_bytes())).collect();
        Ok(Runtime {
            clock: fabric.clock(),
            cfg,
            fabric,
            channels,
            objects: BTreeMap::new(),
            next_id: 1,
            buffers,
            active: 0,
            slots: BTreeMap::new(),
            next_slot: 1,
            op_owner: HashMap::new(),
            staged_order: VecDeque::new(),
            tickets: HashMap::new(),
            next_ticket: 1,
            local_used: 0,
            cache_used: 0,
            staging_used: 0,
            meta_entries: 0,
            touch: 0,
            iteration: 0,
            recorded: None,
            stats: RuntimeStats::default(),
        })
    }

    /// Runtime with default settings for `layout`.
    pub fn with_layout(layout: RegionLayout, fabric: Arc<dyn Fabric>) -> Result<Self> {
        Runtime::new(RuntimeConfig::new(layout), fabric)
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.cfg
    }

    pub fn fabric(&self) -> &Arc<dyn Fabric> {
        &self.fabric
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    pub fn now_us(&self) -> f64 {
        self.clock.now_us()
    }

    pub fn stats(&self) -> RuntimeStats {
        self.stats.clone()
    }

    pub fn usage(&self) -> Usage {
        Usage {
            local_objects: self.local_used,
            cache: self.cache_used,
            staging: self.staging_used,
            metadata: self.meta_entries * ENTRY_BYTES,
        }
    }

    pub fn active_buffer(&self) -> usize {
        self.active
    }

    pub fn lanes(&self) -> usize {
        self.cfg.threads.threads
    }

    /// Cache bytes available to `lane` in one buffer.
    pub fn lane_partition_bytes(&self, lane: usize) -> u64 {
        self.buffers[0].partition_len(lane)
    }

    pub fn set_iteration(&mut self, i: u64) {
        self.iteration = i;
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Charges `us` microseconds of local computation.
    pub fn compute(&mut self, us: f64) {
        self.clock.charge(us_to_ns(us));
        self.reap();
    }

    fn account(&mut self) {
        let used = self.usage().total();
        if used > self.stats.peak_local_bytes {
            self.stats.peak_local_bytes = used;
        }
        if used > self.cfg.layout.budget() {
            self.stats.capacity_violations += 1;
            debug!("local usage {used} exceeds budget {}", self.cfg.layout.budget());
        }
    }

    fn object(&self, id: ObjectId) -> Result<&Object> {
        self.objects.get(&id).ok_or(RuntimeError::UnknownObject(id))
    }

    fn object_mut(&mut self, id: ObjectId) -> Result<&mut Object> {
        self.objects.get_mut(&id).ok_or(RuntimeError::UnknownObject(id))
    }

    fn check_range(&self, h: ObjectHandle, off: u64, len: u64) -> Result<(ObjectId, u64)> {
        let id = h.object_id();
        let size = self.object(id)?.desc.size;
        let abs = h.offset() + off;
        if len == 0 || abs.checked_add(len).is_none_or(|e| e > size) {
            return Err(RuntimeError::OutOfRange {
                object: id,
                offset: abs,
                len,
                size,
            });
        }
        Ok((id, abs))
    }

    fn check_lane(&self, lane: usize) -> Result<()> {
        if lane >= self.lanes() {
            return Err(RuntimeError::BadLane { lane, lanes: self.lanes() });
        }
        Ok(())
    }

    fn lane_channel(&self, lane: usize) -> usize {
        self.cfg.threads.cluster_of(lane)
    }

    fn object_channel(&self, id: ObjectId) -> usize {
        (id % self.cfg.threads.clusters() as u64) as usize
    }

    fn prefetch_channel(&self) -> usize {
        self.cfg.threads.clusters()
    }

    fn next_touch(&mut self) -> u64 {
        self.touch += 1;
        self.touch
    }

    pub fn descriptor(&self, h: ObjectHandle) -> Result<ObjectDescriptor> {
        let o = self.object(h.object_id())?;
        let mut d = o.desc.clone();
        d.location = self.location_of(o);
        Ok(d)
    }

    /// Descriptors of all live objects, by id.
    pub fn descriptors(&self) -> Vec<ObjectDescriptor> {
        self.objects
            .values()
            .map(|o| ObjectDescriptor {
                location: self.location_of(o),
                ..o.desc.clone()
            })
            .collect()
    }

    fn location_of(&self, o: &Object) -> Location {
        if o.local.is_some() {
            Location::Local
        } else if o.slots.is_empty() && o.inline.is_none() {
            Location::Remote
        } else {
            Location::RemoteCached
        }
    }

    pub fn handle_of(&self, id: ObjectId) -> Option<ObjectHandle> {
        self.objects.get(&id).map(|o| ObjectHandle::new(id, o.local.is_none()))
    }

    /// Remote home (lock word address) of the object, if it has one.
    pub fn home_of(&self, h: ObjectHandle) -> Result<Option<RemoteAddr>> {
        Ok(self.object(h.object_id())?.home)
    }

    pub fn object_tag(&self, h: ObjectHandle) -> Result<Option<&str>> {
        Ok(self.object(h.object_id())?.tag.as_deref())
    }

    /// First live object carrying `tag`.
    pub fn find_tagged(&self, tag: &str) -> Option<ObjectHandle> {
        let (&id, o) = self.objects.iter().find(|(_, o)| o.tag.as_deref() == Some(tag))?;
        Some(ObjectHandle::new(id, o.local.is_none()))
    }

    /// Starts or stops recording application reads as (object, offset, length).
    pub fn record_reads(&mut self, on: bool) {
        self.recorded = if on { Some(Vec::new()) } else { None };
    }

    /// Reads recorded since recording started; recording continues.
    pub fn take_recorded(&mut self) -> Vec<(ObjectId, u64, u64)> {
        self.recorded.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn live_objects(&self) -> usize {
        self.objects.len()
    }

    // ---- completion handling ----

    fn submit(&mut self, ch: usize, op: FabricOp, owner: Owner) -> Result<OpId> {
        let id = self.channels[ch].submit(op)?;
        self.op_owner.insert((ch, id), owner);
        Ok(id)
    }

    fn complete(&mut self, ch: usize, c: Completion) {
        match self.op_owner.remove(&(ch, c.op_id)) {
            None => {}
            Some(Owner::Slot(sid)) => {
                let Some(s) = self.slots.get_mut(&sid) else { return };
                s.inflight.retain(|&x| x != (ch, c.op_id));
                if c.status != CompletionStatus::Ok {
                    s.error = Some(c.status);
                }
                if s.inflight.is_empty() && !s.overlay.is_empty() {
                    let region = &self.buffers[s.buffer].region;
                    for (off, bytes) in std::mem::take(&mut s.overlay) {
                        region.write((s.cache_off + off - s.obj_off) as usize, &bytes);
                        self.staging_used -= bytes.len() as u64;
                    }
                }
            }
            Some(Owner::Staged { obj, bytes }) => {
                self.staging_used -= bytes;
                if let Some(o) = self.objects.get_mut(&obj) {
                    o.pending_writes.retain(|w| (w.ch, w.op) != (ch, c.op_id));
                    if c.status != CompletionStatus::Ok {
                        o.write_error = Some(c.status);
                    }
                }
                if c.status != CompletionStatus::Ok {
                    self.stats.write_errors += 1;
                    warn!("write of object {obj} failed: {:?}", c.status);
                }
            }
        }
    }

    /// Blocks until `(ch, op)` completes; no-op if it already has.
    fn wait_op(&mut self, ch: usize, op: OpId) -> Result<()> {
        if !self.op_owner.contains_key(&(ch, op)) {
            return Ok(());
        }
        let c = self.channels[ch].wait(op)?;
        self.complete(ch, c);
        Ok(())
    }

    /// Processes every completion that is already available.
    fn reap(&mut self) {
        for ch in 0..self.channels.len() {
            for c in self.channels[ch].poll(usize::MAX) {
                self.complete(ch, c);
            }
        }
    }

    fn settle_slot(&mut self, sid: SlotId) -> Result<()> {
        let ops = match self.slots.get(&sid) {
            Some(s) => s.inflight.clone(),
            None => return Ok(()),
        };
        for (ch, op) in ops {
            self.wait_op(ch, op)?;
        }
        Ok(())
    }

    /// Makes a fabric op on `ch` touching `len` remote bytes at `at` observe
    /// the object's earlier overlapping writes: those on other channels are
    /// waited for, same-channel ones are fenced.
    fn order_before(&mut self, id: ObjectId, ch: usize, at: RemoteAddr, len: u64) -> Result<()> {
        let pending: Vec<PendingWrite> = self
            .object(id)?
            .pending_writes
            .iter()
            .filter(|w| w.overlaps(at.offset, len))
            .copied()
            .collect();
        let mut fence = false;
        for w in pending {
            if w.ch == ch {
                fence = true;
            } else {
                let t0 = self.clock.now();
                self.wait_op(w.ch, w.op)?;
                self.stats.order_stall_ns += self.clock.now() - t0;
            }
        }
        if fence {
            self.channels[ch].fence();
            self.stats.fences += 1;
        }
        Ok(())
    }

    /// Waits out queued writes that overlap a range about to be touched by a
    /// synchronous atomic, which no channel fence can order.
    fn settle_writes(&mut self, id: ObjectId, at: RemoteAddr, len: u64) -> Result<()> {
        let pending: Vec<PendingWrite> = self
            .object(id)?
            .pending_writes
            .iter()
            .filter(|w| w.overlaps(at.offset, len))
            .copied()
            .collect();
        let t0 = self.clock.now();
        for w in pending {
            self.wait_op(w.ch, w.op)?;
        }
        self.stats.order_stall_ns += self.clock.now() - t0;
        Ok(())
    }

    fn make_staging_room(&mut self, n: u64) -> Result<()> {
        self.reap();
        let cap = self.cfg.staging_bytes;
        while self.staging_used + n > cap {
            let t0 = self.clock.now();
            if let Some((ch, op)) = self.staged_order.pop_front() {
                self.wait_op(ch, op)?;
            } else if let Some(sid) = self.slots.iter().find(|(_, s)| !s.overlay.is_empty()).map(|(&k, _)| k) {
                self.settle_slot(sid)?;
            } else {
                break;
            }
            self.stats.staging_stall_ns += self.clock.now() - t0;
        }
        Ok(())
    }

    /// Copies `data` into staging and posts asynchronous WRITEs to `remote`.
    fn stage_write(&mut self, id: ObjectId, ch: usize, remote: RemoteAddr, data: &[u8], pattern: AccessPattern) -> Result<()> {
        let chunk = self.fabric.max_transfer_bytes().min(self.cfg.staging_bytes);
        for (o, n) in split_transfer(data.len() as u64, chunk) {
            self.make_staging_room(n)?;
            let src = MemoryRegion::from_vec(data[o as usize..(o + n) as usize].to_vec());
            self.staging_used += n;
            self.account();
            let op = FabricOp::write(remote.add(o), src.whole()).with_pattern(pattern);
            let op_id = self.submit(ch, op, Owner::Staged { obj: id, bytes: n })?;
            self.staged_order.push_back((ch, op_id));
            self.object_mut(id)?.pending_writes.push(PendingWrite {
                ch,
                op: op_id,
                at: remote.offset + o,
                len: n,
            });
            self.stats.write_ops += 1;
            self.stats.write_bytes += n;
            if !self.cfg.async_write {
                let t0 = self.clock.now();
                self.wait_op(ch, op_id)?;
                self.stats.staging_stall_ns += self.clock.now() - t0;
            }
        }
        Ok(())
    }

    // ---- allocation ----

    pub fn alloc(&mut self, size: u64) -> Result<ObjectHandle> {
        self.alloc_tagged(size, None)
    }

    /// Allocates an object. It stays local if it fits the free local region,
    /// or if demoting large local objects frees enough room; otherwise it is
    /// placed in remote memory and a remote-tagged handle is returned.
    pub fn alloc_tagged(&mut self, size: u64, tag: Option<&str>) -> Result<ObjectHandle> {
        if size == 0 {
            return Err(RuntimeError::EmptyObject);
        }
        let id = self.next_id;
        if id > MAX_OBJECT_ID {
            return Err(RuntimeError::Config("object ids exhausted".into()));
        }
        let cap = self.cfg.layout.local_object_bytes;
        let free = cap - self.local_used;
        let mut local = size <= free;
        if !local && size <= cap {
            let resident: Vec<ObjectDescriptor> = self
                .objects
                .values()
                .filter(|o| o.local.is_some() && placement::classify(&o.desc, self.cfg.page_size) == SizeClass::Large)
                .map(|o| o.desc.clone())
                .collect();
            let sel = placement::select_victims(&resident, size - free);
            if !sel.insufficient {
                for v in sel.victims {
                    self.demote_local(v.object_id)?;
                }
                local = true;
            }
        }
        let mut desc = ObjectDescriptor::new(id, size);
        desc.alloc_iteration = self.iteration;
        let mut obj = Object {
            desc,
            tag: tag.map(str::to_owned),
            local: None,
            home: None,
            attached: false,
            slots: Vec::new(),
            pending_writes: Vec::new(),
            inline: None,
            epoch_dirty: true,
            pristine: true,
            lock_held: None,
            write_error: None,
        };
        if local {
            obj.local = Some(vec![0; size as usize]);
            self.local_used += size;
        } else {
            obj.home = Some(self.fabric.remote_alloc(size + LOCK_WORD_BYTES)?);
            obj.desc.location = Location::Remote;
            self.meta_entries += 1;
            self.stats.remote_allocs += 1;
        }
        self.next_id += 1;
        self.objects.insert(id, obj);
        self.account();
        Ok(ObjectHandle::new(id, !local))
    }

    /// Adopts an existing remote home (lock word plus `size` payload bytes)
    /// allocated by another runtime on the same memory node.
    pub fn attach_remote(&mut self, home: RemoteAddr, size: u64) -> Result<ObjectHandle> {
        if size == 0 {
            return Err(RuntimeError::EmptyObject);
        }
        let h = self.alloc_placeholder(size, home)?;
        self.object_mut(h.object_id())?.attached = true;
        Ok(h)
    }

    fn alloc_placeholder(&mut self, size: u64, home: RemoteAddr) -> Result<ObjectHandle> {
        let id = self.next_id;
        self.next_id += 1;
        let mut desc = ObjectDescriptor::new(id, size);
        desc.location = Location::Remote;
        desc.alloc_iteration = self.iteration;
        self.objects.insert(
            id,
            Object {
                desc,
                tag: None,
                local: None,
                home: Some(home),
                attached: false,
                slots: Vec::new(),
                pending_writes: Vec::new(),
                inline: None,
                epoch_dirty: false,
                pristine: false,
                lock_held: None,
                write_error: None,
            },
        );
        self.meta_entries += 1;
        self.account();
        Ok(ObjectHandle::new(id, true))
    }

    pub fn free(&mut self, h: ObjectHandle) -> Result<()> {
        let id = h.object_id();
        let slots = self.object(id)?.slots.clone();
        for sid in slots {
            self.settle_slot(sid)?;
            self.release_slot(sid);
        }
        for w in self.object(id)?.pending_writes.clone() {
            self.wait_op(w.ch, w.op)?;
        }
        let o = self.objects.remove(&id).unwrap();
        if o.local.is_some() {
            self.local_used -= o.desc.size;
        }
        if let Some(home) = o.home {
            self.meta_entries -= 1;
            if !o.attached {
                self.fabric.remote_free(home)?;
            }
        }
        self.account();
        Ok(())
    }

    /// Records the iteration at which the object is released, then frees it.
    pub fn free_at_iteration(&mut self, h: ObjectHandle) -> Result<ObjectDescriptor> {
        let mut d = self.descriptor(h)?;
        d.free_iteration = Some(self.iteration);
        self.free(h)?;
        Ok(d)
    }

    // ---- demotion ----

    fn ensure_home(&mut self, id: ObjectId) -> Result<RemoteAddr> {
        if let Some(h) = self.object(id)?.home {
            return Ok(h);
        }
        let size = self.object(id)?.desc.size;
        let home = self.fabric.remote_alloc(size + LOCK_WORD_BYTES)?;
        self.object_mut(id)?.home = Some(home);
        self.meta_entries += 1;
        self.stats.remote_allocs += 1;
        self.account();
        Ok(home)
    }

    /// Moves a local object to its remote home without waiting for the writes.
    fn demote_local(&mut self, id: ObjectId) -> Result<()> {
        let home = self.ensure_home(id)?;
        let ch = self.object_channel(id);
        let size = self.object(id)?.desc.size;
        self.order_before(id, ch, home, size + LOCK_WORD_BYTES)?;
        let data = self.object_mut(id)?.local.take().expect("object is local");
        // Fresh remote memory reads as zero, so untouched objects move for free.
        if !self.object(id)?.pristine {
            self.stage_write(id, ch, home.add(LOCK_WORD_BYTES), &data, AccessPattern::Seq)?;
        }
        let o = self.object_mut(id)?;
        o.desc.location = Location::Remote;
        let size = o.desc.size;
        self.local_used -= size;
        self.stats.demotions += 1;
        self.account();
        Ok(())
    }

    /// Demotes an object: a local object moves to remote memory, a cached one
    /// writes its dirty bytes home and leaves the cache. Returns before the
    /// writes complete unless asynchronous writes are disabled.
    pub fn demote(&mut self, h: ObjectHandle) -> Result<()> {
        let id = h.object_id();
        if self.object(id)?.local.is_some() {
            return self.demote_local(id);
        }
        for sid in self.object(id)?.slots.clone() {
            if self.slots[&sid].pins > 0 {
                continue;
            }
            self.drop_slot(sid, true)?;
        }
        self.object_mut(id)?.inline = None;
        self.stats.demotions += 1;
        self.account();
        Ok(())
    }

    /// Writes back every dirty cache slot and waits for all writes.
    pub fn flush(&mut self) -> Result<()> {
        let dirty: Vec<SlotId> = self.slots.iter().filter(|(_, s)| s.dirty).map(|(&k, _)| k).collect();
        for sid in dirty {
            self.writeback_slot(sid)?;
        }
        self.drain_writes()?;
        self.account();
        Ok(())
    }

    fn drain_writes(&mut self) -> Result<()> {
        while let Some((ch, op)) = self.staged_order.pop_front() {
            let t0 = self.clock.now();
            self.wait_op(ch, op)?;
            self.stats.staging_stall_ns += self.clock.now() - t0;
        }
        Ok(())
    }

    /// Waits for every outstanding operation and writes back dirty data, so
    /// remote homes and local objects hold the authoritative bytes.
    pub fn quiesce(&mut self) -> Result<()> {
        let sids: Vec<SlotId> = self.slots.keys().copied().collect();
        for sid in sids {
            self.settle_slot(sid)?;
        }
        self.flush()?;
        for ch in &mut self.channels {
            ch.drain()?;
        }
        self.reap();
        Ok(())
    }

    // ---- cache slots ----

    fn release_slot(&mut self, sid: SlotId) {
        let s = self.slots.remove(&sid).expect("slot exists");
        debug_assert!(s.inflight.is_empty());
        self.staging_used -= s.overlay_bytes();
        self.buffers[s.buffer].release(s.lane, s.alloc_off);
        self.cache_used -= s.space;
        if let Some(o) = self.objects.get_mut(&s.obj) {
            o.slots.retain(|&x| x != sid);
        }
    }

    fn slot_bytes(&self, s: &Slot) -> Vec<u8> {
        let mut v = vec![0; s.len as usize];
        self.buffers[s.buffer].region.read(s.cache_off as usize, &mut v);
        v
    }

    /// Posts the slot's bytes home and marks it clean.
    fn writeback_slot(&mut self, sid: SlotId) -> Result<()> {
        self.settle_slot(sid)?;
        let s = &self.slots[&sid];
        if !s.dirty {
            return Ok(());
        }
        let (obj, lane, obj_off) = (s.obj, s.lane, s.obj_off);
        let data = self.slot_bytes(s);
        let home = self.object(obj)?.payload().expect("cached objects have a home");
        let ch = self.lane_channel(lane);
        self.order_before(obj, ch, home.add(obj_off), data.len() as u64)?;
        self.stage_write(obj, ch, home.add(obj_off), &data, AccessPattern::Seq)?;
        self.slots.get_mut(&sid).unwrap().dirty = false;
        self.stats.writebacks += 1;
        Ok(())
    }

    /// Removes a slot from the cache, writing it back first if asked and dirty.
    fn drop_slot(&mut self, sid: SlotId, writeback: bool) -> Result<()> {
        if writeback {
            self.writeback_slot(sid)?;
        } else {
            self.settle_slot(sid)?;
        }
        self.release_slot(sid);
        Ok(())
    }

    fn find_slot(&self, id: ObjectId, buffer: usize, pred: impl Fn(&Slot) -> bool) -> Option<SlotId> {
        let o = self.objects.get(&id)?;
        o.slots.iter().copied().find(|sid| {
            let s = &self.slots[sid];
            s.buffer == buffer && pred(s)
        })
    }

    /// Frees room in `(buffer, lane)` until a `want`-byte range fits or only
    /// pinned slots remain. Prefetched data nobody has read yet goes last;
    /// otherwise clean slots go first, then the least recently touched.
    fn make_cache_room(&mut self, buffer: usize, lane: usize, want: u64) -> Result<()> {
        let want = want.next_multiple_of(8).min(self.buffers[buffer].partition_len(lane));
        while self.buffers[buffer].largest_free(lane) < want {
            let victim = self
                .slots
                .iter()
                .filter(|(_, s)| s.buffer == buffer && s.lane == lane && s.pins == 0)
                .min_by_key(|(&k, s)| (s.prefetched, s.dirty, s.last_touch, k))
                .map(|(&k, _)| k);
            let Some(sid) = victim else { break };
            self.drop_slot(sid, true)?;
            self.stats.evictions += 1;
        }
        Ok(())
    }

    fn new_slot(&mut self, id: ObjectId, buffer: usize, lane: usize, obj_off: u64, len: u64) -> Option<SlotId> {
        let (alloc_off, cache_off, space) = self.buffers[buffer].reserve(lane, len)?;
        let sid = self.next_slot;
        self.next_slot += 1;
        let touch = self.next_touch();
        self.slots.insert(
            sid,
            Slot {
                obj: id,
                buffer,
                lane,
                alloc_off,
                cache_off,
                space,
                obj_off,
                len,
                dirty: false,
                inflight: Vec::new(),
                overlay: Vec::new(),
                pins: 0,
                prefetched: false,
                last_touch: touch,
                error: None,
            },
        );
        self.cache_used += space;
        self.objects.get_mut(&id).unwrap().slots.push(sid);
        Some(sid)
    }

    /// Applies a write of `data` at object offset `off` to the overlapping
    /// part of a slot.
    fn patch_slot(&mut self, sid: SlotId, off: u64, data: &[u8], mark_dirty: bool) -> Result<()> {
        let s = &self.slots[&sid];
        let start = off.max(s.obj_off);
        let end = (off + data.len() as u64).min(s.end());
        if start >= end {
            return Ok(());
        }
        let piece = &data[(start - off) as usize..(end - off) as usize];
        if !s.inflight.is_empty() {
            let n = piece.len() as u64;
            self.make_staging_room(n)?;
            let s = self.slots.get_mut(&sid).unwrap();
            if !s.inflight.is_empty() {
                s.overlay.push((start, piece.to_vec()));
                s.dirty |= mark_dirty;
                self.staging_used += n;
                self.stats.overlays += 1;
                self.account();
                return Ok(());
            }
        }
        let s = self.slots.get_mut(&sid).unwrap();
        s.dirty |= mark_dirty;
        self.buffers[s.buffer]
            .region
            .write((s.cache_off + start - s.obj_off) as usize, piece);
        Ok(())
    }

    // ---- reads ----

    pub fn read(&mut self, h: ObjectHandle, off: u64, len: u64) -> Result<FetchTicket> {
        self.read_with(h, off, len, AccessOpts::default())
    }

    /// Starts reading `[off, off+len)` of the object into the active buffer.
    /// If the range is only partly cached, or larger than the cache, the
    /// ticket covers a prefix of it; the caller reads the rest afterwards.
    pub fn read_with(&mut self, h: ObjectHandle, off: u64, len: u64, opts: AccessOpts) -> Result<FetchTicket> {
        let (id, abs) = self.check_range(h, off, len)?;
        self.check_lane(opts.lane)?;
        self.object_mut(id)?.desc.read_count += 1;
        if let Some(r) = &mut self.recorded {
            r.push((id, abs, len));
        }
        let active = self.active;
        let t = self.fetch(id, abs, len, active, opts, true)?;
        self.account();
        Ok(t)
    }

    /// Starts fetching `[off, off+len)` into the idle buffer for the next
    /// iteration. Does not count as an application read. Clean data already
    /// cached in the active buffer is fetched again.
    pub fn prefetch(&mut self, h: ObjectHandle, off: u64, len: u64, opts: AccessOpts) -> Result<FetchTicket> {
        if !self.cfg.dual_buffer {
            return Err(RuntimeError::NoIdleBuffer);
        }
        let (id, abs) = self.check_range(h, off, len)?;
        self.check_lane(opts.lane)?;
        let idle = 1 - self.active;
        let t = self.fetch(id, abs, len, idle, opts, false)?;
        self.account();
        Ok(t)
    }

    fn ticket(&mut self, id: ObjectId, slot: Option<SlotId>, ops: Vec<(usize, OpId)>, satisfied: (u64, u64)) -> FetchTicket {
        let tid = self.next_ticket;
        self.next_ticket += 1;
        self.stats.tickets += 1;
        if let Some(sid) = slot {
            self.slots.get_mut(&sid).unwrap().pins += 1;
        }
        let n = ops.len();
        self.tickets.insert(
            tid,
            TicketState {
                obj: id,
                slot,
                ops,
                satisfied,
            },
        );
        FetchTicket {
            id: tid,
            object_id: id,
            satisfied,
            issued_at: self.clock.now(),
            ops: n,
        }
    }

    fn fetch(&mut self, id: ObjectId, abs: u64, len: u64, buffer: usize, opts: AccessOpts, from_any: bool) -> Result<FetchTicket> {
        self.reap();
        let o = self.object(id)?;
        if o.local.is_some() {
            return Ok(self.ticket(id, None, Vec::new(), (abs, len)));
        }
        if o.is_atomic() {
            let addr = o.payload().unwrap();
            self.settle_writes(id, addr, 8)?;
            let word = self.fabric.atomic_fadd(addr, 0)?;
            self.stats.atomic_ops += 1;
            self.object_mut(id)?.inline = Some(word.to_le_bytes());
            return Ok(self.ticket(id, None, Vec::new(), (abs, len)));
        }

        // Hit: a slot holding the first requested byte.
        let mut search = vec![buffer];
        if from_any && self.buffers.len() > 1 {
            search.push(1 - buffer);
        }
        for b in search {
            if let Some(sid) = self.find_slot(id, b, |s| s.contains(abs)) {
                let touch = self.next_touch();
                let s = self.slots.get_mut(&sid).unwrap();
                s.last_touch = touch;
                s.prefetched &= !from_any;
                let sat = (abs, len.min(s.end() - abs));
                let ops = s.inflight.clone();
                self.stats.cache_hits += 1;
                return Ok(self.ticket(id, Some(sid), ops, sat));
            }
        }
        self.stats.cache_misses += 1;

        // Same-buffer slots in the way are evicted; pinned ones bound the range.
        let overlapping: Vec<SlotId> = self
            .object(id)?
            .slots
            .iter()
            .copied()
            .filter(|sid| {
                let s = &self.slots[sid];
                s.buffer == buffer && s.overlaps(abs, len)
            })
            .collect();
        let mut limit = abs + len;
        for sid in overlapping {
            if self.slots[&sid].pins > 0 {
                limit = limit.min(self.slots[&sid].obj_off);
            } else {
                self.drop_slot(sid, true)?;
            }
        }
        // A settled dirty copy in the other buffer covering the range is
        // copied over, which saves writing it home before the read. Clean
        // data is read from home as usual.
        let source = self.object(id)?.slots.iter().copied().find(|sid| {
            let s = &self.slots[sid];
            s.buffer != buffer && s.dirty && s.inflight.is_empty() && s.error.is_none() && s.covers(abs, limit - abs)
        });
        if source.is_none() {
            // Newer bytes held dirty in the other buffer must reach home first.
            let others: Vec<SlotId> = self
                .object(id)?
                .slots
                .iter()
                .copied()
                .filter(|sid| {
                    let s = &self.slots[sid];
                    s.buffer != buffer && s.dirty && s.overlaps(abs, len)
                })
                .collect();
            for sid in others {
                self.writeback_slot(sid)?;
            }
        }

        let want = (limit - abs).min(self.buffers[buffer].partition_len(opts.lane));
        self.make_cache_room(buffer, opts.lane, want)?;
        let free = self.buffers[buffer].largest_free(opts.lane);
        let n = if want.next_multiple_of(8) <= free { want } else { free & !7 };
        if n == 0 {
            return Err(RuntimeError::CacheFull { lane: opts.lane });
        }
        if n < len {
            self.stats.partial_fetches += 1;
        }
        let sid = self
            .new_slot(id, buffer, opts.lane, abs, n)
            .ok_or(RuntimeError::CacheFull { lane: opts.lane })?;
        let (cache_off, region) = (self.slots[&sid].cache_off, self.buffers[buffer].region.clone());
        if self.cfg.debug_poison {
            region.fill(cache_off as usize, n as usize, POISON);
        }
        if let Some(src) = source {
            let s = &self.slots[&src];
            let mut bytes = vec![0; n as usize];
            self.buffers[s.buffer]
                .region
                .read((s.cache_off + abs - s.obj_off) as usize, &mut bytes);
            // Identical ranges pass the write-back duty along with the bytes.
            let hand_over = s.obj_off == abs && s.len == n;
            region.write(cache_off as usize, &bytes);
            if hand_over {
                self.slots.get_mut(&src).unwrap().dirty = false;
            }
            let new = self.slots.get_mut(&sid).unwrap();
            new.dirty = hand_over;
            new.prefetched = !from_any;
            self.stats.buffer_copies += 1;
            return Ok(self.ticket(id, Some(sid), Vec::new(), (abs, n)));
        }
        let home = self.object(id)?.payload().unwrap();
        let mut ch = if from_any {
            self.lane_channel(opts.lane)
        } else {
            self.prefetch_channel()
        };
        // A read behind overlapping writes queued on one other channel is
        // fenced onto that channel instead of waiting for them.
        let mut behind = self
            .object(id)?
            .pending_writes
            .iter()
            .filter(|w| w.overlaps(home.offset + abs, n))
            .map(|w| w.ch);
        if let Some(first) = behind.next() {
            if behind.all(|c| c == first) {
                ch = first;
            }
        }
        self.slots.get_mut(&sid).unwrap().prefetched = !from_any;
        self.order_before(id, ch, home.add(abs), n)?;
        let mut ops = Vec::new();
        for (o, l) in split_transfer(n, self.fabric.max_transfer_bytes()) {
            let slice = region.slice((cache_off + o) as usize, l as usize);
            let op = FabricOp::read(home.add(abs + o), slice).with_pattern(opts.pattern);
            let op_id = self.submit(ch, op, Owner::Slot(sid))?;
            ops.push((ch, op_id));
            self.stats.fetch_ops += 1;
            self.stats.fetch_bytes += l;
        }
        self.slots.get_mut(&sid).unwrap().inflight = ops.clone();
        Ok(self.ticket(id, Some(sid), ops, (abs, n)))
    }

    /// Waits for the ticket's reads. Returns the satisfied object byte range
    /// `(offset, length)`. Each ticket can be acquired once.
    pub fn acquire(&mut self, t: &FetchTicket) -> Result<(u64, u64)> {
        let st = match self.tickets.remove(&t.id) {
            Some(st) => st,
            None if t.id < self.next_ticket => return Err(RuntimeError::TicketReused(t.id)),
            None => return Err(RuntimeError::UnknownTicket(t.id)),
        };
        let t0 = self.clock.now();
        for &(ch, op) in &st.ops {
            self.wait_op(ch, op)?;
        }
        self.stats.acquire_stall_ns += self.clock.now() - t0;
        if let Some(sid) = st.slot {
            let Some(s) = self.slots.get_mut(&sid) else {
                return Err(RuntimeError::UnknownObject(st.obj));
            };
            s.pins -= 1;
            if let Some(status) = s.error {
                if s.pins == 0 {
                    self.release_slot(sid);
                }
                return Err(RuntimeError::RemoteOp { object: st.obj, status });
            }
        } else if !self.objects.contains_key(&st.obj) {
            return Err(RuntimeError::UnknownObject(st.obj));
        }
        if let Some(status) = self.objects.get_mut(&st.obj).and_then(|o| o.write_error.take()) {
            return Err(RuntimeError::RemoteOp { object: st.obj, status });
        }
        Ok(st.satisfied)
    }

    /// Copies resident bytes of an acquired range into `out`.
    pub fn copy_out(&self, h: ObjectHandle, off: u64, out: &mut [u8]) -> Result<()> {
        let len = out.len() as u64;
        let (id, abs) = self.check_range(h, off, len)?;
        let o = self.object(id)?;
        if let Some(local) = &o.local {
            out.copy_from_slice(&local[abs as usize..(abs + len) as usize]);
            return Ok(());
        }
        if o.is_atomic() {
            let w = o.inline.ok_or(RuntimeError::NotResident {
                object: id,
                offset: abs,
                len,
            })?;
            out.copy_from_slice(&w[abs as usize..(abs + len) as usize]);
            return Ok(());
        }
        let sid = o
            .slots
            .iter()
            .copied()
            .filter(|sid| self.slots[sid].covers(abs, len))
            .min_by_key(|sid| (self.slots[sid].buffer != self.active, *sid))
            .ok_or(RuntimeError::NotResident {
                object: id,
                offset: abs,
                len,
            })?;
        let s = &self.slots[&sid];
        if !s.inflight.is_empty() {
            return Err(RuntimeError::UseBeforeAcquire {
                object: id,
                offset: abs,
                len,
            });
        }
        self.buffers[s.buffer].region.read((s.cache_off + abs - s.obj_off) as usize, out);
        Ok(())
    }

    /// Raw cache contents for a range, whether or not its reads have landed.
    /// Debug aid for checking the acquire contract.
    pub fn peek_cached(&self, h: ObjectHandle, off: u64, len: u64) -> Option<Vec<u8>> {
        let (id, abs) = self.check_range(h, off, len).ok()?;
        let o = self.objects.get(&id)?;
        let sid = o.slots.iter().copied().find(|sid| self.slots[sid].covers(abs, len))?;
        let s = &self.slots[&sid];
        let mut v = vec![0; len as usize];
        self.buffers[s.buffer].region.read((s.cache_off + abs - s.obj_off) as usize, &mut v);
        Some(v)
    }

    /// Reads `out.len()` bytes at `off`, looping over partial fetches.
    pub fn read_sync(&mut self, h: ObjectHandle, off: u64, out: &mut [u8]) -> Result<()> {
        self.read_sync_with(h, off, out, AccessOpts::default())
    }

    pub fn read_sync_with(&mut self, h: ObjectHandle, off: u64, out: &mut [u8], opts: AccessOpts) -> Result<()> {
        let mut done = 0u64;
        let total = out.len() as u64;
        while done < total {
            let t = self.read_with(h, off + done, total - done, opts)?;
            let (s_off, s_len) = self.acquire(&t)?;
            debug_assert_eq!(s_off, h.offset() + off + done);
            self.copy_out(h, off + done, &mut out[done as usize..(done + s_len) as usize])?;
            done += s_len;
        }
        Ok(())
    }

    // ---- writes ----

    pub fn write(&mut self, h: ObjectHandle, off: u64, data: &[u8]) -> Result<()> {
        self.write_with(h, off, data, AccessOpts::default())
    }

    /// Writes `data` at `off`. Local objects are stored directly. Remote
    /// objects are written into the cache (marking it dirty) when the range is
    /// cached or fits the free space of the lane's partition; larger writes go
    /// straight to the remote home.
    pub fn write_with(&mut self, h: ObjectHandle, off: u64, data: &[u8], opts: AccessOpts) -> Result<()> {
        let len = data.len() as u64;
        let (id, abs) = self.check_range(h, off, len)?;
        self.check_lane(opts.lane)?;
        self.reap();
        let o = self.object_mut(id)?;
        o.desc.write_count += 1;
        o.epoch_dirty = true;
        o.pristine = false;
        if let Some(local) = &mut o.local {
            local[abs as usize..(abs + len) as usize].copy_from_slice(data);
            return Ok(());
        }
        if o.is_atomic() {
            return self.write_atomic(id, abs, data);
        }

        let candidates = o.slots.clone();
        let overlapping: Vec<SlotId> = candidates.into_iter().filter(|sid| self.slots[sid].overlaps(abs, len)).collect();
        // Every cached copy receives the bytes, but only one covering copy,
        // preferably in the active buffer, becomes responsible for writing
        // them home.
        let active = self.active;
        let primary = overlapping
            .iter()
            .copied()
            .filter(|sid| self.slots[sid].covers(abs, len))
            .min_by_key(|sid| (self.slots[sid].buffer != active, *sid));
        if let Some(primary) = primary {
            for sid in overlapping {
                self.patch_slot(sid, abs, data, sid == primary)?;
            }
            self.account();
            return Ok(());
        }

        let pinned_in_active = overlapping.iter().any(|sid| {
            let s = &self.slots[sid];
            s.buffer == active && s.pins > 0
        });
        let fits = len.next_multiple_of(8) <= self.buffers[active].largest_free(opts.lane);
        if fits && !pinned_in_active && !opts.streaming {
            for &sid in &overlapping {
                if self.slots[&sid].buffer == active {
                    self.drop_slot(sid, true)?;
                }
            }
            // Eviction above may have moved things; re-check the space.
            if len.next_multiple_of(8) <= self.buffers[active].largest_free(opts.lane) {
                let sid = self.new_slot(id, active, opts.lane, abs, len).expect("space checked");
                let s = &self.slots[&sid];
                self.buffers[active].region.write(s.cache_off as usize, data);
                self.slots.get_mut(&sid).unwrap().dirty = true;
                let rest: Vec<SlotId> = overlapping.into_iter().filter(|s| self.slots.contains_key(s)).collect();
                for sid in rest {
                    self.patch_slot(sid, abs, data, false)?;
                }
                self.account();
                return Ok(());
            }
        }

        // Write-through: straight to the home, keeping cached copies in step.
        let home = self.object(id)?.payload().unwrap();
        let ch = self.lane_channel(opts.lane);
        self.order_before(id, ch, home.add(abs), len)?;
        self.stage_write(id, ch, home.add(abs), data, opts.pattern)?;
        let overlapping: Vec<SlotId> = self
            .object(id)?
            .slots
            .iter()
            .copied()
            .filter(|sid| self.slots[sid].overlaps(abs, len))
            .collect();
        for sid in overlapping {
            self.patch_slot(sid, abs, data, false)?;
        }
        self.account();
        Ok(())
    }

    fn write_atomic(&mut self, id: ObjectId, abs: u64, data: &[u8]) -> Result<()> {
        let addr = self.object(id)?.payload().unwrap();
        self.settle_writes(id, addr, 8)?;
        let mut cur = self.fabric.atomic_fadd(addr, 0)?;
        self.stats.atomic_ops += 1;
        loop {
            let mut bytes = cur.to_le_bytes();
            bytes[abs as usize..abs as usize + data.len()].copy_from_slice(data);
            let new = u64::from_le_bytes(bytes);
            let prev = self.fabric.atomic_cas(addr, cur, new)?;
            self.stats.atomic_ops += 1;
            if prev == cur {
                self.object_mut(id)?.inline = Some(bytes);
                return Ok(());
            }
            cur = prev;
        }
    }

    // ---- indirect access ----

    /// Reads `B[index]` (a little-endian u64) and then starts the read of
    /// element `B[index]` of `A`, each element being `element_size` bytes.
    pub fn resolve_indirect(&mut self, a: ObjectHandle, b: ObjectHandle, index: u64, element_size: u64) -> Result<FetchTicket> {
        let mut idx = [0u8; 8];
        self.read_sync(b, index * 8, &mut idx)?;
        let j = u64::from_le_bytes(idx);
        let a_size = self.object(a.object_id())?.desc.size;
        let start = j
            .checked_mul(element_size)
            .filter(|s| s + element_size <= a_size - a.offset().min(a_size));
        let Some(start) = start else {
            return Err(RuntimeError::OutOfRange {
                object: a.object_id(),
                offset: j.saturating_mul(element_size),
                len: element_size,
                size: a_size,
            });
        };
        self.read(a, start, element_size)
    }

    // ---- dual buffer ----

    /// Makes the idle buffer active.
    pub fn swap_buffers(&mut self) {
        if self.buffers.len() > 1 {
            self.active = 1 - self.active;
        }
    }

    /// Clears the idle buffer for new prefetches: dirty slots are demoted
    /// asynchronously, every unpinned slot is dropped. Returns the number of
    /// slots dropped.
    pub fn retire_idle(&mut self) -> Result<usize> {
        if self.buffers.len() < 2 {
            return Ok(0);
        }
        self.retire_buffer(1 - self.active)
    }

    /// Same as [`retire_idle`](Self::retire_idle) for any buffer.
    pub fn retire_buffer(&mut self, buffer: usize) -> Result<usize> {
        let sids: Vec<SlotId> = self
            .slots
            .iter()
            .filter(|(_, s)| s.buffer == buffer && s.pins == 0)
            .map(|(&k, _)| k)
            .collect();
        let n = sids.len();
        for sid in sids {
            self.drop_slot(sid, true)?;
        }
        self.account();
        Ok(n)
    }

    /// Slots currently held in `buffer`, as (object id, offset, length).
    pub fn resident_in(&self, buffer: usize) -> Vec<(ObjectId, u64, u64)> {
        self.slots
            .values()
            .filter(|s| s.buffer == buffer)
            .map(|s| (s.obj, s.obj_off, s.len))
            .collect()
    }

    // ---- checkpoint support ----

    /// Object ids written or allocated since the last call, then resets them.
    pub(crate) fn take_epoch_dirty(&mut self) -> Vec<ObjectId> {
        let mut v = Vec::new();
        for (&id, o) in &mut self.objects {
            if o.epoch_dirty {
                v.push(id);
                o.epoch_dirty = false;
            }
        }
        v
    }

    pub(crate) fn local_bytes(&self, id: ObjectId) -> Option<&[u8]> {
        self.objects.get(&id)?.local.as_deref()
    }

    /// Payload address of the object's remote home.
    pub(crate) fn payload_addr(&self, id: ObjectId) -> Option<RemoteAddr> {
        self.objects.get(&id)?.payload()
    }

    /// Recreates an object with a fixed id from checkpointed state. Remote
    /// objects get a fresh home; their bytes are written synchronously.
    pub(crate) fn restore_object(
        &mut self,
        desc: ObjectDescriptor,
        tag: Option<String>,
        local: Option<Vec<u8>>,
        remote: Option<&[u8]>,
    ) -> Result<()> {
        let id = desc.object_id;
        let size = desc.size;
        let mut obj = Object {
            desc,
            tag,
            local: None,
            home: None,
            attached: false,
            slots: Vec::new(),
            pending_writes: Vec::new(),
            inline: None,
            epoch_dirty: false,
            pristine: false,
            lock_held: None,
            write_error: None,
        };
        if let Some(bytes) = local {
            self.local_used += size;
            obj.local = Some(bytes);
            obj.desc.location = Location::Local;
        } else {
            obj.home = Some(self.fabric.remote_alloc(size + LOCK_WORD_BYTES)?);
            obj.desc.location = Location::Remote;
            self.meta_entries += 1;
        }
        self.objects.insert(id, obj);
        self.next_id = self.next_id.max(id + 1);
        if let Some(bytes) = remote {
            let home = self.payload_addr(id).unwrap();
            let ch = self.object_channel(id);
            self.stage_write(id, ch, home, bytes, AccessPattern::Seq)?;
        }
        self.account();
        Ok(())
    }

    pub(crate) fn restore_finish(&mut self) -> Result<()> {
        self.drain_writes()
    }
}

impl Drop for Runtime {
    fn drop(&mut self) {
        // Leave no reads landing into buffers that are about to go away.
        for ch in &mut self.channels {
            let _ = ch.drain();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::sim::SimFabric;
    use crate::fabric::LatencyModel;

    const KIB: u64 = 1024;
    const MIB: u64 = 1 << 20;

    fn rt(local: u64, cache: u64) -> (Runtime, SimFabric) {
        let f = SimFabric::new(64 * MIB, LatencyModel::default());
        let layout = RegionLayout::new(local, cache, 8 * MIB).unwrap();
        let mut cfg = RuntimeConfig::new(layout);
        cfg.debug_poison = true;
        (Runtime::new(cfg, Arc::new(f.clone())).unwrap(), f)
    }

    #[test]
    fn big_alloc_goes_remote() {
        let (mut r, f) = rt(MIB, 2 * MIB);
        let h = r.alloc(4 * MIB).unwrap();
        assert!(h.is_remote());
        assert_eq!(f.region().allocator().allocated_bytes(), 4 * MIB + 8);
        let s = r.alloc(256 * KIB).unwrap();
        assert!(!s.is_remote());
        assert_eq!(f.stats().writes, 0);
    }

    #[test]
    fn alloc_demotes_victim() {
        let (mut r, f) = rt(MIB, 2 * MIB);
        let v = r.alloc(600 * KIB).unwrap();
        r.write(v, 0, &[7; 16]).unwrap();
        let _filler = r.alloc(324 * KIB).unwrap();
        let h = r.alloc(512 * KIB).unwrap();
        assert!(!h.is_remote());
        assert_eq!(r.descriptor(v).unwrap().location, Location::Remote);
        assert!(f.stats().writes >= 1);
        let mut out = [0u8; 16];
        r.read_sync(v, 0, &mut out).unwrap();
        assert_eq!(out, [7; 16]);
    }

    #[test]
    fn partial_prefix_when_cache_is_small() {
        let (mut r, _f) = rt(0, 2 * MIB);
        let h = r.alloc(3 * MIB).unwrap();
        let t = r.read(h, 0, 3 * MIB).unwrap();
        assert_eq!(t.satisfied, (0, MIB));
        assert_eq!(r.acquire(&t).unwrap(), (0, MIB));
    }

    #[test]
    fn poison_visible_before_acquire() {
        let (mut r, _f) = rt(0, 2 * MIB);
        let h = r.alloc(64 * KIB).unwrap();
        let t = r.read(h, 0, 64).unwrap();
        assert_eq!(r.peek_cached(h, 0, 4).unwrap(), vec![POISON; 4]);
        let mut out = [1u8; 4];
        assert!(matches!(r.copy_out(h, 0, &mut out), Err(RuntimeError::UseBeforeAcquire { .. })));
        r.acquire(&t).unwrap();
        r.copy_out(h, 0, &mut out).unwrap();
        assert_eq!(out, [0; 4]);
        assert!(matches!(r.acquire(&t), Err(RuntimeError::TicketReused(_))));
    }

    #[test]
    fn demote_returns_before_write_completes() {
        let (mut r, f) = rt(8 * MIB, 2 * MIB);
        let h = r.alloc(4 * MIB).unwrap();
        r.write(h, 0, &[1; 64]).unwrap();
        let t0 = f.clock().now();
        r.demote(h).unwrap();
        assert_eq!(f.clock().now(), t0);
        assert_eq!(f.stats().writes, 1);
        let mut out = [0u8; 64];
        r.read_sync(h, 0, &mut out).unwrap();
        assert_eq!(out, [1; 64]);
        assert_eq!(r.stats().fences, 1);
    }

    #[test]
    fn clean_demote_writes_nothing() {
        let (mut r, f) = rt(0, 2 * MIB);
        let h = r.alloc(64 * KIB).unwrap();
        let mut out = [0u8; 8];
        r.read_sync(h, 0, &mut out).unwrap();
        r.demote(h).unwrap();
        assert_eq!(f.stats().writes, 0);
        assert_eq!(r.descriptor(h).unwrap().location, Location::Remote);
    }

    #[test]
    fn tiny_remote_objects_use_atomics() {
        let (mut r, f) = rt(0, 2 * MIB);
        let h = r.alloc(8).unwrap();
        r.write(h, 2, &[5, 6]).unwrap();
        let mut out = [0u8; 8];
        r.read_sync(h, 0, &mut out).unwrap();
        assert_eq!(out, [0, 0, 5, 6, 0, 0, 0, 0]);
        assert_eq!(f.stats().reads, 0);
        assert!(f.stats().atomics >= 3);
    }

    #[test]
    fn counters_follow_calls() {
        let (mut r, _f) = rt(MIB, 2 * MIB);
        let h = r.alloc(1000).unwrap();
        for _ in 0..3 {
            let t = r.read(h, 0, 10).unwrap();
            r.acquire(&t).unwrap();
        }
        r.write(h, 0, &[1]).unwrap();
        let d = r.descriptor(h).unwrap();
        assert_eq!((d.read_count, d.write_count), (3, 1));
    }
}
