//! Remote-object cache: one or two buffers, each split into per-lane
//! partitions, holding slots that mirror a byte range of one object.

use crate::fabric::region::RangeAllocator;
use crate::fabric::{CompletionStatus, MemoryRegion, OpId};
use crate::placement::ObjectId;

pub type SlotId = u64;

/// A cached copy of `[obj_off, obj_off + len)` of one object.
#[derive(Debug)]
pub(crate) struct Slot {
    pub obj: ObjectId,
    pub buffer: usize,
    pub lane: usize,
    /// Offset inside the lane partition allocator.
    pub alloc_off: u64,
    /// Absolute offset inside the buffer region.
    pub cache_off: u64,
    /// Bytes reserved in the partition (len rounded up).
    pub space: u64,
    pub obj_off: u64,
    pub len: u64,
    pub dirty: bool,
    /// Fabric reads still landing into this slot, as (channel, op).
    pub inflight: Vec<(usize, OpId)>,
    /// Writes that arrived while reads were in flight; replayed on landing.
    pub overlay: Vec<(u64, Vec<u8>)>,
    /// Outstanding tickets that point at this slot.
    pub pins: u32,
    /// Filled by a prefetch and not read by the application yet.
    pub prefetched: bool,
    pub last_touch: u64,
    pub error: Option<CompletionStatus>,
}

impl Slot {
    pub fn end(&self) -> u64 {
        self.obj_off + self.len
    }

    pub fn covers(&self, off: u64, len: u64) -> bool {
        self.obj_off <= off && off + len <= self.end()
    }

    pub fn contains(&self, off: u64) -> bool {
        self.obj_off <= off && off < self.end()
    }

    pub fn overlaps(&self, off: u64, len: u64) -> bool {
        off < self.end() && self.obj_off < off + len
    }

    pub fn overlay_bytes(&self) -> u64 {
        self.overlay.iter().map(|(_, b)| b.len() as u64).sum()
    }
}

/// One cache buffer and its per-lane partitions.
#[derive(Debug)]
pub(crate) struct CacheBuffer {
    pub region: MemoryRegion,
    /// (partition base, allocator) per lane.
    pub lanes: Vec<(u64, RangeAllocator)>,
}

impl CacheBuffer {
    pub fn new(partitions: &[(u64, u64)], len: u64) -> Self {
        CacheBuffer {
            region: MemoryRegion::new(len as usize),
            lanes: partitions.iter().map(|&(base, l)| (base, RangeAllocator::new(l))).collect(),
        }
    }

    pub fn partition_len(&self, lane: usize) -> u64 {
        self.lanes[lane].1.capacity()
    }

    pub fn largest_free(&self, lane: usize) -> u64 {
        self.lanes[lane].1.largest_free()
    }

    /// Reserves `len` bytes in the lane; returns (alloc offset, absolute offset, space).
    pub fn reserve(&mut self, lane: usize, len: u64) -> Option<(u64, u64, u64)> {
        let (base, a) = &mut self.lanes[lane];
        let off = a.alloc(len).ok()?;
        let space = a.allocation_len(off).unwrap();
        Some((off, *base + off, space))
    }

    pub fn release(&mut self, lane: usize, alloc_off: u64) {
        self.lanes[lane].1.free(alloc_off).expect("slot space was reserved");
    }
}
