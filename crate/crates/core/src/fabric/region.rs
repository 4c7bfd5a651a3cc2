//! Backing store of a memory node: a byte region plus a range allocator.
//!
//! Shared by the simulated fabric and the TCP memory node so both backends
//! apply identical allocation and bounds rules.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use parking_lot::Mutex;

use super::FabricError;

/// Allocation granularity. Keeps every allocation usable as an atomic word.
pub const ALLOC_ALIGN: u64 = 8;

const STRIPE: u64 = 1 << 20;
const SNAPSHOT_MAGIC: &[u8; 4] = b"DLSN";
const SNAPSHOT_VERSION: u32 = 1;

/// First-fit allocator over an address-ordered free list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RangeAllocator {
    capacity: u64,
    free: BTreeMap<u64, u64>,
    allocated: BTreeMap<u64, u64>,
}

impl RangeAllocator {
    pub fn new(capacity: u64) -> Self {
        let mut free = BTreeMap::new();
        if capacity > 0 {
            free.insert(0, capacity);
        }
        RangeAllocator {
            capacity,
            free,
            allocated: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn alloc(&mut self, size: u64) -> Result<u64, FabricError> {
        if size == 0 {
            return Err(FabricError::InvalidLength(0));
        }
        let need = size
            .checked_next_multiple_of(ALLOC_ALIGN)
            .ok_or(FabricError::RemoteOom { requested: size })?;
        let (start, len) = self
            .free
            .iter()
            .find(|(_, &len)| len >= need)
            .map(|(&s, &l)| (s, l))
            .ok_or(FabricError::RemoteOom { requested: size })?;
        self.free.remove(&start);
        if len > need {
            self.free.insert(start + need, len - need);
        }
        self.allocated.insert(start, need);
        Ok(start)
    }

    pub fn free(&mut self, offset: u64) -> Result<(), FabricError> {
        let len = self.allocated.remove(&offset).ok_or(FabricError::DoubleFree { offset })?;
        let mut start = offset;
        let mut end = offset + len;
        if let Some((&ps, &pl)) = self.free.range(..start).next_back() {
            if ps + pl == start {
                self.free.remove(&ps);
                start = ps;
            }
        }
        if let Some(nl) = self.free.remove(&end) {
            end += nl;
        }
        self.free.insert(start, end - start);
        Ok(())
    }

    /// Length reserved for the allocation starting at `offset`.
    pub fn allocation_len(&self, offset: u64) -> Option<u64> {
        self.allocated.get(&offset).copied()
    }

    pub fn free_ranges(&self) -> Vec<(u64, u64)> {
        self.free.iter().map(|(&s, &l)| (s, l)).collect()
    }

    pub fn allocated_ranges(&self) -> Vec<(u64, u64)> {
        self.allocated.iter().map(|(&s, &l)| (s, l)).collect()
    }

    /// Size of the largest free range.
    pub fn largest_free(&self) -> u64 {
        self.free.values().copied().max().unwrap_or(0)
    }

    pub fn allocated_bytes(&self) -> u64 {
        self.allocated.values().sum()
    }

    /// Checks that free and allocated ranges tile `[0, capacity)` exactly and
    /// that no two free ranges are adjacent.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut all: Vec<(u64, u64, bool)> = self
            .free
            .iter()
            .map(|(&s, &l)| (s, l, true))
            .chain(self.allocated.iter().map(|(&s, &l)| (s, l, false)))
            .collect();
        all.sort();
        let mut cursor = 0;
        let mut prev_free = false;
        for (s, l, is_free) in all {
            if s != cursor {
                return Err(format!("gap or overlap at {s:#x}, expected {cursor:#x}"));
            }
            if l == 0 {
                return Err(format!("empty range at {s:#x}"));
            }
            if is_free && prev_free {
                return Err(format!("uncoalesced free range at {s:#x}"));
            }
            prev_free = is_free;
            cursor = s + l;
        }
        if cursor != self.capacity {
            return Err(format!("ranges end at {cursor:#x}, capacity {:#x}", self.capacity));
        }
        Ok(())
    }
}

/// A registered remote region: bytes in 1 MiB lock stripes plus the allocator.
///
/// Byte operations on disjoint stripes run concurrently; allocator updates
/// are serialized under their own lock.
#[derive(Debug)]
pub struct RemoteRegion {
    capacity: u64,
    stripes: Vec<Mutex<Vec<u8>>>,
    alloc: Mutex<RangeAllocator>,
}

impl RemoteRegion {
    pub fn new(capacity: u64) -> Self {
        let n = capacity.div_ceil(STRIPE);
        let stripes = (0..n)
            .map(|i| {
                let len = (capacity - i * STRIPE).min(STRIPE);
                Mutex::new(vec![0; len as usize])
            })
            .collect();
        RemoteRegion {
            capacity,
            stripes,
            alloc: Mutex::new(RangeAllocator::new(capacity)),
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn check_range(&self, offset: u64, len: u64) -> Result<(), FabricError> {
        match offset.checked_add(len) {
            Some(end) if end <= self.capacity => Ok(()),
            _ => Err(FabricError::OutOfBounds { offset, length: len }),
        }
    }

    pub fn read(&self, offset: u64, out: &mut [u8]) -> Result<(), FabricError> {
        self.check_range(offset, out.len() as u64)?;
        let mut done = 0usize;
        while done < out.len() {
            let pos = offset + done as u64;
            let (si, so) = ((pos / STRIPE) as usize, (pos % STRIPE) as usize);
            let stripe = self.stripes[si].lock();
            let n = (stripe.len() - so).min(out.len() - done);
            out[done..done + n].copy_from_slice(&stripe[so..so + n]);
            done += n;
        }
        Ok(())
    }

    pub fn read_vec(&self, offset: u64, len: u64) -> Result<Vec<u8>, FabricError> {
        self.check_range(offset, len)?;
        let mut v = vec![0; len as usize];
        self.read(offset, &mut v)?;
        Ok(v)
    }

    pub fn write(&self, offset: u64, data: &[u8]) -> Result<(), FabricError> {
        self.check_range(offset, data.len() as u64)?;
        let mut done = 0usize;
        while done < data.len() {
            let pos = offset + done as u64;
            let (si, so) = ((pos / STRIPE) as usize, (pos % STRIPE) as usize);
            let mut stripe = self.stripes[si].lock();
            let n = (stripe.len() - so).min(data.len() - done);
            stripe[so..so + n].copy_from_slice(&data[done..done + n]);
            done += n;
        }
        Ok(())
    }

    fn with_word<R>(&self, offset: u64, f: impl FnOnce(&mut [u8]) -> R) -> Result<R, FabricError> {
        if !offset.is_multiple_of(8) {
            return Err(FabricError::Misaligned { offset });
        }
        self.check_range(offset, 8)?;
        // 8-byte aligned words never straddle a stripe.
        let mut stripe = self.stripes[(offset / STRIPE) as usize].lock();
        let so = (offset % STRIPE) as usize;
        Ok(f(&mut stripe[so..so + 8]))
    }

    /// Compare-and-swap on a little-endian word. Returns the previous value.
    pub fn cas(&self, offset: u64, expected: u64, desired: u64) -> Result<u64, FabricError> {
        self.with_word(offset, |w| {
            let prev = u64::from_le_bytes(w.try_into().unwrap());
            if prev == expected {
                w.copy_from_slice(&desired.to_le_bytes());
            }
            prev
        })
    }

    /// Wrapping fetch-and-add on a little-endian word. Returns the previous value.
    pub fn fadd(&self, offset: u64, delta: u64) -> Result<u64, FabricError> {
        self.with_word(offset, |w| {
            let prev = u64::from_le_bytes(w.try_into().unwrap());
            w.copy_from_slice(&prev.wrapping_add(delta).to_le_bytes());
            prev
        })
    }

    pub fn alloc(&self, size: u64) -> Result<u64, FabricError> {
        self.alloc.lock().alloc(size)
    }

    /// Releases an allocation and zeroes its bytes, so every fresh
    /// allocation reads as zeros.
    pub fn free(&self, offset: u64) -> Result<(), FabricError> {
        let mut a = self.alloc.lock();
        let len = a.allocation_len(offset).ok_or(FabricError::DoubleFree { offset })?;
        // Zero under the allocator lock so a concurrent alloc cannot see the
        // range before it is clean.
        self.write(offset, &vec![0; len as usize])?;
        a.free(offset)
    }

    pub fn allocator(&self) -> RangeAllocator {
        self.alloc.lock().clone()
    }

    pub fn contents(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(self.capacity as usize);
        for s in &self.stripes {
            v.extend_from_slice(&s.lock());
        }
        v
    }

    /// Writes the allocation map and all bytes to `path`.
    pub fn snapshot(&self, path: &Path) -> Result<(), FabricError> {
        let alloc = self.allocator();
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        w.write_all(&self.capacity.to_le_bytes())?;
        for ranges in [alloc.free_ranges(), alloc.allocated_ranges()] {
            w.write_all(&(ranges.len() as u64).to_le_bytes())?;
            for (s, l) in ranges {
                w.write_all(&s.to_le_bytes())?;
                w.write_all(&l.to_le_bytes())?;
            }
        }
        for s in &self.stripes {
            w.write_all(&s.lock())?;
        }
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        Ok(())
    }

    /// Rebuilds a region from a snapshot file.
    pub fn restore(path: &Path) -> Result<Self, FabricError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(FabricError::Protocol("not a region snapshot".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        if u32::from_le_bytes(b4) != SNAPSHOT_VERSION {
            return Err(FabricError::Protocol("unsupported snapshot version".into()));
        }
        let mut rd = || -> std::io::Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        };
        let capacity = rd()?;
        let mut maps = [BTreeMap::new(), BTreeMap::new()];
        for m in &mut maps {
            let n = rd()?;
            for _ in 0..n {
                let s = rd()?;
                let l = rd()?;
                m.insert(s, l);
            }
        }
        let [free, allocated] = maps;
        let alloc = RangeAllocator { capacity, free, allocated };
        alloc.check_invariants().map_err(FabricError::Protocol)?;
        let region = RemoteRegion::new(capacity);
        for s in &region.stripes {
            r.read_exact(&mut s.lock())?;
        }
        *region.alloc.lock() = alloc;
        Ok(region)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_fit_and_coalesce() {
        let mut a = RangeAllocator::new(4096);
        let x = a.alloc(1024).unwrap();
        let y = a.alloc(1024).unwrap();
        let z = a.alloc(1024).unwrap();
        assert_eq!((x, y, z), (0, 1024, 2048));
        a.free(y).unwrap();
        assert_eq!(a.alloc(512).unwrap(), 1024);
        a.free(1024).unwrap();
        a.free(x).unwrap();
        a.free(z).unwrap();
        assert_eq!(a.free_ranges(), vec![(0, 4096)]);
        a.check_invariants().unwrap();
    }

    #[test]
    fn oom_and_double_free() {
        let mut a = RangeAllocator::new(1024);
        assert!(matches!(a.alloc(2048), Err(FabricError::RemoteOom { .. })));
        let x = a.alloc(3).unwrap();
        assert_eq!(a.allocation_len(x), Some(8));
        a.free(x).unwrap();
        assert!(matches!(a.free(x), Err(FabricError::DoubleFree { .. })));
    }

    #[test]
    fn cross_stripe_io() {
        let r = RemoteRegion::new(3 * STRIPE);
        let data: Vec<u8> = (0..100).collect();
        r.write(STRIPE - 50, &data).unwrap();
        assert_eq!(r.read_vec(STRIPE - 50, 100).unwrap(), data);
        assert!(r.read_vec(3 * STRIPE - 1, 2).is_err());
    }

    #[test]
    fn atomics() {
        let r = RemoteRegion::new(STRIPE);
        assert_eq!(r.cas(8, 0, 7).unwrap(), 0);
        assert_eq!(r.cas(8, 0, 9).unwrap(), 7);
        assert_eq!(r.fadd(8, 3).unwrap(), 7);
        assert_eq!(r.read_vec(8, 8).unwrap(), 10u64.to_le_bytes());
        assert!(matches!(r.cas(4, 0, 1), Err(FabricError::Misaligned { offset: 4 })));
    }
}
