//! Deterministic simulated fabric.
//!
//! Every channel is an independent FIFO server: an operation starts when it
//! has been issued and the previous one on the channel has finished, and it
//! takes the modeled latency. Time is a virtual clock shared by the fabric
//! and its channels; it moves only when work is charged or a caller blocks.
//!
//! Remote effects of WRITEs and atomics are applied at submit. READs capture
//! remote bytes at submit and land them in the local slice when the operation
//! retires, i.e. once the clock reaches its completion time.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;

use super::region::RemoteRegion;
use super::{
    Channel, ChannelId, Completion, CompletionStatus, Fabric, FabricError, FabricOp, FabricStats, LatencyModel, LocalSlice, OpId, OpKind,
    RemoteAddr, StatCounters,
};
use crate::clock::{us_to_ns, Clock, Nanos};

struct Shared {
    region: RemoteRegion,
    model: LatencyModel,
    clock: Clock,
    stats: StatCounters,
    next_channel: AtomicU32,
    faults: Mutex<Vec<(u64, u64)>>,
}

impl Shared {
    fn faulted(&self, offset: u64, len: u64) -> bool {
        self.faults.lock().iter().any(|&(s, l)| offset < s + l && s < offset + len)
    }

    fn latency_ns(&self, op: &FabricOp) -> Nanos {
        us_to_ns(self.model.estimate(op.kind.model_kind(), op.pattern, op.length)).max(1)
    }
}

#[derive(Clone)]
pub struct SimFabric {
    shared: Arc<Shared>,
}

impl SimFabric {
    pub fn new(capacity: u64, model: LatencyModel) -> Self {
        SimFabric::from_region(RemoteRegion::new(capacity), model)
    }

    pub fn from_region(region: RemoteRegion, model: LatencyModel) -> Self {
        SimFabric {
            shared: Arc::new(Shared {
                region,
                model,
                clock: Clock::new_virtual(),
                stats: StatCounters::default(),
                next_channel: AtomicU32::new(0),
                faults: Mutex::new(Vec::new()),
            }),
        }
    }

    pub fn region(&self) -> &RemoteRegion {
        &self.shared.region
    }

    /// Operations touching `[offset, offset+len)` complete with REMOTE_ERROR
    /// and have no effect until [`SimFabric::clear_faults`].
    pub fn inject_fault(&self, offset: u64, len: u64) {
        self.shared.faults.lock().push((offset, len));
    }

    pub fn clear_faults(&self) {
        self.shared.faults.lock().clear();
    }

    fn channel(&self, clock: Clock) -> SimChannel {
        SimChannel {
            id: self.shared.next_channel.fetch_add(1, Ordering::Relaxed),
            shared: self.shared.clone(),
            clock,
            busy_until: 0,
            next_op: 1,
            pending: VecDeque::new(),
            ready: VecDeque::new(),
        }
    }
}

impl Fabric for SimFabric {
    fn open_channel(&self) -> Result<Box<dyn Channel>, FabricError> {
        Ok(Box::new(self.channel(self.shared.clock.clone())))
    }

    fn open_channel_with_clock(&self, clock: Clock) -> Result<Box<dyn Channel>, FabricError> {
        Ok(Box::new(self.channel(clock)))
    }

    fn remote_alloc(&self, size: u64) -> Result<RemoteAddr, FabricError> {
        self.shared.region.alloc(size).map(RemoteAddr::new)
    }

    fn remote_free(&self, addr: RemoteAddr) -> Result<(), FabricError> {
        self.shared.region.free(addr.offset)
    }

    fn atomic_cas(&self, addr: RemoteAddr, expected: u64, desired: u64) -> Result<u64, FabricError> {
        let s = &self.shared;
        let prev = s.region.cas(addr.offset, expected, desired)?;
        s.stats.record(OpKind::AtomicCas { expected, desired }, 8);
        s.clock
            .charge(us_to_ns(s.model.estimate(super::ModelKind::Read, super::AccessPattern::Seq, 8)));
        Ok(prev)
    }

    fn atomic_fadd(&self, addr: RemoteAddr, delta: u64) -> Result<u64, FabricError> {
        let s = &self.shared;
        let prev = s.region.fadd(addr.offset, delta)?;
        s.stats.record(OpKind::AtomicFadd { delta }, 8);
        s.clock
            .charge(us_to_ns(s.model.estimate(super::ModelKind::Read, super::AccessPattern::Seq, 8)));
        Ok(prev)
    }

    fn snapshot(&self, path: &Path) -> Result<(), FabricError> {
        self.shared.region.snapshot(path)
    }

    fn capacity(&self) -> u64 {
        self.shared.region.capacity()
    }

    fn max_transfer_bytes(&self) -> u64 {
        self.shared.model.max_transfer_bytes()
    }

    fn model(&self) -> &LatencyModel {
        &self.shared.model
    }

    fn clock(&self) -> Clock {
        self.shared.clock.clone()
    }

    fn stats(&self) -> FabricStats {
        self.shared.stats.snapshot()
    }
}

struct Pending {
    op_id: OpId,
    completed_at: Nanos,
    status: CompletionStatus,
    signaled: bool,
    landing: Option<(LocalSlice, Vec<u8>)>,
}

pub struct SimChannel {
    id: ChannelId,
    shared: Arc<Shared>,
    clock: Clock,
    busy_until: Nanos,
    next_op: OpId,
    pending: VecDeque<Pending>,
    ready: VecDeque<Completion>,
}

impl SimChannel {
    /// Applies remote effects now and returns the completion status plus any
    /// bytes to land at retirement.
    fn execute(&self, op: &FabricOp) -> (CompletionStatus, Option<(LocalSlice, Vec<u8>)>) {
        let s = &self.shared;
        if s.faulted(op.remote.offset, op.length) {
            return (CompletionStatus::RemoteError, None);
        }
        let short = (op.local.len as u64) < op.length;
        let status = if short { CompletionStatus::Truncated } else { CompletionStatus::Ok };
        let remote = op.remote.offset;
        match op.kind {
            OpKind::Write => {
                if short {
                    return (status, None);
                }
                let data = op.local.to_vec();
                s.region.write(remote, &data).expect("validated at submit");
                (status, None)
            }
            OpKind::Read => {
                let data = s.region.read_vec(remote, op.length).expect("validated at submit");
                (status, Some((op.local.clone(), data)))
            }
            OpKind::AtomicCas { expected, desired } => {
                let prev = s.region.cas(remote, expected, desired).expect("validated at submit");
                (status, Some((op.local.clone(), prev.to_le_bytes().to_vec())))
            }
            OpKind::AtomicFadd { delta } => {
                let prev = s.region.fadd(remote, delta).expect("validated at submit");
                (status, Some((op.local.clone(), prev.to_le_bytes().to_vec())))
            }
        }
    }

    /// Retires every pending op that has completed by `t`.
    fn retire(&mut self, t: Nanos) {
        while self.pending.front().is_some_and(|p| p.completed_at <= t) {
            let p = self.pending.pop_front().unwrap();
            if let Some((slice, data)) = p.landing {
                slice.land(&data);
            }
            if p.signaled {
                self.ready.push_back(Completion {
                    op_id: p.op_id,
                    status: p.status,
                    completed_at: p.completed_at,
                });
            }
        }
    }
}

impl Channel for SimChannel {
    fn id(&self) -> ChannelId {
        self.id
    }

    fn submit(&mut self, op: FabricOp) -> Result<OpId, FabricError> {
        let s = &self.shared;
        op.validate(s.region.capacity(), s.model.max_transfer_bytes())?;
        let op_id = self.next_op;
        self.next_op += 1;
        let start = self.clock.now().max(self.busy_until);
        let completed_at = start + s.latency_ns(&op);
        self.busy_until = completed_at;
        s.stats.record(op.kind, op.length);
        let (status, landing) = self.execute(&op);
        self.pending.push_back(Pending {
            op_id,
            completed_at,
            status,
            signaled: op.signaled,
            landing,
        });
        Ok(op_id)
    }

    fn poll(&mut self, max: usize) -> Vec<Completion> {
        self.retire(self.clock.now());
        let n = max.min(self.ready.len());
        self.ready.drain(..n).collect()
    }

    fn wait(&mut self, op_id: OpId) -> Result<Completion, FabricError> {
        if let Some(p) = self.pending.iter().find(|p| p.op_id == op_id) {
            let t = p.completed_at;
            self.clock.advance_to(t);
            self.retire(t);
        }
        match self.ready.iter().position(|c| c.op_id == op_id) {
            Some(i) => Ok(self.ready.remove(i).unwrap()),
            None => Err(FabricError::UnknownOp(op_id)),
        }
    }

    fn fence(&mut self) {
        // A FIFO server never starts an op before its predecessor completes,
        // so the ordering point needs no extra time.
        self.shared.stats.record_fence();
    }

    fn drain(&mut self) -> Result<(), FabricError> {
        if let Some(p) = self.pending.back() {
            self.clock.advance_to(p.completed_at);
        }
        self.retire(Nanos::MAX);
        Ok(())
    }

    fn outstanding(&self) -> usize {
        self.pending.len() + self.ready.len()
    }

    fn completion_time(&self, op_id: OpId) -> Option<Nanos> {
        self.pending
            .iter()
            .find(|p| p.op_id == op_id)
            .map(|p| p.completed_at)
            .or_else(|| self.ready.iter().find(|c| c.op_id == op_id).map(|c| c.completed_at))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::{AccessPattern, MemoryRegion, ModelKind};

    fn fabric() -> SimFabric {
        SimFabric::new(1 << 24, LatencyModel::default())
    }

    #[test]
    fn submit_returns_before_completion() {
        let f = fabric();
        let mut ch = f.open_channel().unwrap();
        let buf = MemoryRegion::new(64);
        let id = ch.submit(FabricOp::write(RemoteAddr::new(0), buf.whole())).unwrap();
        assert!(ch.poll(10).is_empty());
        assert_eq!(f.clock().now(), 0);
        let c = ch.wait(id).unwrap();
        assert_eq!(c.status, CompletionStatus::Ok);
        assert_eq!(c.completed_at, f.clock().now());
        assert!(ch.poll(10).is_empty());
    }

    #[test]
    fn fifo_service_times() {
        let f = fabric();
        let m = f.model().clone();
        let mut ch = f.open_channel().unwrap();
        let buf = MemoryRegion::new(1 << 22);
        for _ in 0..3 {
            ch.submit(FabricOp::read(RemoteAddr::new(0), buf.whole())).unwrap();
        }
        f.clock().charge(1_000_000_000);
        let cs = ch.poll(10);
        let one = us_to_ns(m.estimate(ModelKind::Read, AccessPattern::Seq, 1 << 22));
        let times: Vec<_> = cs.iter().map(|c| c.completed_at).collect();
        assert_eq!(times, vec![one, 2 * one, 3 * one]);
    }

    #[test]
    fn read_lands_at_retirement() {
        let f = fabric();
        f.region().write(128, &[9; 16]).unwrap();
        let mut ch = f.open_channel().unwrap();
        let buf = MemoryRegion::new(16);
        let id = ch.submit(FabricOp::read(RemoteAddr::new(128), buf.whole())).unwrap();
        assert_eq!(buf.to_vec(), vec![0; 16]);
        ch.wait(id).unwrap();
        assert_eq!(buf.to_vec(), vec![9; 16]);
    }

    #[test]
    fn truncated_and_fault_statuses() {
        let f = fabric();
        let mut ch = f.open_channel().unwrap();
        let buf = MemoryRegion::new(8);
        let mut op = FabricOp::read(RemoteAddr::new(0), buf.whole());
        op.length = 16;
        let id = ch.submit(op).unwrap();
        assert_eq!(ch.wait(id).unwrap().status, CompletionStatus::Truncated);
        f.inject_fault(4096, 1);
        let id = ch.submit(FabricOp::write(RemoteAddr::new(4090), buf.whole())).unwrap();
        assert_eq!(ch.wait(id).unwrap().status, CompletionStatus::RemoteError);
        assert_eq!(f.region().read_vec(4090, 8).unwrap(), vec![0; 8]);
    }

    #[test]
    fn wait_twice_is_an_error() {
        let f = fabric();
        let mut ch = f.open_channel().unwrap();
        let buf = MemoryRegion::new(8);
        let id = ch.submit(FabricOp::read(RemoteAddr::new(0), buf.whole())).unwrap();
        ch.wait(id).unwrap();
        assert!(matches!(ch.wait(id), Err(FabricError::UnknownOp(_))));
    }

    #[test]
    fn private_clock_does_not_move_fabric_clock() {
        let f = fabric();
        let private = Clock::new_virtual();
        let mut ch = f.open_channel_with_clock(private.clone()).unwrap();
        let buf = MemoryRegion::new(4096);
        ch.submit(FabricOp::read(RemoteAddr::new(0), buf.whole())).unwrap();
        ch.drain().unwrap();
        assert!(private.now() > 0);
        assert_eq!(f.clock().now(), 0);
    }
}
