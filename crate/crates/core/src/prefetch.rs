//! Dual-buffer prefetcher for iterative applications.
//!
//! While iteration `i` computes out of the active buffer, the reads planned
//! for iteration `i + 1` land in the idle buffer. At the next iteration
//! boundary the prefetcher waits for them, swaps the buffers and clears the
//! buffer that just went idle.

use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::clock::{ns_to_us, Nanos};
use crate::placement::ObjectId;
use crate::runtime::{AccessOpts, FetchTicket, Runtime, RuntimeError};

/// One expected read of an iteration.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanRead {
    pub object_id: ObjectId,
    pub offset: u64,
    pub length: u64,
}

/// Plan file entry; objects are named by their allocation tag.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedRead {
    pub object_tag: String,
    pub offset: u64,
    pub length: u64,
}

/// Expected reads per iteration. Iterations past the end of the list reuse
/// it cyclically, matching a fixed per-iteration working set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationPlan {
    pub iterations: Vec<Vec<PlanRead>>,
    /// Iterations fetched ahead into the idle buffer.
    pub depth: usize,
}

impl IterationPlan {
    pub fn new(iterations: Vec<Vec<PlanRead>>) -> Self {
        IterationPlan { iterations, depth: 1 }
    }

    /// Same reads every iteration.
    pub fn repeating(reads: Vec<PlanRead>) -> Self {
        IterationPlan::new(vec![reads])
    }

    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth = depth.max(1);
        self
    }

    pub fn is_empty(&self) -> bool {
        self.iterations.iter().all(Vec::is_empty)
    }

    pub fn reads_for(&self, i: u64) -> &[PlanRead] {
        if self.iterations.is_empty() {
            return &[];
        }
        &self.iterations[(i % self.iterations.len() as u64) as usize]
    }

    /// Plan from a JSON file: a list of iterations, each a list of
    /// `{object_tag, offset, length}`. Tags are resolved against `rt`.
    pub fn load(path: &Path, rt: &Runtime) -> anyhow::Result<Self> {
        let iters: Vec<Vec<TaggedRead>> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let mut out = Vec::with_capacity(iters.len());
        for reads in iters {
            let mut v = Vec::with_capacity(reads.len());
            for r in reads {
                let h = rt
                    .find_tagged(&r.object_tag)
                    .ok_or_else(|| anyhow::anyhow!("plan names unknown object tag {:?}", r.object_tag))?;
                v.push(PlanRead {
                    object_id: h.object_id(),
                    offset: r.offset,
                    length: r.length,
                });
            }
            out.push(v);
        }
        Ok(IterationPlan::new(out))
    }

    /// Plan that repeats the reads recorded by the runtime.
    pub fn from_recorded(reads: Vec<(ObjectId, u64, u64)>) -> Self {
        IterationPlan::repeating(
            reads
                .into_iter()
                .map(|(object_id, offset, length)| PlanRead { object_id, offset, length })
                .collect(),
        )
    }
}

/// Clips `reads` to at most `budget` bytes of cache space, counting each read
/// at its 8-byte aligned size. Returns the clipped list and whether anything
/// was cut.
pub fn truncate_to(reads: &[PlanRead], budget: u64) -> (Vec<PlanRead>, bool) {
    let mut left = budget;
    let mut out = Vec::new();
    for r in reads {
        let need = r.length.next_multiple_of(8);
        if need <= left {
            out.push(*r);
            left -= need;
            continue;
        }
        let n = left & !7;
        if n > 0 {
            out.push(PlanRead { length: n, ..*r });
        }
        return (out, true);
    }
    (out, false)
}

/// Stall accumulated by the application, per iteration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StallReport {
    pub total_us: f64,
    pub per_iteration_us: Vec<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum PrefetchError {
    #[error("iteration {got} follows {expected} out of order")]
    OutOfOrder { expected: u64, got: u64 },
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}

/// Drives iteration boundaries for one runtime.
#[derive(Debug, Default)]
pub struct Prefetcher {
    plan: Option<IterationPlan>,
    next: Option<u64>,
    /// Tickets for the iteration that will run next, issued into the idle buffer.
    pending: Vec<FetchTicket>,
    stalls: Vec<Nanos>,
    mark: Nanos,
    warnings: Vec<String>,
    /// Iterations at or past this index are never prefetched.
    horizon: Option<u64>,
}

impl Prefetcher {
    /// Prefetcher with no plan: every iteration fetches on demand.
    pub fn disabled() -> Self {
        Prefetcher::default()
    }

    /// Stops prefetching at iteration `n`, for runs of known length.
    pub fn with_horizon(mut self, n: u64) -> Self {
        self.horizon = Some(n);
        self
    }

    pub fn is_enabled(&self) -> bool {
        self.plan.is_some()
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Arms the prefetcher. An empty plan, or a runtime without a dual
    /// buffer, leaves it disabled. Iterations whose reads exceed one buffer
    /// are truncated to their largest fitting prefix.
    pub fn register_plan(&mut self, rt: &Runtime, plan: IterationPlan) {
        if plan.is_empty() {
            self.plan = None;
            return;
        }
        if !rt.config().dual_buffer {
            self.warn("dual buffer is off; prefetching disabled".into());
            self.plan = None;
            return;
        }
        let half = rt.config().buffer_bytes();
        let mut iterations = Vec::with_capacity(plan.iterations.len());
        for (i, reads) in plan.iterations.iter().enumerate() {
            let (clipped, cut) = truncate_to(reads, half);
            if cut {
                let want: u64 = reads.iter().map(|r| r.length).sum();
                self.warn(format!("iteration {i} plans {want} bytes; truncated to the {half}-byte buffer"));
            }
            iterations.push(clipped);
        }
        self.plan = Some(IterationPlan {
            iterations,
            depth: plan.depth.max(1),
        });
    }

    fn warn(&mut self, msg: String) {
        warn!("{msg}");
        self.warnings.push(msg);
    }

    /// Reads that go into the idle buffer while iteration `i` runs.
    fn ahead_of(&self, i: u64) -> Vec<PlanRead> {
        let plan = self.plan.as_ref().expect("enabled");
        let mut reads = Vec::new();
        for k in 1..=plan.depth as u64 {
            if self.horizon.is_some_and(|h| i + k >= h) {
                break;
            }
            reads.extend_from_slice(plan.reads_for(i + k));
        }
        reads
    }

    fn issue(&mut self, rt: &mut Runtime, reads: &[PlanRead]) -> Result<Vec<FetchTicket>, RuntimeError> {
        let (reads, _) = truncate_to(reads, rt.config().buffer_bytes());
        let lanes = rt.lanes();
        let mut tickets = Vec::with_capacity(reads.len());
        for (k, r) in reads.iter().enumerate() {
            let Some(h) = rt.handle_of(r.object_id) else {
                self.warn(format!("planned object {} no longer exists", r.object_id));
                continue;
            };
            let opts = AccessOpts::lane(k % lanes);
            tickets.push(rt.prefetch(h, r.offset, r.length, opts)?);
        }
        Ok(tickets)
    }

    fn close_iteration(&mut self, rt: &Runtime) {
        let now = rt.stats().stall_ns();
        if self.next.is_some() {
            self.stalls.push(now - self.mark);
        }
        self.mark = now;
    }

    /// Starts iteration `i`. The first iteration reads on demand like an
    /// unprefetched one; later calls wait for the prefetched reads, swap buffers, clear the new
    /// idle buffer and start fetching the next iteration into it. Without a
    /// plan, cached data from the previous iteration is dropped so every
    /// iteration fetches on demand.
    pub fn begin_iteration(&mut self, rt: &mut Runtime, i: u64) -> Result<(), PrefetchError> {
        if let Some(expected) = self.next {
            if i != expected {
                return Err(PrefetchError::OutOfOrder { expected, got: i });
            }
        }
        let cold = self.next.is_none();
        self.close_iteration(rt);
        self.next = Some(i + 1);
        rt.set_iteration(i);

        if self.plan.is_none() {
            if !cold {
                let active = rt.active_buffer();
                rt.retire_buffer(active)?;
            }
            return Ok(());
        }

        if !cold {
            for t in std::mem::take(&mut self.pending) {
                rt.acquire(&t)?;
            }
            rt.swap_buffers();
        }
        rt.retire_idle()?;
        let ahead = self.ahead_of(i);
        self.pending = self.issue(rt, &ahead)?;
        Ok(())
    }

    /// Closes the last iteration and releases outstanding prefetches.
    pub fn finish(&mut self, rt: &mut Runtime) -> Result<(), RuntimeError> {
        if self.next.is_some() {
            self.close_iteration(rt);
        }
        for t in std::mem::take(&mut self.pending) {
            rt.acquire(&t)?;
        }
        self.next = None;
        Ok(())
    }

    pub fn stall_report(&self) -> StallReport {
        let per: Vec<f64> = self.stalls.iter().map(|&n| ns_to_us(n)).collect();
        StallReport {
            total_us: ns_to_us(self.stalls.iter().sum()),
            per_iteration_us: per,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(len: u64) -> PlanRead {
        PlanRead {
            object_id: 1,
            offset: 0,
            length: len,
        }
    }

    #[test]
    fn truncation_keeps_prefix() {
        let (v, cut) = truncate_to(&[r(40 << 20)], 35 << 20);
        assert!(cut);
        assert_eq!(v, vec![r(35 << 20)]);
        let (v, cut) = truncate_to(&[r(1 << 20)], 35 << 20);
        assert!(!cut);
        assert_eq!(v.len(), 1);
        let (v, _) = truncate_to(&[r(20), r(20)], 30);
        assert_eq!(v, vec![r(20)]);
    }

    #[test]
    fn cyclic_plan() {
        let p = IterationPlan::new(vec![vec![r(1)], vec![r(2)]]);
        assert_eq!(p.reads_for(3)[0].length, 2);
        assert!(IterationPlan::new(vec![vec![]]).is_empty());
    }
}
