//! Runs a workload twice: all-local (the oracle) and under the runtime with
//! a local budget of `fraction × oracle peak`.
//!
//! Threads are modeled as lanes stepping in lockstep: in every step each lane
//! processes one chunk through its own cache partition and cluster channel,
//! and the step is charged the slowest lane's compute. This keeps runs
//! deterministic on the virtual clock.

use std::collections::VecDeque;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::workload::WorkloadSpec;
use crate::clock::{ns_to_us, Clock};
use crate::fabric::sim::SimFabric;
use crate::fabric::tcp::TcpFabric;
use crate::fabric::{Fabric, FabricStats, LatencyModel, ModelKind};
use crate::placement::ObjectId;
use crate::prefetch::{IterationPlan, PlanRead, Prefetcher};
use crate::runtime::{AccessOpts, FetchTicket, ObjectHandle, RegionLayout, Runtime, RuntimeConfig, ENTRY_BYTES};
use crate::threads::ThreadPoolConfig;

const MIB: u64 = 1 << 20;
/// Chunks smaller than a page make a run degenerate.
pub const MIN_CHUNK: u64 = 4096;
/// Transfer size whose local cost per byte is charged for streaming access.
const LOCAL_UNIT: u64 = 4 * MIB;
const ORACLE_CHUNK: u64 = MIB;
/// Largest chunk streamed through the cache. A bigger cache buys a deeper
/// read-ahead window instead of bigger chunks.
pub const MAX_CHUNK: u64 = 256 * 1024;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Sim,
    Tcp,
}

/// Knobs of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub fraction: f64,
    pub threads: usize,
    pub cluster_size: usize,
    pub dual_buffer: bool,
    pub async_write: bool,
    pub seed: u64,
    pub backend: Backend,
    #[serde(default)]
    pub memnode: Option<String>,
    #[serde(default)]
    pub profile: Option<PathBuf>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            fraction: 0.5,
            threads: 1,
            cluster_size: 1,
            dual_buffer: true,
            async_write: true,
            seed: 42,
            backend: Backend::Sim,
            memnode: None,
            profile: None,
        }
    }
}

impl BenchConfig {
    pub fn with_fraction(mut self, f: f64) -> Self {
        self.fraction = f;
        self
    }

    pub fn with_dual_buffer(mut self, on: bool) -> Self {
        self.dual_buffer = on;
        self
    }

    pub fn with_threads(mut self, threads: usize, cluster_size: usize) -> Self {
        self.threads = threads;
        self.cluster_size = cluster_size;
        self
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RunStatus {
    Ok,
    /// The budget leaves less than a page per chunk.
    Degenerate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub spec: String,
    pub config: BenchConfig,
    pub status: RunStatus,
    pub oracle_time_us: f64,
    pub dolma_time_us: f64,
    pub degradation: f64,
    pub oracle_peak_bytes: u64,
    pub peak_local_bytes: u64,
    pub local_reduction: f64,
    pub stall_us: f64,
    /// Local object region plus cache: `fraction × oracle peak`.
    pub budget_bytes: u64,
    /// Metadata region on top of the budget (object table and staging).
    pub allowance_bytes: u64,
    pub local_object_bytes: u64,
    pub cache_bytes: u64,
    pub chunk_bytes: u64,
    pub chunks: u64,
    pub capacity_violations: u64,
    pub fabric: FabricStats,
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid workload: {0}")]
    Spec(String),
    #[error("fraction {0} is outside (0, 1]")]
    Fraction(f64),
    #[error("the tcp backend needs a memory node address")]
    NoMemnode,
    #[error(transparent)]
    Runtime(#[from] crate::runtime::RuntimeError),
    #[error(transparent)]
    Prefetch(#[from] crate::prefetch::PrefetchError),
    #[error(transparent)]
    Fabric(#[from] crate::fabric::FabricError),
    #[error(transparent)]
    Profile(#[from] crate::fabric::latency::ProfileError),
    #[error(transparent)]
    Threads(#[from] crate::threads::ThreadsError),
}

/// Budget split for one run.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct LayoutPlan {
    pub layout: RegionLayout,
    pub budget: u64,
}

/// Layout for `fraction` of `oracle_peak`. A budget covering the whole peak
/// keeps everything local; otherwise it is split evenly between the local
/// object region and the cache. The metadata region comes on top.
pub fn layout_for(fraction: f64, oracle_peak: u64) -> LayoutPlan {
    let budget = (fraction * oracle_peak as f64).floor() as u64;
    let (local, cache) = if budget >= oracle_peak {
        (budget, 0)
    } else {
        let cache = (budget / 2) & !15;
        (budget - cache, cache)
    };
    let metadata = (budget / 4).clamp(256 * 1024, crate::runtime::DEFAULT_STAGING_BYTES);
    LayoutPlan {
        layout: RegionLayout {
            local_object_bytes: local,
            remote_cache_bytes: cache,
            metadata_bytes: metadata,
        },
        budget,
    }
}

/// Local costs in femtoseconds per byte. Integer rates with an exact carry
/// make the charge for a run independent of how its bytes are split up.
struct Costs {
    compute_per_byte: u128,
    read_per_byte: u128,
    write_per_byte: u128,
}

const FS_PER_US: f64 = 1e9;
const FS_PER_NS: u128 = 1_000_000;

impl Costs {
    fn new(spec: &WorkloadSpec, model: &LatencyModel) -> Self {
        let pattern = spec.access.fabric_pattern();
        let rate = |us: f64, bytes: u64| (us * FS_PER_US / bytes as f64).round() as u128;
        Costs {
            compute_per_byte: rate(spec.compute_us, spec.population.large_bytes()),
            read_per_byte: rate(model.estimate_local(ModelKind::Read, pattern, LOCAL_UNIT), LOCAL_UNIT),
            write_per_byte: rate(model.estimate_local(ModelKind::Write, pattern, LOCAL_UNIT), LOCAL_UNIT),
        }
    }
}

/// Charges local work: virtual clocks advance, wall clocks sleep.
/// Sub-nanosecond remainders carry over to the next charge.
fn spend(clock: &Clock, carry: &mut u128, fs: u128) {
    let total = *carry + fs;
    let ns = (total / FS_PER_NS) as u64;
    *carry = total % FS_PER_NS;
    if ns == 0 {
        return;
    }
    if clock.is_virtual() {
        clock.charge(ns);
    } else {
        std::thread::sleep(Duration::from_nanos(ns));
    }
}

#[derive(Copy, Clone, Debug)]
struct Chunk {
    obj: usize,
    off: u64,
    len: u64,
}

struct PassResult {
    time_us: f64,
    stall_us: f64,
    peak: u64,
    violations: u64,
    chunks: u64,
}

struct Pass<'a> {
    spec: &'a WorkloadSpec,
    rt: &'a mut Runtime,
    costs: Costs,
    lanes: usize,
    chunk: u64,
    window: usize,
    seed: u64,
    handles: Vec<ObjectHandle>,
    buf: Vec<u8>,
    chunks: u64,
    carry: u128,
}

impl Pass<'_> {
    fn clock(&self) -> Clock {
        self.rt.clock().clone()
    }

    fn schedule(&self, iteration: u64) -> Vec<Chunk> {
        let mut v = Vec::new();
        for (obj, o) in self.spec.population.large.iter().enumerate() {
            let mut off = 0;
            while off < o.size {
                let len = self.chunk.min(o.size - off);
                v.push(Chunk { obj, off, len });
                off += len;
            }
        }
        if self.spec.access != super::workload::AccessKind::SeqStride {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ iteration.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            v.shuffle(&mut rng);
        }
        v
    }

    /// Prefetch plan: the first chunks of each iteration, as many whole
    /// chunks as fit one buffer's lane partitions.
    fn plan(&self, partition: u64) -> IterationPlan {
        let per_lane = (partition / self.chunk.next_multiple_of(8)) as usize;
        let per_iter = |i| {
            self.schedule(i)
                .into_iter()
                .take(per_lane * self.lanes)
                .map(|c| PlanRead {
                    object_id: self.handles[c.obj].object_id(),
                    offset: c.off,
                    length: c.len,
                })
                .collect::<Vec<_>>()
        };
        if self.spec.access == super::workload::AccessKind::SeqStride {
            IterationPlan::repeating(per_iter(0))
        } else {
            IterationPlan::new((0..self.spec.iterations).map(per_iter).collect())
        }
    }

    fn opts(&self, lane: usize) -> AccessOpts {
        AccessOpts {
            lane,
            pattern: self.spec.access.fabric_pattern(),
            streaming: false,
        }
    }

    /// Allocates every large object, then initializes them in order.
    /// Initial contents are not read back before the first iteration, so
    /// they stream home in pieces sized to keep two writes in the staging
    /// pool rather than passing through the cache chunk by chunk.
    fn setup(&mut self) -> Result<(), BenchError> {
        let clock = self.clock();
        for o in &self.spec.population.large {
            self.handles.push(self.rt.alloc_tagged(o.size, Some(&o.tag))?);
        }
        let piece = ((self.rt.config().staging_bytes / 2) & !7).max(self.chunk);
        for (i, o) in self.spec.population.large.iter().enumerate() {
            let h = self.handles[i];
            let data = vec![i as u8; piece.min(o.size) as usize];
            let mut off = 0;
            let mut lane = 0;
            while off < o.size {
                let n = piece.min(o.size - off);
                let opts = AccessOpts {
                    streaming: true,
                    ..self.opts(lane)
                };
                self.rt.write_with(h, off, &data[..n as usize], opts)?;
                spend(&clock, &mut self.carry, n as u128 * self.costs.write_per_byte);
                off += n;
                lane = (lane + 1) % self.lanes;
            }
        }
        Ok(())
    }

    fn fill(&mut self, b: u8) {
        if self.buf.first() != Some(&b) {
            self.buf.fill(b);
        }
    }

    fn issue(&mut self, c: Chunk, lane: usize) -> Result<FetchTicket, BenchError> {
        self.chunks += 1;
        let t = self.rt.read_with(self.handles[c.obj], c.off, c.len, self.opts(lane))?;
        Ok(t)
    }

    /// Waits for a chunk, reads whatever the ticket did not cover, then
    /// writes the chunk's share of output. Returns the lane's local cost.
    fn consume(&mut self, t: FetchTicket, c: Chunk, lane: usize, iteration: u64) -> Result<u128, BenchError> {
        let h = self.handles[c.obj];
        let (_, mut done) = self.rt.acquire(&t)?;
        while done < c.len {
            let t = self.rt.read_with(h, c.off + done, c.len - done, self.opts(lane))?;
            done += self.rt.acquire(&t)?.1;
        }
        let nw = ((c.len as f64 * self.spec.write_fraction()) as u64).clamp(1, c.len);
        self.fill((iteration as u8).wrapping_add(c.obj as u8).wrapping_add(1));
        self.rt.write_with(h, c.off, &self.buf[..nw as usize], self.opts(lane))?;
        Ok(c.len as u128 * (self.costs.compute_per_byte + self.costs.read_per_byte) + nw as u128 * self.costs.write_per_byte)
    }

    fn small_objects(&mut self) -> Result<(), BenchError> {
        let p = &self.spec.population;
        let (total, size, live) = (p.small_per_iteration, p.small_size.max(1), p.small_live.max(1));
        let clock = self.clock();
        let mut left = total;
        let data = vec![0x5Au8; size as usize];
        let mut back = vec![0u8; size as usize];
        while left > 0 {
            let n = left.min(live);
            let mut hs = Vec::with_capacity(n as usize);
            for _ in 0..n {
                let h = self.rt.alloc(size)?;
                self.rt.write(h, 0, &data)?;
                hs.push(h);
            }
            for &h in &hs {
                self.rt.read_sync(h, 0, &mut back)?;
                self.rt.free(h)?;
            }
            spend(
                &clock,
                &mut self.carry,
                (n * size) as u128 * (self.costs.read_per_byte + self.costs.write_per_byte),
            );
            left -= n;
        }
        Ok(())
    }

    fn iteration(&mut self, i: u64) -> Result<(), BenchError> {
        let clock = self.clock();
        let sched = self.schedule(i);
        let t = self.lanes;
        let steps = sched.len().div_ceil(t);
        let at = |s: usize, l: usize| sched.get(s * t + l).copied();
        if self.spec.access.pipelined() {
            let w = self.window;
            let mut pending: Vec<VecDeque<FetchTicket>> = (0..t).map(|_| VecDeque::new()).collect();
            for s in 0..w.min(steps) {
                for (l, q) in pending.iter_mut().enumerate() {
                    if let Some(c) = at(s, l) {
                        q.push_back(self.issue(c, l)?);
                    }
                }
            }
            for s in 0..steps {
                let mut cost: u128 = 0;
                for (l, q) in pending.iter_mut().enumerate() {
                    if let Some(c) = at(s, l) {
                        let tk = q.pop_front().expect("issued ahead");
                        cost = cost.max(self.consume(tk, c, l, i)?);
                    }
                }
                for (l, q) in pending.iter_mut().enumerate() {
                    if let Some(c) = at(s + w, l) {
                        q.push_back(self.issue(c, l)?);
                    }
                }
                spend(&clock, &mut self.carry, cost);
            }
        } else {
            for s in 0..steps {
                let mut cost: u128 = 0;
                for l in 0..t {
                    if let Some(c) = at(s, l) {
                        let tk = self.issue(c, l)?;
                        cost = cost.max(self.consume(tk, c, l, i)?);
                    }
                }
                spend(&clock, &mut self.carry, cost);
            }
        }
        Ok(())
    }

    fn run(mut self, prefetch: bool) -> Result<PassResult, BenchError> {
        self.setup()?;
        let mut pf = Prefetcher::disabled().with_horizon(self.spec.iterations);
        if prefetch && self.spec.access.pipelined() {
            let plan = self.plan(self.rt.lane_partition_bytes(0));
            pf.register_plan(self.rt, plan);
        }
        for i in 0..self.spec.iterations {
            pf.begin_iteration(self.rt, i)?;
            self.small_objects()?;
            self.iteration(i)?;
        }
        pf.finish(self.rt)?;
        // The run ends with its last iteration. Dirty cached data belongs to
        // objects freed right after, so draining it is cleanup, not run time.
        let time_us = self.rt.now_us();
        let stall_ns = self.rt.stats().stall_ns();
        self.rt.quiesce()?;
        let st = self.rt.stats();
        log::debug!(
            "{}: {:?} per-iteration stall {:?}",
            self.spec.name,
            st,
            pf.stall_report().per_iteration_us
        );
        Ok(PassResult {
            time_us,
            stall_us: pf.stall_report().total_us.max(ns_to_us(stall_ns)),
            peak: st.peak_local_bytes,
            violations: st.capacity_violations,
            chunks: self.chunks,
        })
    }
}

fn runtime_config(layout: RegionLayout, cfg: &BenchConfig) -> Result<RuntimeConfig, BenchError> {
    let mut rc = RuntimeConfig::new(layout);
    rc.threads = ThreadPoolConfig::new(cfg.threads, cfg.cluster_size.min(cfg.threads).max(1))?;
    rc.dual_buffer = cfg.dual_buffer;
    rc.async_write = cfg.async_write;
    rc.debug_poison = false;
    Ok(rc)
}

fn sim_capacity(spec: &WorkloadSpec) -> u64 {
    let p = &spec.population;
    let objects = p.large.len() as u64 + p.small_live;
    (p.large_bytes() + objects * 64 + p.small_live * p.small_size + MIB).next_multiple_of(MIB)
}

/// Oracle pass: everything local. Returns (time, peak local bytes).
pub fn run_oracle(spec: &WorkloadSpec, cfg: &BenchConfig, model: &LatencyModel) -> Result<(f64, u64), BenchError> {
    spec.validate().map_err(BenchError::Spec)?;
    let p = &spec.population;
    let everything = p.large_bytes() + p.small_live * p.small_size;
    let layout = RegionLayout::new(everything, 0, 256 * 1024)?;
    let fabric = SimFabric::new(MIB, model.clone());
    let mut rt = Runtime::new(
        runtime_config(
            layout,
            &BenchConfig {
                dual_buffer: false,
                ..cfg.clone()
            },
        )?,
        Arc::new(fabric),
    )?;
    let lanes = rt.lanes();
    let res = Pass {
        spec,
        costs: Costs::new(spec, model),
        rt: &mut rt,
        lanes,
        chunk: ORACLE_CHUNK,
        window: 1,
        seed: cfg.seed,
        handles: Vec::new(),
        buf: vec![0; ORACLE_CHUNK as usize],
        chunks: 0,
        carry: 0,
    }
    .run(false)?;
    Ok((res.time_us, res.peak))
}

fn partition_for(layout: &RegionLayout, cfg: &BenchConfig) -> u64 {
    let buffer = if cfg.dual_buffer {
        layout.half()
    } else {
        layout.remote_cache_bytes
    };
    buffer / cfg.threads.max(1) as u64
}

/// Chunk size the runtime streams with under `layout`: at most half a lane
/// partition, so one chunk can be consumed while the next one lands.
pub fn chunk_for(layout: &RegionLayout, cfg: &BenchConfig) -> u64 {
    (partition_for(layout, cfg) / 2).min(MAX_CHUNK) & !7
}

/// Chunks in flight per lane while one is consumed.
pub fn window_for(layout: &RegionLayout, cfg: &BenchConfig, chunk: u64) -> usize {
    ((partition_for(layout, cfg) / chunk.max(1)).saturating_sub(1)).max(1) as usize
}

/// Runs the oracle and the disaggregated pass and reports both.
pub fn run_workload(spec: &WorkloadSpec, cfg: &BenchConfig) -> Result<RunReport, BenchError> {
    let model = LatencyModel::load(cfg.profile.as_deref())?;
    run_workload_with(spec, cfg, &model)
}

pub fn run_workload_with(spec: &WorkloadSpec, cfg: &BenchConfig, model: &LatencyModel) -> Result<RunReport, BenchError> {
    spec.validate().map_err(BenchError::Spec)?;
    if !(cfg.fraction > 0.0 && cfg.fraction <= 1.0) {
        return Err(BenchError::Fraction(cfg.fraction));
    }
    let mut spec = spec.clone();
    spec.threads = cfg.threads;
    let (oracle_time, oracle_peak) = run_oracle(&spec, cfg, model)?;
    let plan = layout_for(cfg.fraction, oracle_peak);
    let layout = plan.layout;
    let all_local = layout.remote_cache_bytes == 0;
    let mut chunk = if all_local { ORACLE_CHUNK } else { chunk_for(&layout, cfg) };
    let status = if chunk < MIN_CHUNK { RunStatus::Degenerate } else { RunStatus::Ok };
    chunk = chunk.max(8);
    let window = if all_local { 1 } else { window_for(&layout, cfg, chunk) };

    let fabric: Arc<dyn Fabric> = match cfg.backend {
        Backend::Sim => Arc::new(SimFabric::new(sim_capacity(&spec), model.clone())),
        Backend::Tcp => {
            let addr = cfg.memnode.as_deref().ok_or(BenchError::NoMemnode)?;
            Arc::new(TcpFabric::connect(addr, model.clone())?)
        }
    };
    let mut rt = Runtime::new(runtime_config(layout, cfg)?, fabric.clone())?;
    let lanes = rt.lanes();
    let res = Pass {
        spec: &spec,
        costs: Costs::new(&spec, model),
        rt: &mut rt,
        lanes,
        chunk,
        window,
        seed: cfg.seed,
        handles: Vec::new(),
        buf: vec![0; chunk as usize],
        chunks: 0,
        carry: 0,
    }
    .run(cfg.dual_buffer)?;
    let degradation = res.time_us / oracle_time - 1.0;
    // Free everything so a shared memory node is left empty.
    let ids: Vec<ObjectId> = rt.descriptors().iter().map(|d| d.object_id).collect();
    for id in ids {
        if let Some(h) = rt.handle_of(id) {
            rt.free(h)?;
        }
    }
    Ok(RunReport {
        spec: spec.name.clone(),
        config: cfg.clone(),
        status,
        oracle_time_us: oracle_time,
        dolma_time_us: res.time_us,
        degradation,
        oracle_peak_bytes: oracle_peak,
        peak_local_bytes: res.peak,
        local_reduction: 1.0 - res.peak as f64 / oracle_peak as f64,
        stall_us: res.stall_us,
        budget_bytes: plan.budget,
        allowance_bytes: layout.metadata_bytes,
        local_object_bytes: layout.local_object_bytes,
        cache_bytes: layout.remote_cache_bytes,
        chunk_bytes: chunk,
        chunks: res.chunks,
        capacity_violations: res.violations,
        fabric: fabric.stats(),
    })
}

/// Metadata bytes the runtime charges per remote object; exported for
/// reporting the allowance.
pub const METADATA_ENTRY_BYTES: u64 = ENTRY_BYTES;

/// Runs `spec` at each fraction.
pub fn fraction_sweep(spec: &WorkloadSpec, cfg: &BenchConfig, fractions: &[f64]) -> Result<Vec<RunReport>, BenchError> {
    let model = LatencyModel::load(cfg.profile.as_deref())?;
    fractions
        .iter()
        .map(|&f| run_workload_with(spec, &cfg.clone().with_fraction(f), &model))
        .collect()
}

/// Runs `spec` with the dual buffer off and on; returns (off, on).
pub fn ablation(spec: &WorkloadSpec, cfg: &BenchConfig) -> Result<(RunReport, RunReport), BenchError> {
    let model = LatencyModel::load(cfg.profile.as_deref())?;
    let off = run_workload_with(spec, &cfg.clone().with_dual_buffer(false), &model)?;
    let on = run_workload_with(spec, &cfg.clone().with_dual_buffer(true), &model)?;
    Ok((off, on))
}

/// Runs `spec` scaled by each factor at a fixed fraction.
pub fn size_sweep(spec: &WorkloadSpec, cfg: &BenchConfig, factors: &[f64]) -> Result<Vec<RunReport>, BenchError> {
    let model = LatencyModel::load(cfg.profile.as_deref())?;
    factors
        .iter()
        .map(|&k| {
            let mut s = spec.scaled(k);
            s.name = format!("{}x{k}", spec.name);
            run_workload_with(&s, cfg, &model)
        })
        .collect()
}

/// The fractions of the evaluation.
pub const FRACTIONS: [f64; 6] = [0.01, 0.05, 0.20, 0.50, 0.70, 1.00];
