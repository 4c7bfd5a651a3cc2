//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use dolma::fabric::region::RemoteRegion;
use dolma::fabric::sim::SimFabric;
use dolma::fabric::tcp::TcpFabric;
use dolma::fabric::{ErrorCode, Fabric, FabricOp, LatencyModel, MemoryRegion, RemoteAddr};
use dolma::memnode::{self, MemnodeConfig, MemnodeHandle};
use dolma::placement::ObjectDescriptor;
use dolma::runtime::{ObjectHandle, RegionLayout, Runtime, RuntimeConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const KIB: u64 = 1024;
pub const MIB: u64 = 1 << 20;

pub fn sim(capacity: u64) -> SimFabric {
    SimFabric::new(capacity, LatencyModel::default())
}

/// A memory node on an ephemeral loopback port and a fabric connected to it.
pub fn memnode(capacity: u64) -> (MemnodeHandle, TcpFabric) {
    let node = memnode::spawn(MemnodeConfig {
        bind: "127.0.0.1:0".into(),
        capacity_bytes: capacity,
        snapshot_dir: None,
        restore: None,
    })
    .expect("memnode starts");
    let fabric = TcpFabric::connect(node.local_addr(), LatencyModel::default()).expect("connects");
    (node, fabric)
}

/// Whole remote region of any backend, read through a snapshot file for TCP.
pub fn region_contents(fabric: &dyn Fabric, sim: Option<&SimFabric>) -> Vec<u8> {
    if let Some(s) = sim {
        return s.region().contents();
    }
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("region.snap");
    fabric.snapshot(&p).expect("snapshot");
    RemoteRegion::restore(&p).expect("restore").contents()
}

/// Small runtime that exercises local objects, demotion, partial fetches and
/// both cache buffers.
pub fn small_runtime(fabric: Arc<dyn Fabric>) -> Runtime {
    let layout = RegionLayout::new(256 * KIB, 512 * KIB, MIB).unwrap();
    let mut cfg = RuntimeConfig::new(layout);
    cfg.debug_poison = true;
    Runtime::new(cfg, fabric).unwrap()
}

fn pick_size(rng: &mut ChaCha8Rng) -> u64 {
    match rng.gen_range(0..10) {
        0 => rng.gen_range(1..=8),
        1..=3 => rng.gen_range(9..=4096),
        4..=7 => rng.gen_range(4097..=96 * KIB),
        _ => rng.gen_range(96 * KIB..=600 * KIB),
    }
}

fn pick_range(rng: &mut ChaCha8Rng, size: u64) -> (u64, u64) {
    let off = rng.gen_range(0..size);
    let max = (size - off).min(if rng.gen_bool(0.2) { size } else { 16 * KIB });
    (off, rng.gen_range(1..=max))
}

/// Counts of the operations a differential run performed.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct DiffStats {
    pub ops: usize,
    pub reads: usize,
    pub partial_reads: usize,
    pub writes: usize,
    pub demotes: usize,
    pub flushes: usize,
    pub allocs: usize,
    pub frees: usize,
    pub prefetches: usize,
}

/// Runs `n` random operations against the runtime and a plain byte-vector
/// map, comparing every byte the runtime hands out. Ends by checking every
/// live object in full after a quiesce.
pub fn differential(fabric: Arc<dyn Fabric>, seed: u64, n: usize) -> Result<DiffStats, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rt = small_runtime(fabric);
    let mut oracle: BTreeMap<u64, (ObjectHandle, Vec<u8>)> = BTreeMap::new();
    let mut st = DiffStats::default();
    let fail = |i: usize, what: String| format!("seed {seed} op {i}: {what}");
    for i in 0..n {
        st.ops += 1;
        let roll = rng.gen_range(0..100);
        if oracle.is_empty() || (roll < 8 && oracle.len() < 24) {
            let size = pick_size(&mut rng);
            let h = rt.alloc(size).map_err(|e| fail(i, format!("alloc {size}: {e}")))?;
            oracle.insert(h.object_id(), (h, vec![0; size as usize]));
            st.allocs += 1;
            continue;
        }
        let keys: Vec<u64> = oracle.keys().copied().collect();
        let id = keys[rng.gen_range(0..keys.len())];
        let (h, size) = (oracle[&id].0, oracle[&id].1.len() as u64);
        match roll {
            8..=37 => {
                let (off, len) = pick_range(&mut rng, size);
                let data: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
                rt.write(h, off, &data).map_err(|e| fail(i, format!("write: {e}")))?;
                oracle.get_mut(&id).unwrap().1[off as usize..(off + len) as usize].copy_from_slice(&data);
                st.writes += 1;
            }
            38..=67 => {
                let (off, len) = pick_range(&mut rng, size);
                let t = rt.read(h, off, len).map_err(|e| fail(i, format!("read: {e}")))?;
                let (s_off, s_len) = rt.acquire(&t).map_err(|e| fail(i, format!("acquire: {e}")))?;
                if s_off != off || s_len == 0 || s_len > len {
                    return Err(fail(i, format!("read {off}+{len} satisfied {s_off}+{s_len}")));
                }
                if s_len < len {
                    st.partial_reads += 1;
                }
                let mut out = vec![0; s_len as usize];
                rt.copy_out(h, off, &mut out).map_err(|e| fail(i, format!("copy_out: {e}")))?;
                if out[..] != oracle[&id].1[off as usize..(off + s_len) as usize] {
                    return Err(fail(i, format!("object {id} bytes {off}+{s_len} differ")));
                }
                st.reads += 1;
            }
            68..=75 => {
                let (off, len) = pick_range(&mut rng, size);
                let mut out = vec![0; len as usize];
                rt.read_sync(h, off, &mut out).map_err(|e| fail(i, format!("read_sync: {e}")))?;
                if out[..] != oracle[&id].1[off as usize..(off + len) as usize] {
                    return Err(fail(i, format!("object {id} bytes {off}+{len} differ (sync)")));
                }
                st.reads += 1;
            }
            76..=83 => {
                rt.demote(h).map_err(|e| fail(i, format!("demote: {e}")))?;
                st.demotes += 1;
            }
            84..=86 => {
                rt.flush().map_err(|e| fail(i, format!("flush: {e}")))?;
                st.flushes += 1;
            }
            87..=91 => {
                rt.free(h).map_err(|e| fail(i, format!("free: {e}")))?;
                oracle.remove(&id);
                st.frees += 1;
            }
            92..=95 => {
                // Prefetch into the idle buffer, then make it the active one.
                let (off, len) = pick_range(&mut rng, size);
                let t = rt
                    .prefetch(h, off, len, Default::default())
                    .map_err(|e| fail(i, format!("prefetch: {e}")))?;
                rt.acquire(&t).map_err(|e| fail(i, format!("acquire prefetch: {e}")))?;
                rt.swap_buffers();
                rt.retire_idle().map_err(|e| fail(i, format!("retire: {e}")))?;
                st.prefetches += 1;
            }
            _ => {
                let mut out = vec![0; size as usize];
                rt.read_sync(h, 0, &mut out).map_err(|e| fail(i, format!("full read: {e}")))?;
                if out != oracle[&id].1 {
                    return Err(fail(i, format!("object {id} differs in full")));
                }
                st.reads += 1;
            }
        }
    }
    rt.quiesce().map_err(|e| fail(n, format!("quiesce: {e}")))?;
    for (id, (h, want)) in &oracle {
        let mut out = vec![0; want.len()];
        rt.read_sync(*h, 0, &mut out).map_err(|e| fail(n, format!("final read: {e}")))?;
        if &out != want {
            return Err(fail(n, format!("object {id} differs at the end")));
        }
    }
    Ok(st)
}

/// One operation of a raw fabric trace.
#[derive(Clone, Debug)]
pub enum TraceOp {
    Alloc(u64),
    /// Frees the k-th allocation ever made (may already be freed).
    Free(usize),
    Write {
        at: u64,
        data: Vec<u8>,
    },
    Read {
        at: u64,
        len: u64,
    },
    Cas {
        at: u64,
        expected: u64,
        desired: u64,
    },
    Fadd {
        at: u64,
        delta: u64,
    },
    Fence,
}

/// Observable result of one trace operation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TraceOutcome {
    Addr(u64),
    Unit,
    Bytes(Vec<u8>),
    Word(u64),
    Err(ErrorCode),
}

/// Random trace mixing valid operations with out-of-bounds, misaligned,
/// oversized and double-free requests.
pub fn random_trace(seed: u64, n: usize, capacity: u64) -> Vec<TraceOp> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut allocs = 0usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let op = match rng.gen_range(0..100) {
            0..=9 => {
                allocs += 1;
                TraceOp::Alloc(if rng.gen_bool(0.05) {
                    capacity * 2
                } else {
                    rng.gen_range(1..=64 * KIB)
                })
            }
            10..=14 if allocs > 0 => TraceOp::Free(rng.gen_range(0..allocs)),
            15..=44 => {
                let len = rng.gen_range(1..=4 * KIB);
                let at = if rng.gen_bool(0.05) {
                    capacity - len / 2
                } else {
                    rng.gen_range(0..capacity - len)
                };
                TraceOp::Write {
                    at,
                    data: (0..len).map(|_| rng.gen()).collect(),
                }
            }
            45..=74 => {
                let len = rng.gen_range(1..=4 * KIB);
                let at = if rng.gen_bool(0.05) {
                    capacity
                } else {
                    rng.gen_range(0..capacity - len)
                };
                TraceOp::Read { at, len }
            }
            75..=84 => {
                let at = rng.gen_range(0..capacity / 8) * 8 + if rng.gen_bool(0.1) { 4 } else { 0 };
                TraceOp::Cas {
                    at,
                    expected: rng.gen_range(0..3),
                    desired: rng.gen(),
                }
            }
            85..=94 => TraceOp::Fadd {
                at: rng.gen_range(0..capacity / 8) * 8,
                delta: rng.gen_range(1..1000),
            },
            _ => TraceOp::Fence,
        };
        out.push(op);
    }
    out
}

/// Replays a trace on one channel, waiting for every operation, and returns
/// each operation's outcome.
pub fn replay(fabric: &dyn Fabric, trace: &[TraceOp]) -> Vec<TraceOutcome> {
    let mut ch = fabric.open_channel().unwrap();
    let mut addrs: Vec<Option<RemoteAddr>> = Vec::new();
    let mut out = Vec::with_capacity(trace.len());
    let code = |e: dolma::fabric::FabricError| TraceOutcome::Err(e.code());
    for op in trace {
        let r = match op {
            TraceOp::Alloc(n) => match fabric.remote_alloc(*n) {
                Ok(a) => {
                    addrs.push(Some(a));
                    TraceOutcome::Addr(a.offset)
                }
                Err(e) => {
                    addrs.push(None);
                    code(e)
                }
            },
            TraceOp::Free(k) => match addrs.get(*k).copied().flatten() {
                Some(a) => fabric.remote_free(a).map_or_else(code, |_| TraceOutcome::Unit),
                None => TraceOutcome::Unit,
            },
            TraceOp::Fence => {
                ch.fence();
                TraceOutcome::Unit
            }
            _ => {
                let buf = MemoryRegion::new(match op {
                    TraceOp::Write { data, .. } => data.len(),
                    TraceOp::Read { len, .. } => *len as usize,
                    _ => 8,
                });
                let fop = match op {
                    TraceOp::Write { at, data } => {
                        buf.write(0, data);
                        FabricOp::write(RemoteAddr::new(*at), buf.whole())
                    }
                    TraceOp::Read { at, .. } => FabricOp::read(RemoteAddr::new(*at), buf.whole()),
                    TraceOp::Cas { at, expected, desired } => FabricOp::cas(RemoteAddr::new(*at), *expected, *desired, buf.whole()),
                    TraceOp::Fadd { at, delta } => FabricOp::fadd(RemoteAddr::new(*at), *delta, buf.whole()),
                    _ => unreachable!(),
                };
                match ch.submit(fop).and_then(|id| ch.wait(id)) {
                    Err(e) => code(e),
                    Ok(c) if c.status != dolma::fabric::CompletionStatus::Ok => TraceOutcome::Err(ErrorCode::RemoteError),
                    Ok(_) => match op {
                        TraceOp::Write { .. } => TraceOutcome::Unit,
                        TraceOp::Read { .. } => TraceOutcome::Bytes(buf.to_vec()),
                        _ => TraceOutcome::Word(u64::from_le_bytes(buf.to_vec().try_into().unwrap())),
                    },
                }
            }
        };
        out.push(r);
    }
    ch.drain().unwrap();
    out
}

/// Placement ranking by brute force: repeatedly pull out the element that
/// no other remaining element beats on the four keys compared one by one.
pub fn oracle_rank(objs: &[ObjectDescriptor]) -> Vec<u64> {
    fn beats(a: &ObjectDescriptor, b: &ObjectDescriptor) -> bool {
        if a.size != b.size {
            return a.size > b.size;
        }
        let (ta, tb) = (a.read_count + a.write_count, b.read_count + b.write_count);
        if ta != tb {
            return ta < tb;
        }
        if a.write_count != b.write_count {
            return a.write_count > b.write_count;
        }
        a.object_id < b.object_id
    }
    let mut left: Vec<&ObjectDescriptor> = objs.iter().collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let i = (0..left.len())
            .find(|&i| (0..left.len()).all(|j| i == j || !beats(left[j], left[i])))
            .expect("comparator is total");
        out.push(left.remove(i).object_id);
    }
    out
}

/// Random descriptor set drawn from few distinct values so that ties on
/// size, total accesses and writes are common.
pub fn random_descriptors(rng: &mut ChaCha8Rng, n: usize) -> Vec<ObjectDescriptor> {
    let mut ids: Vec<u64> = (0..n as u64 * 3).collect();
    ids.shuffle(rng);
    (0..n)
        .map(|i| {
            let size = 4097 + rng.gen_range(0..4u64) * 4096;
            let total = rng.gen_range(0..4u64);
            let w = rng.gen_range(0..=total);
            let mut d = ObjectDescriptor::new(ids[i], size);
            d.read_count = total - w;
            d.write_count = w;
            d
        })
        .collect()
}

/// Profile whose every curve runs from a 4 µs floor at 4 KiB to `fetch_us`
/// at 1 MiB, so a whole 1 MiB object costs exactly `fetch_us` to move.
pub fn flat_profile(fetch_us: f64) -> LatencyModel {
    use dolma::fabric::latency::{ib_profile, Anchor};
    use dolma::fabric::{AccessPattern, ModelKind};
    let mut p = ib_profile();
    p.name = Some(format!("flat-{fetch_us}"));
    p.entries.clear();
    for kind in [ModelKind::Read, ModelKind::Write] {
        for pattern in [AccessPattern::Seq, AccessPattern::Rand] {
            p.entries.push(Anchor {
                kind,
                pattern,
                size_bytes: 4 * KIB,
                latency_us: 4.0,
            });
            p.entries.push(Anchor {
                kind,
                pattern,
                size_bytes: MIB,
                latency_us: fetch_us,
            });
        }
    }
    LatencyModel::from_profile(&p).unwrap()
}

/// Runs `iters` iterations that each read one remote 1 MiB object and then
/// compute for `compute_us`. Returns the per-iteration stall in µs.
pub fn overlap_run(fetch_us: f64, compute_us: f64, iters: u64, prefetch: bool) -> Vec<f64> {
    use dolma::prefetch::{IterationPlan, PlanRead, Prefetcher};
    let fabric = Arc::new(SimFabric::new(16 * MIB, flat_profile(fetch_us)));
    let layout = RegionLayout::new(64 * KIB, 4 * MIB, MIB).unwrap();
    let mut rt = Runtime::new(RuntimeConfig::new(layout), fabric).unwrap();
    let h = rt.alloc(MIB).unwrap();
    assert!(h.is_remote());
    let mut pf = Prefetcher::disabled().with_horizon(iters);
    if prefetch {
        let read = PlanRead {
            object_id: h.object_id(),
            offset: 0,
            length: MIB,
        };
        pf.register_plan(&rt, IterationPlan::repeating(vec![read]));
        assert!(pf.is_enabled());
    }
    for i in 0..iters {
        pf.begin_iteration(&mut rt, i).unwrap();
        let t = rt.read(h, 0, MIB).unwrap();
        assert_eq!(rt.acquire(&t).unwrap().1, MIB);
        rt.compute(compute_us);
    }
    pf.finish(&mut rt).unwrap();
    pf.stall_report().per_iteration_us
}

/// Randomized multi-threaded schedule through a cluster pool. Every thread
/// writes into its own slice of remote memory, sometimes unsignaled, and
/// now and then fences and reads a word back. Checks that each thread sees
/// its signaled completions exactly once and in submission order, and that a
/// read after a fence returns the last value written. Returns the number of
/// completions observed.
pub fn schedule_check(fabric: &dyn Fabric, threads: usize, cluster: usize, seed: u64, ops: usize) -> Result<usize, String> {
    use dolma::threads::{Pool, ThreadPoolConfig};
    const WORDS: u64 = 64;
    let cfg = ThreadPoolConfig::new(threads, cluster).map_err(|e| e.to_string())?;
    let pool = Pool::new(cfg, fabric).map_err(|e| e.to_string())?;
    let bases: Vec<RemoteAddr> = (0..threads).map(|_| fabric.remote_alloc(WORDS * 8).unwrap()).collect();
    let results = pool.run(|t| -> Result<usize, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((t as u64) << 32));
        let mut model = [0u64; WORDS as usize];
        let mut posted = Vec::new();
        let mut seen = Vec::new();
        let mut keep = Vec::new();
        let collect = |seen: &mut Vec<u64>| -> Result<(), String> {
            for c in pool.completions(t) {
                if c.status != dolma::fabric::CompletionStatus::Ok {
                    return Err(format!("thread {t}: op {} failed: {:?}", c.op_id, c.status));
                }
                seen.push(c.op_id);
            }
            Ok(())
        };
        for k in 0..ops {
            let w = rng.gen_range(0..WORDS);
            let addr = bases[t].add(w * 8);
            if rng.gen_bool(0.15) {
                pool.fence(t).map_err(|e| e.to_string())?;
                let dst = MemoryRegion::new(8);
                let id = pool
                    .submit_via_cluster(t, FabricOp::read(addr, dst.whole()))
                    .map_err(|e| e.to_string())?;
                posted.push(id);
                pool.drain_cluster(t).map_err(|e| e.to_string())?;
                collect(&mut seen)?;
                let got = u64::from_le_bytes(dst.to_vec().try_into().unwrap());
                if got != model[w as usize] {
                    return Err(format!(
                        "thread {t} op {k}: read {got:#x} after fence, wrote {:#x}",
                        model[w as usize]
                    ));
                }
            } else {
                let v = ((t as u64) << 48) | k as u64;
                model[w as usize] = v;
                let src = MemoryRegion::from_vec(v.to_le_bytes().to_vec());
                let mut op = FabricOp::write(addr, src.whole());
                let signaled = rng.gen_bool(0.8);
                if !signaled {
                    op = op.unsignaled();
                }
                let id = pool.submit_via_cluster(t, op).map_err(|e| e.to_string())?;
                if signaled {
                    posted.push(id);
                }
                keep.push(src);
            }
            if rng.gen_bool(0.1) {
                collect(&mut seen)?;
            }
        }
        pool.drain_cluster(t).map_err(|e| e.to_string())?;
        collect(&mut seen)?;
        if seen != posted {
            return Err(format!(
                "thread {t}: {} completions for {} signaled ops, or out of order",
                seen.len(),
                posted.len()
            ));
        }
        Ok(seen.len())
    });
    drop(pool);
    for b in bases {
        fabric.remote_free(b).map_err(|e| e.to_string())?;
    }
    results.into_iter().sum()
}

/// `threads` OS threads each add 1 to one remote word `per_thread` times.
pub fn concurrent_fadd(fabric: &dyn Fabric, threads: usize, per_thread: usize) -> u64 {
    let word = fabric.remote_alloc(8).unwrap();
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| {
                for _ in 0..per_thread {
                    fabric.atomic_fadd(word, 1).unwrap();
                }
            });
        }
    });
    let total = fabric.atomic_fadd(word, 0).unwrap();
    fabric.remote_free(word).unwrap();
    total
}

/// Threads take turns in a seeded order, each issuing a random CAS on a
/// small shared word. Every returned old value and the final value must
/// match a sequential replay of the same order.
pub fn cas_interleaving(fabric: &dyn Fabric, threads: usize, steps: usize, seed: u64) -> Result<(), String> {
    use std::sync::atomic::{AtomicUsize, Ordering};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order: Vec<usize> = (0..steps).map(|_| rng.gen_range(0..threads)).collect();
    let args: Vec<(u64, u64)> = (0..steps).map(|_| (rng.gen_range(0..4), rng.gen_range(0..4))).collect();
    let word = fabric.remote_alloc(8).unwrap();
    let turn = AtomicUsize::new(0);
    let observed: Vec<parking_lot::Mutex<Option<u64>>> = (0..steps).map(|_| parking_lot::Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for t in 0..threads {
            let (order, args, turn, observed) = (&order, &args, &turn, &observed);
            s.spawn(move || loop {
                let k = turn.load(Ordering::Acquire);
                if k >= steps {
                    return;
                }
                if order[k] != t {
                    std::thread::yield_now();
                    continue;
                }
                let (e, d) = args[k];
                *observed[k].lock() = Some(fabric.atomic_cas(word, e, d).unwrap());
                turn.store(k + 1, Ordering::Release);
            });
        }
    });
    let mut state = 0u64;
    for (k, &(e, d)) in args.iter().enumerate() {
        let got = observed[k].lock().expect("every step ran");
        if got != state {
            return Err(format!("step {k}: cas returned {got}, sequential state {state}"));
        }
        if state == e {
            state = d;
        }
    }
    let last = fabric.atomic_fadd(word, 0).unwrap();
    fabric.remote_free(word).unwrap();
    if last != state {
        return Err(format!("final word {last}, sequential state {state}"));
    }
    Ok(())
}

/// Free-running CAS increments: the successful old values must be exactly
/// 0..threads*per_thread, each won once.
pub fn cas_counter(fabric: &dyn Fabric, threads: usize, per_thread: usize) -> Result<(), String> {
    let word = fabric.remote_alloc(8).unwrap();
    let won: Vec<Vec<u64>> = std::thread::scope(|s| {
        let hs: Vec<_> = (0..threads)
            .map(|_| {
                s.spawn(|| {
                    let mut mine = Vec::new();
                    let mut guess = 0;
                    while mine.len() < per_thread {
                        let old = fabric.atomic_cas(word, guess, guess + 1).unwrap();
                        if old == guess {
                            mine.push(old);
                        }
                        guess = if old == guess { old + 1 } else { old };
                    }
                    mine
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    fabric.remote_free(word).unwrap();
    let mut all: Vec<u64> = won.into_iter().flatten().collect();
    all.sort_unstable();
    if all != (0..(threads * per_thread) as u64).collect::<Vec<_>>() {
        return Err("successful CAS old values are not a permutation of 0..n".into());
    }
    Ok(())
}

/// Runtime in a random state: objects of mixed sizes, some demoted, some
/// freed, all written with seeded bytes. Returns the live handles and the
/// expected contents.
pub fn random_state(rt: &mut Runtime, rng: &mut ChaCha8Rng, n: usize) -> BTreeMap<u64, (ObjectHandle, Vec<u8>)> {
    let mut live = BTreeMap::new();
    for _ in 0..n {
        let size = pick_size(rng);
        let h = rt.alloc_tagged(size, rng.gen_bool(0.3).then_some("tagged")).unwrap();
        let mut bytes = vec![0u8; size as usize];
        rng.fill(&mut bytes[..]);
        rt.write(h, 0, &bytes).unwrap();
        if rng.gen_bool(0.2) && !h.is_remote() {
            rt.demote(h).unwrap();
        }
        live.insert(h.object_id(), (h, bytes));
        if rng.gen_bool(0.15) {
            let k = *live.keys().nth(rng.gen_range(0..live.len())).unwrap();
            let (h, _) = live.remove(&k).unwrap();
            rt.free(h).unwrap();
        }
    }
    rt.quiesce().unwrap();
    live
}

/// Descriptor as recovery should reproduce it: cached copies are not part
/// of the persistent state.
pub fn persistent(mut d: ObjectDescriptor) -> ObjectDescriptor {
    if d.location == dolma::placement::Location::RemoteCached {
        d.location = dolma::placement::Location::Remote;
    }
    d
}

/// Checkpoints a random quiesced state, recovers it into a fresh runtime on
/// a fresh fabric and compares every descriptor and every object byte.
pub fn checkpoint_round_trip(seed: u64, dir: &std::path::Path) -> Result<(), String> {
    use dolma::checkpoint::{recover, Checkpointer};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rt = small_runtime(Arc::new(sim(64 * MIB)));
    let n = rng.gen_range(1..25);
    let live = random_state(&mut rt, &mut rng, n);
    let mut ck = Checkpointer::new();
    let path = dir.join(format!("rt-{seed}.ckpt"));
    // Two epochs, so recovery also resolves carried references.
    ck.checkpoint(&mut rt, &path.with_extension("0")).map_err(|e| e.to_string())?;
    if let Some((h, bytes)) = live.values().next() {
        rt.write(*h, 0, &bytes[..1]).unwrap();
    }
    ck.checkpoint(&mut rt, &path).map_err(|e| e.to_string())?;
    let want: Vec<ObjectDescriptor> = rt.descriptors().into_iter().map(persistent).collect();

    let mut back = small_runtime(Arc::new(sim(64 * MIB)));
    recover(&path, &mut back).map_err(|e| e.to_string())?;
    let got: Vec<ObjectDescriptor> = back.descriptors().into_iter().map(persistent).collect();
    if got != want {
        return Err(format!("seed {seed}: descriptors differ\n{got:?}\n{want:?}"));
    }
    for (id, (_, bytes)) in &live {
        let h = back.handle_of(*id).ok_or(format!("seed {seed}: object {id} lost"))?;
        let mut out = vec![0u8; bytes.len()];
        back.read_sync(h, 0, &mut out).map_err(|e| e.to_string())?;
        if &out != bytes {
            return Err(format!("seed {seed}: object {id} bytes differ"));
        }
    }
    Ok(())
}

/// Runs several epochs of random writes between checkpoints and checks that
/// each checkpoint writes exactly the objects written or created since the
/// previous one.
pub fn selective_update(seed: u64, dir: &std::path::Path) -> Result<(), String> {
    use dolma::checkpoint::Checkpointer;
    use std::collections::BTreeSet;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rt = small_runtime(Arc::new(sim(64 * MIB)));
    let mut live = random_state(&mut rt, &mut rng, 12);
    let mut ck = Checkpointer::new();
    let mut dirty: BTreeSet<u64> = live.keys().copied().collect();
    for epoch in 0..5 {
        let s = ck
            .checkpoint(&mut rt, &dir.join(format!("sel-{seed}-{epoch}.ckpt")))
            .map_err(|e| e.to_string())?;
        let fresh: BTreeSet<u64> = s.fresh.iter().copied().collect();
        let carried: BTreeSet<u64> = s.carried.iter().copied().collect();
        let all: BTreeSet<u64> = live.keys().copied().collect();
        if fresh != dirty || carried != &all - &dirty {
            return Err(format!("seed {seed} epoch {epoch}: fresh {fresh:?}, dirty set {dirty:?}"));
        }
        dirty.clear();
        for _ in 0..rng.gen_range(0..4) {
            let k = *live.keys().nth(rng.gen_range(0..live.len())).unwrap();
            let (h, bytes) = live.get_mut(&k).unwrap();
            let (off, len) = pick_range(&mut rng, bytes.len() as u64);
            let data: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            rt.write(*h, off, &data).unwrap();
            bytes[off as usize..(off + len) as usize].copy_from_slice(&data);
            dirty.insert(k);
        }
        if rng.gen_bool(0.5) {
            let size = pick_size(&mut rng);
            let h = rt.alloc(size).unwrap();
            live.insert(h.object_id(), (h, vec![0; size as usize]));
            dirty.insert(h.object_id());
        }
        // Reads and demotions leave the bytes alone.
        for (h, _) in live.values() {
            if rng.gen_bool(0.3) {
                let t = rt.read(*h, 0, 1).unwrap();
                rt.acquire(&t).unwrap();
            }
            if rng.gen_bool(0.1) && !h.is_remote() && rt.descriptor(*h).unwrap().location == dolma::placement::Location::Local {
                rt.demote(*h).unwrap();
            }
        }
        rt.quiesce().unwrap();
    }
    Ok(())
}
