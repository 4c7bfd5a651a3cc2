//! One test per acceptance criterion. Each prints a single PASS/FAIL line
//! straight to stdout so the summary shows up without `--nocapture`.

mod common;

use std::io::Write;
use std::sync::{Arc, OnceLock};

use common::*;
use dolma::bench::driver::{ablation, fraction_sweep, size_sweep, BenchConfig, RunReport, FRACTIONS};
use dolma::bench::workload::{preset, presets};
use dolma::fabric::latency::IB_READ_SLOWDOWN_32K;
use dolma::fabric::{AccessPattern, LatencyModel, ModelKind};
use dolma::placement::{rank_for_remote, ObjectDescriptor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: u32, name: &str, r: Result<(), String>) {
    let line = match &r {
        Ok(()) => format!("criterion {n:>2} {name}: PASS"),
        Err(e) => format!("criterion {n:>2} {name}: FAIL ({e})"),
    };
    let _ = writeln!(std::io::stdout().lock(), "{line}");
    if let Err(e) = r {
        panic!("criterion {n} {name}: {e}");
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

#[test]
fn c01_calibration_fidelity() {
    let r = (|| {
        use AccessPattern::*;
        use ModelKind::*;
        let m = LatencyModel::default();
        let remote = [
            (Write, Seq, 4 * MIB, 424.46),
            (Read, Seq, 4 * MIB, 1561.0),
            (Write, Rand, 4 * MIB, 461.92),
            (Read, Rand, 4 * MIB, 1599.7),
            (Write, Rand, 512 * KIB, 60.4),
        ];
        for (k, p, s, want) in remote {
            let got = m.estimate(k, p, s);
            check(got == want, || format!("remote {k:?}/{p:?}@{s}: {got} != {want}"))?;
        }
        let local = [(Read, Seq, 445.0), (Read, Rand, 580.0), (Write, Seq, 557.0), (Write, Rand, 1058.0)];
        for (k, p, want) in local {
            let got = m.estimate_local(k, p, 4 * MIB);
            check(got == want, || format!("local {k:?}/{p:?}: {got} != {want}"))?;
        }
        for (size, want) in [(32 * KIB, IB_READ_SLOWDOWN_32K), (4 * MIB, 3.5)] {
            let got = m.slowdown(Read, Seq, size);
            check((got / want - 1.0).abs() <= 0.05, || {
                format!("slowdown@{size} = {got:.3}, want {want} ± 5%")
            })?;
        }
        Ok(())
    })();
    report(1, "calibration fidelity", r);
}

#[test]
fn c02_differential_correctness() {
    let r = (|| {
        for seed in 0..20 {
            differential(Arc::new(sim(64 * MIB)), seed, 10_000).map_err(|e| format!("sim seed {seed}: {e}"))?;
        }
        for seed in 0..20 {
            let (_node, f) = memnode(64 * MIB);
            differential(Arc::new(f), 100 + seed, 10_000).map_err(|e| format!("tcp seed {seed}: {e}"))?;
        }
        Ok(())
    })();
    report(2, "differential correctness", r);
}

#[test]
fn c03_placement_oracle_equivalence() {
    let r = (|| {
        let ids = |v: &[ObjectDescriptor]| v.iter().map(|d| d.object_id).collect::<Vec<_>>();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..1000 {
            let n = rng.gen_range(1..=16);
            let v = random_descriptors(&mut rng, n);
            check(ids(&rank_for_remote(&v)) == oracle_rank(&v), || format!("random set {i}"))?;
        }
        // Same size throughout: access count decides, then write count, then id.
        for i in 0..200u64 {
            let total = rng.gen_range(0..6u64);
            let v: Vec<ObjectDescriptor> = (0..8u64)
                .map(|k| {
                    let writes = if k % 2 == 0 { rng.gen_range(0..=total) } else { total / 2 };
                    let total = if k < 4 { total } else { total + (k % 3) };
                    ObjectDescriptor {
                        read_count: total - writes.min(total),
                        write_count: writes.min(total),
                        ..ObjectDescriptor::new(1000 * i + 7 - k, 8 * KIB)
                    }
                })
                .collect();
            check(ids(&rank_for_remote(&v)) == oracle_rank(&v), || format!("tie set {i}"))?;
        }
        Ok(())
    })();
    report(3, "placement oracle equivalence", r);
}

#[test]
fn c04_overlap_law() {
    let r = (|| {
        let fast = overlap_run(800.0, 1000.0, 8, true);
        check(fast[1..].iter().all(|&s| s == 0.0), || format!("fetch 800: {fast:?}"))?;
        let slow = overlap_run(1500.0, 1000.0, 8, true);
        check(slow[2..].iter().all(|&s| s == 500.0), || format!("fetch 1500: {slow:?}"))?;
        Ok(())
    })();
    report(4, "overlap law", r);
}

fn fraction_runs() -> &'static Vec<(String, Vec<RunReport>)> {
    static RUNS: OnceLock<Vec<(String, Vec<RunReport>)>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let cfg = BenchConfig::default();
        presets()
            .into_iter()
            .map(|s| (s.name.clone(), fraction_sweep(&s, &cfg, &FRACTIONS).unwrap()))
            .collect()
    })
}

#[test]
fn c05_capacity_bound() {
    let r = (|| {
        for (name, runs) in fraction_runs() {
            for r in runs {
                let budget = (r.config.fraction * r.oracle_peak_bytes as f64).floor() as u64;
                check(r.budget_bytes <= budget, || {
                    format!("{name}@{}: budget {} > {budget}", r.config.fraction, r.budget_bytes)
                })?;
                check(r.peak_local_bytes <= budget + r.allowance_bytes, || {
                    format!(
                        "{name}@{}: peak {} > {budget} + {}",
                        r.config.fraction, r.peak_local_bytes, r.allowance_bytes
                    )
                })?;
                check(r.capacity_violations == 0, || {
                    format!("{name}@{}: {} violations", r.config.fraction, r.capacity_violations)
                })?;
            }
        }
        Ok(())
    })();
    report(5, "capacity bound", r);
}

#[test]
fn c06_trend_reproduction() {
    let r = (|| {
        let cfg = BenchConfig::default();
        let cg = preset("cg").unwrap();
        let (off, on) = ablation(&cg, &cfg).map_err(|e| e.to_string())?;
        check(on.dolma_time_us < off.dolma_time_us, || {
            format!("ablation: on {} >= off {}", on.dolma_time_us, off.dolma_time_us)
        })?;
        for (name, runs) in fraction_runs() {
            let tail: Vec<f64> = runs.iter().filter(|r| r.config.fraction >= 0.5).map(|r| r.degradation).collect();
            check(tail.len() == 3 && tail.windows(2).all(|w| w[1] <= w[0]), || {
                format!("{name}: 50/70/100% degradation {tail:?}")
            })?;
        }
        let sizes = size_sweep(&cg, &cfg, &[0.25, 0.5, 1.0, 2.0, 4.0]).map_err(|e| e.to_string())?;
        let d: Vec<f64> = sizes.iter().map(|r| r.degradation).collect();
        check(d.windows(2).all(|w| w[1] <= w[0]), || format!("cg size sweep {d:?}"))?;
        let half = fraction_runs()
            .iter()
            .find(|(n, _)| n == "cg")
            .unwrap()
            .1
            .iter()
            .find(|r| r.config.fraction == 0.5)
            .unwrap();
        check(half.degradation <= 0.30, || format!("cg at 50%: degradation {}", half.degradation))?;
        Ok(())
    })();
    report(6, "trend reproduction", r);
}

#[test]
fn c07_fence_and_ordering() {
    let r = (|| {
        let f = sim(64 * MIB);
        for (i, t) in [2usize, 8, 24].into_iter().enumerate() {
            for seed in 0..3 {
                schedule_check(&f, t, 4.min(t), 10 * i as u64 + seed, 400).map_err(|e| format!("T={t} seed {seed}: {e}"))?;
            }
        }
        Ok(())
    })();
    report(7, "fence and ordering", r);
}

#[test]
fn c08_checkpoint_round_trip() {
    let r = (|| {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        for seed in 0..50 {
            let d = dir.path().join(format!("rt{seed}"));
            std::fs::create_dir(&d).map_err(|e| e.to_string())?;
            checkpoint_round_trip(seed, &d).map_err(|e| format!("round trip {seed}: {e}"))?;
        }
        for seed in 0..5 {
            let d = dir.path().join(format!("sel{seed}"));
            std::fs::create_dir(&d).map_err(|e| e.to_string())?;
            selective_update(seed, &d).map_err(|e| format!("selective {seed}: {e}"))?;
        }
        Ok(())
    })();
    report(8, "checkpoint round trip", r);
}

#[test]
fn c09_atomics() {
    let r = (|| {
        let f = sim(MIB);
        let total = concurrent_fadd(&f, 16, 1000);
        check(total == 16_000, || format!("fetch-add total {total}"))?;
        for seed in 0..5 {
            cas_interleaving(&f, 4, 400, seed)?;
        }
        cas_counter(&f, 16, 100)
    })();
    report(9, "atomics", r);
}

#[test]
fn c10_backend_equivalence() {
    let r = (|| {
        let cap = 2 * MIB;
        let trace = random_trace(10, 1000, cap);
        let s = sim(cap);
        let (_node, t) = memnode(cap);
        check(replay(&s, &trace) == replay(&t, &trace), || "outcomes differ".into())?;
        check(region_contents(&s, Some(&s)) == region_contents(&t, None), || {
            "region bytes differ".into()
        })
    })();
    report(10, "backend equivalence", r);
}
