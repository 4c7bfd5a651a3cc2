mod common;

use common::{sim, KIB, MIB};
use dolma::clock::us_to_ns;
use dolma::fabric::{
    split_transfer, AccessPattern, CompletionStatus, Fabric, FabricError, FabricOp, LatencyModel, MemoryRegion, ModelKind, RemoteAddr,
};
use proptest::prelude::*;

const GIB: u64 = 1 << 30;

#[test]
fn poll_on_idle_channel_is_empty() {
    let f = sim(MIB);
    let mut ch = f.open_channel().unwrap();
    assert!(ch.poll(10).is_empty());
    ch.fence();
    assert_eq!(ch.outstanding(), 0);
}

#[test]
fn three_ops_complete_at_modeled_times() {
    let f = sim(MIB);
    let m = LatencyModel::default();
    let mut ch = f.open_channel().unwrap();
    let t0 = f.clock().now();
    let sizes = [64u64, 4 * KIB, 32 * KIB];
    let bufs: Vec<MemoryRegion> = sizes.iter().map(|&n| MemoryRegion::new(n as usize)).collect();
    let ids: Vec<_> = bufs
        .iter()
        .map(|b| ch.submit(FabricOp::write(RemoteAddr::new(0), b.whole())).unwrap())
        .collect();
    // FIFO service: each op starts when the previous one finishes.
    let mut expect = Vec::new();
    let mut t = t0;
    for &n in &sizes {
        t += us_to_ns(m.estimate(ModelKind::Write, AccessPattern::Seq, n));
        expect.push(t);
    }
    f.clock().advance_to(t + 1);
    let done = ch.poll(1);
    assert_eq!(done.len(), 1);
    let rest = ch.poll(10);
    assert_eq!(rest.len(), 2);
    let all: Vec<_> = done.into_iter().chain(rest).collect();
    assert_eq!(all.iter().map(|c| c.op_id).collect::<Vec<_>>(), ids);
    assert_eq!(all.iter().map(|c| c.completed_at).collect::<Vec<_>>(), expect);
    assert!(all.iter().all(|c| c.status == CompletionStatus::Ok));
}

#[test]
fn read_after_fence_sees_write() {
    let f = sim(MIB);
    let mut ch = f.open_channel().unwrap();
    let src = MemoryRegion::from_vec(5u64.to_le_bytes().to_vec());
    ch.submit(FabricOp::write(RemoteAddr::new(64), src.whole())).unwrap();
    ch.fence();
    let dst = MemoryRegion::new(8);
    let id = ch.submit(FabricOp::read(RemoteAddr::new(64), dst.whole())).unwrap();
    ch.wait(id).unwrap();
    assert_eq!(dst.to_vec(), 5u64.to_le_bytes());
}

#[test]
fn bounds_and_size_errors() {
    let f = sim(MIB);
    let mut ch = f.open_channel().unwrap();
    let b = MemoryRegion::new(16);
    let e = ch.submit(FabricOp::read(RemoteAddr::new(MIB - 8), b.whole())).unwrap_err();
    assert!(matches!(e, FabricError::OutOfBounds { .. }));
    let e = ch
        .submit(FabricOp::fadd(RemoteAddr::new(4), 1, MemoryRegion::new(8).whole()))
        .unwrap_err();
    assert!(matches!(e, FabricError::Misaligned { .. }));
    let small = dolma::fabric::sim::SimFabric::new(MIB, LatencyModel::default().with_max_transfer(4 * KIB));
    let mut ch = small.open_channel().unwrap();
    let e = ch
        .submit(FabricOp::write(RemoteAddr::new(0), MemoryRegion::new(8 * KIB as usize).whole()))
        .unwrap_err();
    assert!(matches!(e, FabricError::Oversized { .. }));
}

#[test]
fn oversized_write_splits_into_ceiling_pieces() {
    let pieces: Vec<_> = split_transfer(5 * GIB / 2, GIB).collect();
    assert_eq!(pieces.len(), 3);
    assert_eq!(pieces.iter().map(|p| p.1).sum::<u64>(), 5 * GIB / 2);
}

#[test]
fn alloc_free_rules() {
    let f = sim(MIB);
    let a = f.remote_alloc(KIB).unwrap();
    let b = f.remote_alloc(KIB).unwrap();
    assert!(a.offset + KIB <= b.offset || b.offset + KIB <= a.offset);
    assert!(matches!(f.remote_alloc(2 * MIB), Err(FabricError::RemoteOom { .. })));
    f.remote_free(a).unwrap();
    assert!(matches!(f.remote_free(a), Err(FabricError::DoubleFree { .. })));
}

#[test]
fn cas_semantics() {
    let f = sim(MIB);
    let a = f.remote_alloc(8).unwrap();
    assert_eq!(f.atomic_cas(a, 0, 7).unwrap(), 0);
    assert_eq!(f.atomic_cas(a, 0, 9).unwrap(), 7);
    assert_eq!(f.atomic_fadd(a, 0).unwrap(), 7);
}

#[test]
fn read_write_ratio_is_table_driven() {
    let m = LatencyModel::default();
    let r = m.estimate(ModelKind::Read, AccessPattern::Seq, 4 * MIB) / m.estimate(ModelKind::Write, AccessPattern::Seq, 4 * MIB);
    assert_eq!(r, 1561.0 / 424.46);
}

#[test]
fn ethernet_profile_round_trips_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("eth.json");
    std::fs::write(&p, dolma::fabric::latency::ethernet_profile().to_json()).unwrap();
    let m = LatencyModel::load(Some(&p)).unwrap();
    assert_eq!(m, LatencyModel::ethernet());
}

proptest! {
    #[test]
    fn latency_is_monotone_and_positive(a in 0u32..=32, b in 0u32..=32, kind in 0usize..2, pat in 0usize..2) {
        let m = LatencyModel::default();
        let kind = [ModelKind::Read, ModelKind::Write][kind];
        let pat = [AccessPattern::Seq, AccessPattern::Rand][pat];
        let (lo, hi) = (a.min(b), a.max(b));
        let x = m.estimate(kind, pat, 1u64 << lo);
        let y = m.estimate(kind, pat, 1u64 << hi);
        prop_assert!(x > 0.0);
        prop_assert!(x <= y);
    }

    #[test]
    fn completion_conservation(sizes in prop::collection::vec(1u64..=8192, 1..40), signaled in prop::collection::vec(any::<bool>(), 40)) {
        let f = sim(MIB);
        let mut ch = f.open_channel().unwrap();
        let mut want = Vec::new();
        let mut bufs = Vec::new();
        for (i, &n) in sizes.iter().enumerate() {
            let b = MemoryRegion::new(n as usize);
            let mut op = FabricOp::write(RemoteAddr::new(0), b.whole());
            if !signaled[i] {
                op = op.unsignaled();
            }
            let id = ch.submit(op).unwrap();
            if signaled[i] {
                want.push(id);
            }
            bufs.push(b);
        }
        ch.drain().unwrap();
        let got: Vec<_> = ch.poll(usize::MAX).into_iter().map(|c| c.op_id).collect();
        prop_assert_eq!(got, want);
        prop_assert!(ch.poll(usize::MAX).is_empty());
    }
}
