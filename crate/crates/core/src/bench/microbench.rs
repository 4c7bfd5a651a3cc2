//! Local versus remote latency sweep over transfer sizes.

use serde::{Deserialize, Serialize};

use crate::clock::{ns_to_us, us_to_ns, Clock};
use crate::fabric::sim::SimFabric;
use crate::fabric::{split_transfer, AccessPattern, Fabric, FabricError, FabricOp, LatencyModel, MemoryRegion, ModelKind};

/// Largest transfer issued through the simulator; bigger ones are summed
/// from the model piece by piece.
const MEASURED_MAX: u64 = 8 << 20;
pub const MAX_SIZE: u64 = 4 << 30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MicroRow {
    pub kind: ModelKind,
    pub pattern: AccessPattern,
    pub size_bytes: u64,
    pub local_us: f64,
    pub remote_us: f64,
    pub slowdown: f64,
}

/// Powers of two from 64 B to 64 MiB.
pub fn default_sizes() -> Vec<u64> {
    (6..=26).map(|s| 1u64 << s).collect()
}

fn measure(fabric: &SimFabric, kind: ModelKind, pattern: AccessPattern, size: u64) -> Result<f64, FabricError> {
    let clock = Clock::new_virtual();
    let mut ch = fabric.open_channel_with_clock(clock.clone())?;
    let buf = MemoryRegion::new(size as usize);
    let addr = fabric.remote_alloc(size)?;
    let op = match kind {
        ModelKind::Read => FabricOp::read(addr, buf.whole()),
        ModelKind::Write => FabricOp::write(addr, buf.whole()),
    }
    .with_pattern(pattern);
    let start = clock.now();
    let id = ch.submit(op)?;
    ch.wait(id)?;
    let elapsed = clock.now() - start;
    fabric.remote_free(addr)?;
    Ok(ns_to_us(elapsed))
}

/// Latency table for every (kind, pattern, size). Sizes outside
/// `[1, 4 GiB]` are skipped.
pub fn run_microbench(
    model: &LatencyModel,
    sizes: &[u64],
    patterns: &[AccessPattern],
    kinds: &[ModelKind],
) -> Result<Vec<MicroRow>, FabricError> {
    let cap = MEASURED_MAX.min(model.max_transfer_bytes());
    let fabric = SimFabric::new(cap, model.clone());
    let mut rows = Vec::new();
    for &kind in kinds {
        for &pattern in patterns {
            for &size in sizes.iter().filter(|&&s| (1..=MAX_SIZE).contains(&s)) {
                let remote_us = if size <= cap {
                    measure(&fabric, kind, pattern, size)?
                } else {
                    split_transfer(size, model.max_transfer_bytes())
                        .map(|(_, n)| model.estimate(kind, pattern, n))
                        .sum()
                };
                // Quantized to whole nanoseconds like the simulated side.
                let local_us = ns_to_us(us_to_ns(model.estimate_local(kind, pattern, size)));
                rows.push(MicroRow {
                    kind,
                    pattern,
                    size_bytes: size,
                    local_us,
                    remote_us,
                    slowdown: remote_us / local_us,
                });
            }
        }
    }
    Ok(rows)
}

pub fn run_default(model: &LatencyModel) -> Result<Vec<MicroRow>, FabricError> {
    run_microbench(
        model,
        &default_sizes(),
        &[AccessPattern::Seq, AccessPattern::Rand],
        &[ModelKind::Read, ModelKind::Write],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_profile_has_no_slowdown() {
        let rows = run_default(&LatencyModel::identity()).unwrap();
        assert_eq!(rows.len(), 4 * default_sizes().len());
        for r in rows {
            assert!((r.slowdown - 1.0).abs() < 1e-3, "{r:?}");
        }
    }
}
