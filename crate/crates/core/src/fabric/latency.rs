//! Calibrated latency model.
//!
//! Each (kind, pattern) pair owns a curve of calibration anchors. Between
//! anchors the latency is a power law in size (straight line in log-log
//! space), so every anchor is reproduced exactly. Above the largest anchor
//! the cost grows proportionally with size; below the smallest it is the
//! fixed per-operation floor.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{AccessPattern, DEFAULT_MAX_TRANSFER_BYTES};

const KIB: u64 = 1 << 10;
const MIB: u64 = 1 << 20;

/// Environment variable naming a profile file for the CLI.
pub const PROFILE_ENV: &str = "DOLMA_PROFILE";

/// Slowdown of a remote 32 KiB sequential read over the local one on the
/// InfiniBand testbed.
pub const IB_READ_SLOWDOWN_32K: f64 = 21.9;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ModelKind {
    Read,
    Write,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Read => "READ",
            ModelKind::Write => "WRITE",
        })
    }
}

impl fmt::Display for AccessPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AccessPattern::Seq => "SEQ",
            AccessPattern::Rand => "RAND",
        })
    }
}

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("profile has no anchors for {0} {1}")]
    MissingCurve(ModelKind, AccessPattern),
    #[error("{kind} {pattern} anchor at {size} B: latency {latency_us} us is below the floor or not finite")]
    BadLatency {
        kind: ModelKind,
        pattern: AccessPattern,
        size: u64,
        latency_us: f64,
    },
    #[error("{kind} {pattern}: latency decreases between {prev} B and {size} B")]
    NotMonotone {
        kind: ModelKind,
        pattern: AccessPattern,
        prev: u64,
        size: u64,
    },
    #[error("{kind} {pattern}: duplicate or zero size {size}")]
    BadSize {
        kind: ModelKind,
        pattern: AccessPattern,
        size: u64,
    },
    #[error("fixed_overhead_us must be positive, got {0}")]
    BadFloor(f64),
    #[error("max_transfer_bytes must be positive")]
    BadMaxTransfer,
    #[error("reading profile: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing profile: {0}")]
    Json(#[from] serde_json::Error),
}

/// One calibration point in the profile file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub kind: ModelKind,
    pub pattern: AccessPattern,
    pub size_bytes: u64,
    pub latency_us: f64,
}

/// Anchors for one side (local or remote) of a profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub fixed_overhead_us: f64,
    pub entries: Vec<Anchor>,
}

/// Profile file contents. `local` defaults to the built-in DRAM baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    #[serde(default)]
    pub name: Option<String>,
    pub fixed_overhead_us: f64,
    #[serde(default = "default_max_transfer")]
    pub max_transfer_bytes: u64,
    pub entries: Vec<Anchor>,
    #[serde(default)]
    pub local: Option<Calibration>,
}

fn default_max_transfer() -> u64 {
    DEFAULT_MAX_TRANSFER_BYTES
}

impl Profile {
    pub fn load(path: &Path) -> Result<Self, ProfileError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile serializes")
    }
}

fn anchor(kind: ModelKind, pattern: AccessPattern, size_bytes: u64, latency_us: f64) -> Anchor {
    Anchor {
        kind,
        pattern,
        size_bytes,
        latency_us,
    }
}

/// Local DRAM baseline.
pub fn local_calibration() -> Calibration {
    use AccessPattern::*;
    use ModelKind::*;
    let small = 0.04;
    // Sequential read at 512 KiB, taken off the (4 KiB, 4 MiB) segment so the
    // random curve can share it: access pattern only shows up at large sizes.
    let seq_read = Curve::new(vec![(4 * KIB, small), (4 * MIB, 445.0)]);
    let read_512k = seq_read.eval(512 * KIB);
    Calibration {
        fixed_overhead_us: 0.01,
        entries: vec![
            anchor(Read, Seq, 4 * KIB, small),
            anchor(Read, Seq, 4 * MIB, 445.0),
            anchor(Read, Rand, 4 * KIB, small),
            anchor(Read, Rand, 512 * KIB, read_512k),
            anchor(Read, Rand, 4 * MIB, 580.0),
            anchor(Write, Seq, 4 * KIB, small),
            anchor(Write, Seq, 4 * MIB, 557.0),
            anchor(Write, Rand, 4 * KIB, small),
            anchor(Write, Rand, 512 * KIB, 1058.0 / 8.0),
            anchor(Write, Rand, 4 * MIB, 1058.0),
        ],
    }
}

/// InfiniBand remote profile.
pub fn ib_profile() -> Profile {
    use AccessPattern::*;
    use ModelKind::*;
    let local = local_calibration();
    let local_read = LatencyModel::curve_of(&local.entries, Read, Seq).expect("local curve");
    let read_32k = local_read.eval(32 * KIB) * IB_READ_SLOWDOWN_32K;
    let small = 4.0;
    Profile {
        name: Some("infiniband".into()),
        fixed_overhead_us: 2.0,
        max_transfer_bytes: DEFAULT_MAX_TRANSFER_BYTES,
        entries: vec![
            anchor(Read, Seq, 4 * KIB, small),
            anchor(Read, Seq, 32 * KIB, read_32k),
            anchor(Read, Seq, 4 * MIB, 1561.0),
            anchor(Read, Rand, 4 * KIB, small),
            anchor(Read, Rand, 32 * KIB, read_32k),
            anchor(Read, Rand, 4 * MIB, 1599.7),
            anchor(Write, Seq, 4 * KIB, small),
            anchor(Write, Seq, 4 * MIB, 424.46),
            anchor(Write, Rand, 4 * KIB, small),
            anchor(Write, Rand, 512 * KIB, 60.4),
            anchor(Write, Rand, 4 * MIB, 461.92),
        ],
        local: Some(local),
    }
}

/// Ethernet profile: the InfiniBand curves slowed down 4x. Approximate.
pub fn ethernet_profile() -> Profile {
    let mut p = ib_profile();
    p.name = Some("ethernet".into());
    p.fixed_overhead_us *= 4.0;
    for a in &mut p.entries {
        a.latency_us *= 4.0;
    }
    p
}

/// Profile whose remote side equals the local baseline.
pub fn identity_profile() -> Profile {
    let local = local_calibration();
    Profile {
        name: Some("identity".into()),
        fixed_overhead_us: local.fixed_overhead_us,
        max_transfer_bytes: DEFAULT_MAX_TRANSFER_BYTES,
        entries: local.entries.clone(),
        local: Some(local),
    }
}

/// A validated monotone curve of (size, latency) anchors.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    points: Vec<(u64, f64)>,
}

impl Curve {
    fn new(mut points: Vec<(u64, f64)>) -> Self {
        points.sort_by_key(|p| p.0);
        Curve { points }
    }

    /// Latency for `size` bytes, ignoring the floor.
    fn eval(&self, size: u64) -> f64 {
        let pts = &self.points;
        let (s0, l0) = pts[0];
        if size <= s0 {
            return l0;
        }
        let (sn, ln) = pts[pts.len() - 1];
        if size >= sn {
            return ln * size as f64 / sn as f64;
        }
        let i = pts.partition_point(|p| p.0 <= size);
        let (a, la) = pts[i - 1];
        let (b, lb) = pts[i];
        if size == a {
            return la;
        }
        let t = (size as f64 / a as f64).ln() / (b as f64 / a as f64).ln();
        la * (lb / la).powf(t)
    }

    pub fn anchors(&self) -> &[(u64, f64)] {
        &self.points
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Side {
    floor_us: f64,
    // Indexed by [kind][pattern].
    curves: [[Curve; 2]; 2],
}

impl Side {
    fn build(cal: &Calibration) -> Result<Self, ProfileError> {
        if !(cal.fixed_overhead_us > 0.0 && cal.fixed_overhead_us.is_finite()) {
            return Err(ProfileError::BadFloor(cal.fixed_overhead_us));
        }
        let get = |k, p| -> Result<Curve, ProfileError> {
            let c = LatencyModel::curve_of(&cal.entries, k, p)?;
            let mut prev: Option<(u64, f64)> = None;
            for &(size, lat) in c.anchors() {
                if !(lat.is_finite() && lat >= cal.fixed_overhead_us) {
                    return Err(ProfileError::BadLatency {
                        kind: k,
                        pattern: p,
                        size,
                        latency_us: lat,
                    });
                }
                if let Some((ps, pl)) = prev {
                    if ps == size {
                        return Err(ProfileError::BadSize { kind: k, pattern: p, size });
                    }
                    if lat < pl {
                        return Err(ProfileError::NotMonotone {
                            kind: k,
                            pattern: p,
                            prev: ps,
                            size,
                        });
                    }
                }
                if size == 0 {
                    return Err(ProfileError::BadSize { kind: k, pattern: p, size });
                }
                prev = Some((size, lat));
            }
            Ok(c)
        };
        use AccessPattern::*;
        use ModelKind::*;
        Ok(Side {
            floor_us: cal.fixed_overhead_us,
            curves: [[get(Read, Seq)?, get(Read, Rand)?], [get(Write, Seq)?, get(Write, Rand)?]],
        })
    }

    fn eval(&self, kind: ModelKind, pattern: AccessPattern, size: u64) -> f64 {
        let curve = &self.curves[kind as usize][pattern as usize];
        if size < curve.points[0].0 {
            return self.floor_us;
        }
        curve.eval(size)
    }
}

/// Maps (kind, pattern, size) to microseconds for remote and local memory.
#[derive(Clone, Debug, PartialEq)]
pub struct LatencyModel {
    name: String,
    remote: Side,
    local: Side,
    max_transfer_bytes: u64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel::from_profile(&ib_profile()).expect("built-in profile is valid")
    }
}

impl LatencyModel {
    pub fn from_profile(p: &Profile) -> Result<Self, ProfileError> {
        if p.max_transfer_bytes == 0 {
            return Err(ProfileError::BadMaxTransfer);
        }
        let remote = Side::build(&Calibration {
            fixed_overhead_us: p.fixed_overhead_us,
            entries: p.entries.clone(),
        })?;
        let local = Side::build(&p.local.clone().unwrap_or_else(local_calibration))?;
        Ok(LatencyModel {
            name: p.name.clone().unwrap_or_else(|| "custom".into()),
            remote,
            local,
            max_transfer_bytes: p.max_transfer_bytes,
        })
    }

    pub fn ethernet() -> Self {
        LatencyModel::from_profile(&ethernet_profile()).expect("built-in profile is valid")
    }

    pub fn identity() -> Self {
        LatencyModel::from_profile(&identity_profile()).expect("built-in profile is valid")
    }

    /// Loads a profile file, or the built-in InfiniBand profile when `path`
    /// is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self, ProfileError> {
        match path {
            Some(p) => LatencyModel::from_profile(&Profile::load(p)?),
            None => Ok(LatencyModel::default()),
        }
    }

    fn curve_of(entries: &[Anchor], kind: ModelKind, pattern: AccessPattern) -> Result<Curve, ProfileError> {
        let pts: Vec<_> = entries
            .iter()
            .filter(|a| a.kind == kind && a.pattern == pattern)
            .map(|a| (a.size_bytes, a.latency_us))
            .collect();
        if pts.is_empty() {
            return Err(ProfileError::MissingCurve(kind, pattern));
        }
        Ok(Curve::new(pts))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn with_max_transfer(mut self, bytes: u64) -> Self {
        assert!(bytes > 0);
        self.max_transfer_bytes = bytes;
        self
    }

    pub fn max_transfer_bytes(&self) -> u64 {
        self.max_transfer_bytes
    }

    pub fn fixed_overhead_us(&self) -> f64 {
        self.remote.floor_us
    }

    /// Remote operation latency in microseconds.
    pub fn estimate(&self, kind: ModelKind, pattern: AccessPattern, size: u64) -> f64 {
        assert!(size >= 1, "latency of an empty transfer is undefined");
        self.remote.eval(kind, pattern, size)
    }

    /// Local memory latency in microseconds for the same access.
    pub fn estimate_local(&self, kind: ModelKind, pattern: AccessPattern, size: u64) -> f64 {
        assert!(size >= 1, "latency of an empty transfer is undefined");
        self.local.eval(kind, pattern, size)
    }

    pub fn slowdown(&self, kind: ModelKind, pattern: AccessPattern, size: u64) -> f64 {
        self.estimate(kind, pattern, size) / self.estimate_local(kind, pattern, size)
    }

    /// Remote anchors, in profile file form.
    pub fn remote_anchors(&self) -> Vec<Anchor> {
        side_anchors(&self.remote)
    }

    pub fn local_anchors(&self) -> Vec<Anchor> {
        side_anchors(&self.local)
    }
}

fn side_anchors(s: &Side) -> Vec<Anchor> {
    let mut out = Vec::new();
    for (ki, kind) in [ModelKind::Read, ModelKind::Write].into_iter().enumerate() {
        for (pi, pattern) in [AccessPattern::Seq, AccessPattern::Rand].into_iter().enumerate() {
            for &(size, lat) in s.curves[ki][pi].anchors() {
                out.push(anchor(kind, pattern, size, lat));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use AccessPattern::*;
    use ModelKind::*;

    #[test]
    fn exact_at_anchors() {
        let m = LatencyModel::default();
        assert_eq!(m.estimate(Write, Seq, 4 * MIB), 424.46);
        assert_eq!(m.estimate(Read, Seq, 4 * MIB), 1561.0);
        assert_eq!(m.estimate(Write, Rand, 512 * KIB), 60.4);
        assert_eq!(m.estimate_local(Read, Rand, 4 * MIB), 580.0);
    }

    #[test]
    fn floor_below_smallest_anchor() {
        let m = LatencyModel::default();
        assert_eq!(m.estimate(Read, Seq, 1), 2.0);
        assert_eq!(m.estimate(Write, Rand, 4095), 2.0);
        assert_eq!(m.estimate(Write, Rand, 4096), 4.0);
    }

    #[test]
    fn proportional_above_largest_anchor() {
        let m = LatencyModel::default();
        let at8 = m.estimate(Write, Seq, 8 * MIB);
        assert!((at8 - 2.0 * 424.46).abs() < 1e-9);
    }

    #[test]
    fn interpolation_is_power_law() {
        // Halfway in log-size between 4 KiB and 4 MiB is 128 KiB; the value
        // there is the geometric mean of the two anchors.
        let m = LatencyModel::default();
        let got = m.estimate(Write, Seq, 128 * KIB);
        let want = (4.0f64 * 424.46).sqrt();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn ethernet_is_four_times_slower() {
        let ib = LatencyModel::default();
        let eth = LatencyModel::ethernet();
        for size in [1, 4 * KIB, 100 * KIB, 4 * MIB, 64 * MIB] {
            let r = eth.estimate(Read, Rand, size) / ib.estimate(Read, Rand, size);
            assert!((r - 4.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_decreasing_profile() {
        let mut p = ib_profile();
        p.entries.push(anchor(Write, Seq, 8 * MIB, 1.0 + 2.0));
        assert!(matches!(LatencyModel::from_profile(&p), Err(ProfileError::NotMonotone { .. })));
    }

    #[test]
    fn rejects_missing_curve() {
        let mut p = ib_profile();
        p.entries.retain(|a| !(a.kind == Write && a.pattern == Rand));
        assert!(matches!(
            LatencyModel::from_profile(&p),
            Err(ProfileError::MissingCurve(Write, Rand))
        ));
    }

    #[test]
    fn profile_json_round_trip() {
        let p = ib_profile();
        let back: Profile = serde_json::from_str(&p.to_json()).unwrap();
        assert_eq!(LatencyModel::from_profile(&back).unwrap(), LatencyModel::default());
        let minimal = r#"{"fixed_overhead_us": 1.0, "entries": [
            {"kind":"READ","pattern":"SEQ","size_bytes":4096,"latency_us":3.0},
            {"kind":"READ","pattern":"RAND","size_bytes":4096,"latency_us":3.0},
            {"kind":"WRITE","pattern":"SEQ","size_bytes":4096,"latency_us":3.0},
            {"kind":"WRITE","pattern":"RAND","size_bytes":4096,"latency_us":3.0}]}"#;
        let m = LatencyModel::from_profile(&serde_json::from_str(minimal).unwrap()).unwrap();
        assert_eq!(m.max_transfer_bytes(), DEFAULT_MAX_TRANSFER_BYTES);
        assert_eq!(m.estimate(Read, Seq, 8192), 6.0);
    }
}
