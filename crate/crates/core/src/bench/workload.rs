//! Synthetic iterative workloads.

use serde::{Deserialize, Serialize};

use crate::fabric::AccessPattern;

const KIB: u64 = 1024;
const MIB: u64 = 1 << 20;

/// Desk-scale bytes per gigabyte of the original workload footprint.
pub const DESK_BYTES_PER_GB: u64 = 2 * MIB;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AccessKind {
    /// Chunks visited in address order.
    SeqStride,
    /// Chunks visited in a seeded random order, known ahead of time.
    Random,
    /// Each chunk's address depends on the previous one; nothing can be
    /// issued ahead.
    ChainedDependent,
}

impl AccessKind {
    pub fn fabric_pattern(self) -> AccessPattern {
        match self {
            AccessKind::SeqStride => AccessPattern::Seq,
            _ => AccessPattern::Rand,
        }
    }

    pub fn pipelined(self) -> bool {
        self != AccessKind::ChainedDependent
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub tag: String,
    pub size: u64,
}

/// Objects of a workload. Large objects live for the whole run; small ones
/// are allocated and freed every iteration, `small_live` at a time.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Population {
    pub large: Vec<ObjectSpec>,
    #[serde(default)]
    pub small_per_iteration: u64,
    #[serde(default = "default_small_size")]
    pub small_size: u64,
    #[serde(default = "default_small_live")]
    pub small_live: u64,
}

fn default_small_size() -> u64 {
    48
}

fn default_small_live() -> u64 {
    64
}

impl Population {
    pub fn large_bytes(&self) -> u64 {
        self.large.iter().map(|o| o.size).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub name: String,
    pub iterations: u64,
    /// Compute per iteration when run by one thread; split evenly across threads.
    pub compute_us: f64,
    pub population: Population,
    pub access: AccessKind,
    /// Read:write ratio; bytes written per iteration = bytes read × write/read.
    pub ratio: (u32, u32),
    #[serde(default = "default_threads")]
    pub threads: usize,
}

fn default_threads() -> usize {
    1
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.ratio.0 == 0 || self.ratio.1 == 0 {
            return Err(format!("{}: ratio components must be positive", self.name));
        }
        if self.iterations == 0 {
            return Err(format!("{}: needs at least one iteration", self.name));
        }
        if self.population.large.is_empty() || self.population.large.iter().any(|o| o.size == 0) {
            return Err(format!("{}: needs large objects of positive size", self.name));
        }
        if !(self.compute_us >= 0.0 && self.compute_us.is_finite()) {
            return Err(format!("{}: compute_us must be finite and non-negative", self.name));
        }
        if self.threads == 0 {
            return Err(format!("{}: needs at least one thread", self.name));
        }
        Ok(())
    }

    /// Fraction of each chunk that is written back.
    pub fn write_fraction(&self) -> f64 {
        (self.ratio.1 as f64 / self.ratio.0 as f64).min(1.0)
    }

    /// Same workload with every object and the compute scaled by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut s = self.clone();
        for o in &mut s.population.large {
            o.size = ((o.size as f64 * factor) as u64).max(8).next_multiple_of(8);
        }
        s.compute_us *= factor;
        s
    }

    pub fn load(path: &std::path::Path) -> anyhow::Result<Self> {
        let s: WorkloadSpec = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        s.validate().map_err(anyhow::Error::msg)?;
        Ok(s)
    }
}

/// Compute charged per MiB of data per iteration by the presets.
pub const PRESET_COMPUTE_US_PER_MIB: f64 = 600.0;

struct Row {
    name: &'static str,
    total_gb: f64,
    remote_gb: f64,
    objects: &'static [&'static str],
    ratio: (u32, u32),
    access: AccessKind,
}

// Footprints, read:write ratios and object names of the evaluated workloads.
const ROWS: &[Row] = &[
    Row {
        name: "cg",
        total_gb: 8.6,
        remote_gb: 5.4,
        objects: &["a"],
        ratio: (1, 1),
        access: AccessKind::SeqStride,
    },
    Row {
        name: "mg",
        total_gb: 26.5,
        remote_gb: 26.4,
        objects: &["u", "v", "r"],
        ratio: (9, 8),
        access: AccessKind::SeqStride,
    },
    Row {
        name: "ft",
        total_gb: 80.0,
        remote_gb: 80.0,
        objects: &["twiddle", "u_0", "u_1"],
        ratio: (11, 7),
        access: AccessKind::Random,
    },
    Row {
        name: "bt",
        total_gb: 10.7,
        remote_gb: 7.6,
        objects: &["u", "forcing", "rhs"],
        ratio: (5, 3),
        access: AccessKind::SeqStride,
    },
    Row {
        name: "lu",
        total_gb: 8.8,
        remote_gb: 7.6,
        objects: &["u", "rsd", "frct"],
        ratio: (15, 8),
        access: AccessKind::Random,
    },
    Row {
        name: "is",
        total_gb: 32.3,
        remote_gb: 32.0,
        objects: &["key_array", "key_buf2"],
        ratio: (1, 1),
        access: AccessKind::SeqStride,
    },
    Row {
        name: "xsbench",
        total_gb: 5.5,
        remote_gb: 5.1,
        objects: &["index_grid"],
        ratio: (1, 1),
        access: AccessKind::Random,
    },
    Row {
        name: "miniamr",
        total_gb: 32.2,
        remote_gb: 30.9,
        objects: &["blocks"],
        ratio: (11, 9),
        access: AccessKind::ChainedDependent,
    },
];

pub const PRESET_NAMES: &[&str] = &["cg", "mg", "ft", "bt", "lu", "is", "xsbench", "miniamr", "laghos"];

fn gb(x: f64) -> u64 {
    ((x * DESK_BYTES_PER_GB as f64) as u64).next_multiple_of(8)
}

/// Built-in workload by name.
pub fn preset(name: &str) -> Option<WorkloadSpec> {
    if name == "laghos" {
        return Some(laghos());
    }
    let row = ROWS.iter().find(|r| r.name == name)?;
    let mut large: Vec<ObjectSpec> = row
        .objects
        .iter()
        .map(|t| ObjectSpec {
            tag: (*t).into(),
            size: gb(row.remote_gb / row.objects.len() as f64),
        })
        .collect();
    // The rest of the footprint: up to four working vectors.
    let rest = gb(row.total_gb - row.remote_gb);
    if rest > 0 {
        let n = (rest / (64 * KIB)).clamp(1, 4);
        for i in 0..n {
            large.push(ObjectSpec {
                tag: format!("work{i}"),
                size: (rest / n).next_multiple_of(8),
            });
        }
    }
    let total: u64 = large.iter().map(|o| o.size).sum();
    Some(WorkloadSpec {
        name: row.name.into(),
        iterations: 6,
        compute_us: PRESET_COMPUTE_US_PER_MIB * total as f64 / MIB as f64,
        population: Population {
            large,
            small_per_iteration: 256,
            small_size: 48,
            small_live: 64,
        },
        access: row.access,
        ratio: row.ratio,
        threads: 1,
    })
}

/// Many tiny short-lived objects next to 200 large ones.
fn laghos() -> WorkloadSpec {
    let large: Vec<ObjectSpec> = (0..200)
        .map(|i| ObjectSpec {
            tag: format!("field{i}"),
            size: 256 * KIB,
        })
        .collect();
    let total: u64 = large.iter().map(|o| o.size).sum();
    WorkloadSpec {
        name: "laghos".into(),
        iterations: 2,
        compute_us: PRESET_COMPUTE_US_PER_MIB * total as f64 / MIB as f64,
        population: Population {
            large,
            small_per_iteration: 50_000,
            small_size: 48,
            small_live: 1000,
        },
        access: AccessKind::SeqStride,
        ratio: (5, 1),
        threads: 1,
    }
}

pub fn presets() -> Vec<WorkloadSpec> {
    PRESET_NAMES.iter().map(|n| preset(n).unwrap()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid_and_desk_sized() {
        for s in presets() {
            s.validate().unwrap();
            assert!(s.population.large_bytes() <= 512 * MIB, "{}", s.name);
        }
        let cg = preset("cg").unwrap();
        assert_eq!(cg.ratio, (1, 1));
        assert_eq!(cg.access, AccessKind::SeqStride);
        assert!(preset("nope").is_none());
    }
}
