use serde::{Deserialize, Serialize};

use super::RuntimeError;

/// Split of the local memory budget into the three regions.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionLayout {
    /// Objects that live entirely in local memory.
    pub local_object_bytes: u64,
    /// Cache for remote objects; two equal halves when double buffering.
    pub remote_cache_bytes: u64,
    /// Metadata table plus the demotion staging pool.
    pub metadata_bytes: u64,
}

impl RegionLayout {
    pub fn new(local_object_bytes: u64, remote_cache_bytes: u64, metadata_bytes: u64) -> Result<Self, RuntimeError> {
        let l = RegionLayout {
            local_object_bytes,
            remote_cache_bytes,
            metadata_bytes,
        };
        l.validate()?;
        Ok(l)
    }

    /// Splits `budget` by percentages; the cache share is rounded down to an
    /// even byte count and the leftover goes to metadata.
    pub fn from_percentages(budget: u64, local_pct: u64, cache_pct: u64) -> Result<Self, RuntimeError> {
        if local_pct + cache_pct > 100 {
            return Err(RuntimeError::Layout(format!("{local_pct}% + {cache_pct}% exceeds the budget")));
        }
        let local = budget * local_pct / 100;
        let cache = (budget * cache_pct / 100) & !1;
        RegionLayout::new(local, cache, budget - local - cache)
    }

    pub fn validate(&self) -> Result<(), RuntimeError> {
        if !self.remote_cache_bytes.is_multiple_of(2) {
            return Err(RuntimeError::Layout(format!(
                "remote_cache_bytes {} must be even",
                self.remote_cache_bytes
            )));
        }
        self.local_object_bytes
            .checked_add(self.remote_cache_bytes)
            .and_then(|s| s.checked_add(self.metadata_bytes))
            .ok_or_else(|| RuntimeError::Layout("budget overflows".into()))?;
        Ok(())
    }

    pub fn budget(&self) -> u64 {
        self.local_object_bytes + self.remote_cache_bytes + self.metadata_bytes
    }

    pub fn half(&self) -> u64 {
        self.remote_cache_bytes / 2
    }
}
