//! Which objects go to remote memory.
//!
//! Only large objects (strictly bigger than a page) are candidates. They are
//! ranked largest first; among equal sizes the least accessed go first, then
//! the most written, then the lowest id.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub type ObjectId = u64;

pub const DEFAULT_PAGE_SIZE: u64 = 4096;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Location {
    Local,
    Remote,
    RemoteCached,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum SizeClass {
    Small,
    Large,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectDescriptor {
    pub object_id: ObjectId,
    pub size: u64,
    pub read_count: u64,
    pub write_count: u64,
    pub alloc_iteration: u64,
    pub free_iteration: Option<u64>,
    pub location: Location,
}

impl ObjectDescriptor {
    pub fn new(object_id: ObjectId, size: u64) -> Self {
        ObjectDescriptor {
            object_id,
            size,
            read_count: 0,
            write_count: 0,
            alloc_iteration: 0,
            free_iteration: None,
            location: Location::Local,
        }
    }

    pub fn accesses(&self) -> u64 {
        self.read_count + self.write_count
    }

    /// Iterations between allocation and free, if freed.
    pub fn lifetime(&self) -> Option<u64> {
        self.free_iteration.map(|f| f - self.alloc_iteration)
    }
}

pub fn classify(desc: &ObjectDescriptor, page_size: u64) -> SizeClass {
    if desc.size > page_size {
        SizeClass::Large
    } else {
        SizeClass::Small
    }
}

/// Remote-placement priority: `Less` means `a` should leave local memory first.
pub fn remote_priority(a: &ObjectDescriptor, b: &ObjectDescriptor) -> Ordering {
    b.size
        .cmp(&a.size)
        .then(a.accesses().cmp(&b.accesses()))
        .then(b.write_count.cmp(&a.write_count))
        .then(a.object_id.cmp(&b.object_id))
}

pub fn rank_for_remote(objects: &[ObjectDescriptor]) -> Vec<ObjectDescriptor> {
    let mut v = objects.to_vec();
    v.sort_by(remote_priority);
    v
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selection {
    pub victims: Vec<ObjectDescriptor>,
    /// Bytes covered by the victims.
    pub bytes: u64,
    /// Set when all residents together are smaller than what was needed.
    pub insufficient: bool,
}

/// Shortest ranked prefix of `resident` whose sizes add up to `needed`.
pub fn select_victims(resident: &[ObjectDescriptor], needed: u64) -> Selection {
    let mut victims = Vec::new();
    let mut bytes = 0;
    if needed > 0 {
        for d in rank_for_remote(resident) {
            bytes += d.size;
            victims.push(d);
            if bytes >= needed {
                break;
            }
        }
    }
    Selection {
        victims,
        bytes,
        insufficient: bytes < needed,
    }
}

/// Expected access counts for a tagged object, seeded before it is touched.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessProfileEntry {
    pub object_tag: String,
    pub expected_reads: u64,
    pub expected_writes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AccessProfile {
    by_tag: HashMap<String, (u64, u64)>,
}

impl AccessProfile {
    pub fn from_entries(entries: Vec<AccessProfileEntry>) -> Self {
        AccessProfile {
            by_tag: entries
                .into_iter()
                .map(|e| (e.object_tag, (e.expected_reads, e.expected_writes)))
                .collect(),
        }
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let entries: Vec<AccessProfileEntry> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Ok(AccessProfile::from_entries(entries))
    }

    /// (expected reads, expected writes) for `tag`.
    pub fn get(&self, tag: &str) -> Option<(u64, u64)> {
        self.by_tag.get(tag).copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(id: u64, size: u64, r: u64, w: u64) -> ObjectDescriptor {
        ObjectDescriptor {
            read_count: r,
            write_count: w,
            ..ObjectDescriptor::new(id, size)
        }
    }

    fn ids(v: &[ObjectDescriptor]) -> Vec<u64> {
        v.iter().map(|d| d.object_id).collect()
    }

    #[test]
    fn classify_boundary() {
        assert_eq!(classify(&d(1, 4096, 0, 0), DEFAULT_PAGE_SIZE), SizeClass::Small);
        assert_eq!(classify(&d(1, 4097, 0, 0), DEFAULT_PAGE_SIZE), SizeClass::Large);
        assert_eq!(classify(&d(1, 1, 0, 0), DEFAULT_PAGE_SIZE), SizeClass::Small);
    }

    #[test]
    fn ranking_rules() {
        assert_eq!(ids(&rank_for_remote(&[d(1, 8192, 0, 0), d(2, 16384, 0, 0)])), [2, 1]);
        assert_eq!(ids(&rank_for_remote(&[d(1, 8192, 10, 0), d(2, 8192, 2, 0)])), [2, 1]);
        assert_eq!(ids(&rank_for_remote(&[d(1, 8192, 5, 5), d(2, 8192, 8, 2)])), [1, 2]);
        assert_eq!(ids(&rank_for_remote(&[d(7, 8192, 1, 1), d(3, 8192, 1, 1)])), [3, 7]);
    }

    #[test]
    fn victim_prefix() {
        let res = [d(1, 16 << 10, 0, 0), d(2, 8 << 10, 0, 0)];
        let s = select_victims(&res, 10 << 10);
        assert_eq!(ids(&s.victims), [1]);
        assert!(!s.insufficient);
        assert!(select_victims(&res, 0).victims.is_empty());
        let s = select_victims(&res, 100 << 10);
        assert_eq!(s.victims.len(), 2);
        assert!(s.insufficient);
    }

    #[test]
    fn profile_entries_parse() {
        let p: Vec<AccessProfileEntry> = serde_json::from_str(r#"[{"object_tag":"x","expected_reads":3,"expected_writes":1}]"#).unwrap();
        assert_eq!(AccessProfile::from_entries(p).get("x"), Some((3, 1)));
    }
}
