use std::fmt;

use serde::{Deserialize, Serialize};

use crate::placement::ObjectId;

const REMOTE_BIT: u64 = 1 << 63;
const ID_SHIFT: u32 = 40;
const ID_BITS: u32 = 23;
const OFFSET_MASK: u64 = (1 << ID_SHIFT) - 1;

/// Largest object id a handle can carry.
pub const MAX_OBJECT_ID: ObjectId = (1 << ID_BITS) - 1;

/// Tagged address of an object byte: remote tag (bit 63), object id
/// (bits 40..63) and byte offset inside the object (bits 0..40).
///
/// Remote-tagged handles were issued for objects placed remotely at
/// allocation time. Local-tagged handles stay valid if their object is later
/// demoted; the runtime then redirects them through the metadata table.
#[derive(Copy, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ObjectHandle(pub u64);

impl ObjectHandle {
    pub fn new(id: ObjectId, remote: bool) -> Self {
        assert!(id <= MAX_OBJECT_ID, "object id {id} does not fit a handle");
        ObjectHandle(if remote { REMOTE_BIT } else { 0 } | id << ID_SHIFT)
    }

    pub fn object_id(self) -> ObjectId {
        (self.0 & !REMOTE_BIT) >> ID_SHIFT
    }

    pub fn is_remote(self) -> bool {
        self.0 & REMOTE_BIT != 0
    }

    pub fn offset(self) -> u64 {
        self.0 & OFFSET_MASK
    }

    /// Handle to the byte `delta` further into the same object.
    #[allow(clippy::should_implement_trait)]
    pub fn add(self, delta: u64) -> Self {
        let off = self.offset() + delta;
        assert!(off <= OFFSET_MASK, "offset overflows the handle");
        ObjectHandle((self.0 & !OFFSET_MASK) | off)
    }

    pub fn base(self) -> Self {
        ObjectHandle(self.0 & !OFFSET_MASK)
    }
}

impl fmt::Debug for ObjectHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}#{}+{}",
            if self.is_remote() { "R" } else { "L" },
            self.object_id(),
            self.offset()
        )
    }
}

/// Deferred barrier for a read. The requested bytes are only usable after
/// [`Runtime::acquire`](super::Runtime::acquire) returns for this ticket.
#[derive(Debug, PartialEq, Eq)]
#[must_use = "a fetch ticket must be acquired before the data is used"]
pub struct FetchTicket {
    pub(crate) id: u64,
    pub object_id: ObjectId,
    /// Object byte range this ticket makes available: (offset, length).
    pub satisfied: (u64, u64),
    /// Clock time at which the read was issued, in nanoseconds.
    pub issued_at: u64,
    /// Fabric operations behind the ticket; zero means already satisfied.
    pub ops: usize,
}

impl FetchTicket {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn is_satisfied(&self) -> bool {
        self.ops == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fields_round_trip() {
        let h = ObjectHandle::new(12345, true).add(77);
        assert!(h.is_remote());
        assert_eq!((h.object_id(), h.offset()), (12345, 77));
        assert_eq!(h.base().offset(), 0);
        let l = ObjectHandle::new(MAX_OBJECT_ID, false);
        assert!(!l.is_remote());
        assert_eq!(l.object_id(), MAX_OBJECT_ID);
    }
}
