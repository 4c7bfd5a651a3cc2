//! Fabric clocks.
//!
//! The simulated backend runs on a deterministic virtual clock that only moves
//! when compute is charged or when a caller blocks on an operation. The TCP
//! backend uses wall time, where charging compute is a no-op.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

/// Nanoseconds on a fabric clock. Used for both instants and spans.
pub type Nanos = u64;

/// Converts microseconds to whole nanoseconds, rounding to nearest.
pub fn us_to_ns(us: f64) -> Nanos {
    debug_assert!(us >= 0.0 && us.is_finite());
    (us * 1000.0).round() as Nanos
}

pub fn ns_to_us(ns: Nanos) -> f64 {
    ns as f64 / 1000.0
}

#[derive(Clone, Debug)]
pub enum Clock {
    Virtual(Arc<AtomicU64>),
    Wall(Instant),
}

impl Clock {
    pub fn new_virtual() -> Self {
        Clock::Virtual(Arc::new(AtomicU64::new(0)))
    }

    pub fn new_wall() -> Self {
        Clock::Wall(Instant::now())
    }

    pub fn is_virtual(&self) -> bool {
        matches!(self, Clock::Virtual(_))
    }

    pub fn now(&self) -> Nanos {
        match self {
            Clock::Virtual(t) => t.load(Ordering::Acquire),
            Clock::Wall(start) => start.elapsed().as_nanos() as Nanos,
        }
    }

    pub fn now_us(&self) -> f64 {
        ns_to_us(self.now())
    }

    /// Charges `ns` of local work. Virtual clocks advance; wall clocks ignore it.
    pub fn charge(&self, ns: Nanos) {
        if let Clock::Virtual(t) = self {
            t.fetch_add(ns, Ordering::AcqRel);
        }
    }

    /// Moves a virtual clock forward to `t` if it is behind. Never moves backwards.
    pub fn advance_to(&self, t: Nanos) {
        if let Clock::Virtual(now) = self {
            now.fetch_max(t, Ordering::AcqRel);
        }
    }

    /// True when both handles observe the same underlying clock.
    pub fn same_as(&self, other: &Clock) -> bool {
        match (self, other) {
            (Clock::Virtual(a), Clock::Virtual(b)) => Arc::ptr_eq(a, b),
            (Clock::Wall(a), Clock::Wall(b)) => a == b,
            _ => false,
        }
    }
}
