//! Remote locks on the lock word at the start of each remote home.
//!
//! The word is 0 when free, [`LOCK_EXCLUSIVE`] when held exclusively and the
//! holder count when shared. Every transition is a single CAS.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{ObjectHandle, Result, Runtime, RuntimeError};
use crate::clock::us_to_ns;

pub const LOCK_EXCLUSIVE: u64 = u64::MAX;
pub const DEFAULT_LOCK_ATTEMPTS: u32 = 10_000;

const BACKOFF_CAP_US: u64 = 1000;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LockMode {
    Shared,
    Exclusive,
}

impl Runtime {
    fn lock_word(&self, h: ObjectHandle) -> Result<crate::fabric::RemoteAddr> {
        let id = h.object_id();
        self.object(id)?.home.ok_or(RuntimeError::NotRemote(id))
    }

    fn backoff(&self, attempt: u32) {
        let us = (1u64 << attempt.min(10)).min(BACKOFF_CAP_US);
        if self.clock().is_virtual() {
            self.clock().charge(us_to_ns(us as f64));
            std::thread::yield_now();
        } else {
            std::thread::sleep(Duration::from_micros(us));
        }
    }

    /// Takes the remote lock of an object that has a remote home.
    /// Uncontended, this costs one CAS.
    pub fn lock_remote(&mut self, h: ObjectHandle, mode: LockMode) -> Result<()> {
        let id = h.object_id();
        let addr = self.lock_word(h)?;
        if self.object(id)?.lock_held.is_some() {
            return Err(RuntimeError::LockState {
                object: id,
                msg: "already held by this runtime".into(),
            });
        }
        let mut expected = 0;
        let mut attempts = 0;
        loop {
            let desired = match mode {
                LockMode::Exclusive => LOCK_EXCLUSIVE,
                LockMode::Shared => expected + 1,
            };
            let prev = self.fabric.atomic_cas(addr, expected, desired)?;
            self.stats.atomic_ops += 1;
            if prev == expected {
                break;
            }
            attempts += 1;
            if attempts >= self.cfg.lock_attempts {
                return Err(RuntimeError::LockTimeout(id));
            }
            match mode {
                LockMode::Shared if prev != LOCK_EXCLUSIVE && prev < LOCK_EXCLUSIVE - 1 => expected = prev,
                _ => {
                    expected = 0;
                    self.backoff(attempts);
                }
            }
        }
        self.object_mut(id)?.lock_held = Some(mode);
        Ok(())
    }

    /// Releases a lock taken with [`lock_remote`](Self::lock_remote).
    pub fn unlock_remote(&mut self, h: ObjectHandle) -> Result<()> {
        let id = h.object_id();
        let addr = self.lock_word(h)?;
        let mode = self.object(id)?.lock_held.ok_or_else(|| RuntimeError::LockState {
            object: id,
            msg: "not held by this runtime".into(),
        })?;
        let (mut expected, mut desired) = match mode {
            LockMode::Exclusive => (LOCK_EXCLUSIVE, 0),
            LockMode::Shared => (1, 0),
        };
        loop {
            let prev = self.fabric.atomic_cas(addr, expected, desired)?;
            self.stats.atomic_ops += 1;
            if prev == expected {
                break;
            }
            if mode == LockMode::Exclusive || prev == 0 || prev == LOCK_EXCLUSIVE {
                return Err(RuntimeError::LockState {
                    object: id,
                    msg: format!("lock word holds {prev:#x}"),
                });
            }
            expected = prev;
            desired = prev - 1;
        }
        self.object_mut(id)?.lock_held = None;
        Ok(())
    }

    pub fn lock_held(&self, h: ObjectHandle) -> Result<Option<LockMode>> {
        Ok(self.object(h.object_id())?.lock_held)
    }
}
