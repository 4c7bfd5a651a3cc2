//! Passive TCP memory node.
//!
//! Hosts a [`RemoteRegion`](crate::fabric::region::RemoteRegion) and executes
//! framed ALLOC/FREE/READ/WRITE/atomic requests. Each connection is served by
//! its own thread, strictly in arrival order, which is what gives the TCP
//! fabric its per-channel FIFO ordering.

mod server;
pub mod wire;

pub use server::{spawn, MemnodeConfig, MemnodeError, MemnodeHandle, MIN_CAPACITY};
