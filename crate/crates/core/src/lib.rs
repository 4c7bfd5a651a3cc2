//! Object-level disaggregated memory runtime.
pub mod bench;
pub mod checkpoint;
pub mod clock;
pub mod fabric;
pub mod memnode;
pub mod placement;
pub mod prefetch;
pub mod runtime;
pub mod threads;
