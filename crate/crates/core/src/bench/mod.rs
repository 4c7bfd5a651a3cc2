//! Benchmark harness: latency microbenchmarks and workload runs against an
//! all-local oracle.

pub mod driver;
pub mod microbench;
pub mod report;
pub mod workload;

pub use driver::{
    ablation, fraction_sweep, layout_for, run_oracle, run_workload, run_workload_with, size_sweep, Backend, BenchConfig, BenchError,
    RunReport, RunStatus, FRACTIONS,
};
pub use microbench::{run_microbench, MicroRow};
pub use report::{emit_report, Format, ReportFile, CSV_HEADER, SCHEMA_VERSION};
pub use workload::{preset, presets, AccessKind, ObjectSpec, Population, WorkloadSpec, PRESET_NAMES};
