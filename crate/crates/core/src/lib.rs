//! Discrete-event simulation of a caching device-memory allocator driven by
//! RLHF-style phased workloads.
//!
//! The pieces, bottom up:
//!
//! * [`allocator`]: a best-fit caching allocator with segment reservation,
//!   block splitting and coalescing, and `empty_cache`.
//! * [`device`]: finite device memory and the reservation log.
//! * [`workload`]: allocation traces, the synthetic RLHF generator and the
//!   line-delimited trace format.
//! * [`profiler`]: reserved/allocated series, fragmentation samples and
//!   report export.
//! * [`strategy`]: cache-release policies applied at phase boundaries.
//! * [`cli`]: the experiment runner behind the `fragsim` binary.

pub mod allocator;
pub mod cli;
pub mod device;
pub mod profiler;
pub mod strategy;
pub mod workload;

/// Byte counts throughout the crate.
pub type Bytes = u64;

pub const KIB: Bytes = 1 << 10;
pub const MIB: Bytes = 1 << 20;
pub const GIB: Bytes = 1 << 30;

pub use allocator::{Allocator, AllocatorConfig, AllocatorStats, AllocError, BlockId};
pub use device::{Device, SegmentId};
pub use profiler::{export, ExportFormat, FragReport, Profiler, Summary};
pub use strategy::{run, CachePolicy, RunError};
pub use workload::{generate, parse_trace, slice_training_only, write_trace, Trace, TraceEvent, WorkloadSpec};
