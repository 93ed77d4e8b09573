//! Core data model and analysis for streaming token-generation benchmarks.
//!
//! A benchmark run is recorded as a [`RunRecord`]: one [`RequestTrace`] per
//! request, each holding the timestamps at which output tokens arrived.
//! Everything downstream (conventional latency metrics, the deadline-based
//! fluidity index, SLO solvers and reports) is a pure function of that record.

pub mod metrics;
pub mod prefill;
pub mod report;
pub mod solver;
pub mod trace;
pub mod workload;

pub use metrics::{DeadlineConfig, FluidityResult, PrefillDeadline};
pub use prefill::{PrefillCurve, ProfileSample};
pub use solver::{CapacityResult, DeadlineSolution, SloSpec};
pub use trace::{RequestStatus, RequestTrace, RunMetadata, RunRecord, TokenEvent};
pub use workload::{ArrivalSchedule, PromptLengthSource, WorkloadRequest, WorkloadSpec};
