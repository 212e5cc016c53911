//! Deterministic discrete-event simulator for co-located LLM training and
//! inference workloads on a pipeline-parallel cluster.
//!
//! The crate models a cluster of nodes, each holding an ordered pipeline of
//! stages (GPUs). Tasks — forward-only inference requests and
//! forward+backward training steps — are routed to nodes by a pluggable
//! scheduling policy, forecast by an execution planner, and executed by an
//! event-driven engine under a memory-aware wait-or-drop discipline.
//!
//! ```text
//! workload ──▶ allocator ──▶ planner ──▶ engine ──▶ metrics
//!  (tasks)     (Eq. scores)  (paths)    (events)   (reports)
//! ```

pub mod allocator;
pub mod cluster;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod planner;
pub mod workload;

pub use allocator::{
    AllocationDecision, Allocator, NodeHistory, NodeView, Policy, SchedulerParams,
};
pub use cluster::{
    fit_coefficients, ClusterConfig, ModelPreset, NodeConfig, ProfileOp, ProfilingObservation,
    StageProfile, MODEL_PRESETS,
};
pub use engine::{run, SimParams, SimResult, TaskRecord};
pub use error::{ConfigError, EngineError, ParseError, ProfilingError};
pub use metrics::{compare, summarize, ComparisonTable, MetricsReport};
pub use planner::{compute_idleness, plan_backward, ExecPath, PlanResult, TraceQueues};
pub use workload::{
    generate_poisson, load_trace, make_heterogeneity_sweep, workload_hash, GenerationLimit,
    LengthDistribution, LengthFamily, Task, TaskKind, WorkloadSpec,
};
