//! Error types shared across the simulator library.

use thiserror::Error;

/// Errors raised while validating configuration before a run starts.
#[derive(Debug, Error)]
pub enum ConfigError {
    /// A field failed validation; names the offending field.
    #[error("invalid configuration: field `{field}`: {reason}")]
    InvalidField { field: String, reason: String },
    /// The cluster cannot host the requested workload split.
    #[error("invalid cluster layout: {0}")]
    Layout(String),
}

impl ConfigError {
    pub fn field(field: impl Into<String>, reason: impl Into<String>) -> Self {
        ConfigError::InvalidField {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

/// Errors raised while parsing external files (traces, profiling CSVs).
#[derive(Debug, Error)]
pub enum ParseError {
    #[error("{path}:{line}: {reason}")]
    Malformed {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Errors raised while fitting cost-model coefficients.
#[derive(Debug, Error)]
pub enum ProfilingError {
    /// One or more (stage, op) pairs have no observations.
    #[error("profiling incomplete, missing observations for: {}",
        .gaps.iter().map(|(s, o)| format!("stage {s} {o:?}")).collect::<Vec<_>>().join(", "))]
    Incomplete { gaps: Vec<(usize, crate::cluster::ProfileOp)> },
    #[error("no observations provided")]
    Empty,
}

/// Errors raised during simulation execution.
#[derive(Debug, Error)]
pub enum EngineError {
    /// A single task's memory demand exceeds the stage threshold even on an
    /// otherwise empty stage; it can never be admitted.
    #[error(
        "task {task} is infeasible: demand of {demand_bytes} bytes exceeds \
         threshold {threshold_bytes} bytes on node {node} stage {stage}"
    )]
    InfeasibleTask {
        task: u64,
        node: usize,
        stage: usize,
        demand_bytes: u64,
        threshold_bytes: u64,
    },
    /// The event loop stopped making progress within its event budget.
    #[error("event budget ({budget} events) exhausted; likely livelock: {diagnostic}")]
    Livelock { budget: u64, diagnostic: String },
    /// A planner lookup referenced a task that is not in the trace queues.
    #[error("task {0} not found in trace queues")]
    UnknownTask(u64),
    /// An operation was invoked on the wrong task kind.
    #[error("contract violation: {0}")]
    Contract(String),
}
