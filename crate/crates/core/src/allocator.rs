//! Hierarchical resource allocation.
//!
//! Task-level: every candidate node is scored by combining idleness profit
//! (how much new idle time the task would create relative to the node's
//! arrival gap), length consistency (a Gaussian affinity between the task's
//! length and the node's history), and forecast response time. Queue-level:
//! training tasks are deprioritized behind upcoming inference work whenever
//! the best achievable inference response would already violate its SLO.
//! The Separate / round-robin / lowest-utilization baselines sit behind the
//! same interface.

use crate::cluster::{forward_latency, NodeConfig};
use crate::error::{ConfigError, EngineError};
use crate::planner::{compute_idleness, Candidate, TraceQueues};
use crate::workload::TaskKind;
use serde::{Deserialize, Serialize};

/// Scheduling policy selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    LeMix,
    Separate,
    SeparateDynamic,
    RoundRobin,
    Luf,
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::LeMix => "lemix",
            Policy::Separate => "separate",
            Policy::SeparateDynamic => "separate-dynamic",
            Policy::RoundRobin => "round-robin",
            Policy::Luf => "luf",
        }
    }
}

impl std::str::FromStr for Policy {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "lemix" => Ok(Policy::LeMix),
            "separate" => Ok(Policy::Separate),
            "separate-dynamic" | "separate_dynamic" => Ok(Policy::SeparateDynamic),
            "round-robin" | "round_robin" | "rr" | "naivemix" => Ok(Policy::RoundRobin),
            "luf" => Ok(Policy::Luf),
            other => Err(ConfigError::field(
                "policy",
                format!("unknown policy `{other}` (expected lemix, separate, separate-dynamic, round-robin, luf)"),
            )),
        }
    }
}

/// All scheduling knobs for one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerParams {
    pub policy: Policy,
    /// Response-time weight in the priority score; must be positive.
    pub lambda1: f64,
    /// Length-consistency weight.
    pub lambda2: f64,
    /// Idleness tolerance threshold, seconds.
    pub tau: f64,
    /// SLO deadline as a multiple of a task's estimated forward latency.
    pub slo_multiple: f64,
    /// Lower bound on the history std used in length consistency.
    pub sigma_floor: f64,
    /// Neutral length-consistency value for nodes with under two samples.
    pub lc0: f64,
    /// Queue-level training deprioritization (LeMix only).
    pub deprioritize: bool,
    /// Memory-aware wait-or-drop execution gating.
    pub memory_aware: bool,
    /// Maximum inference requests merged into one continuous batch.
    pub max_batch: u32,
    /// Batch window as a multiple of the head request's stage forward time.
    pub batch_wait_factor: f64,
    /// Simulated cost of one LUF utilization query, seconds.
    pub luf_query_latency: f64,
    /// Simulated cost of one allocation decision; `None` picks a per-policy
    /// default.
    pub decision_cost: Option<f64>,
    /// Half-width of optional multiplicative execution-latency noise.
    pub latency_noise: f64,
    /// Request rate (tasks/s) above which SeparateDynamic shrinks the
    /// training partition.
    pub rate_threshold: f64,
    /// Trailing window for the arrival-rate estimate, seconds.
    pub rate_window: f64,
}

impl Default for SchedulerParams {
    fn default() -> Self {
        SchedulerParams {
            policy: Policy::LeMix,
            lambda1: 1.0,
            lambda2: 1.0,
            tau: 0.0,
            slo_multiple: 5.0,
            sigma_floor: 1.0,
            lc0: 0.0,
            deprioritize: true,
            memory_aware: true,
            max_batch: 8,
            batch_wait_factor: 0.5,
            luf_query_latency: 0.076,
            decision_cost: None,
            latency_noise: 0.0,
            rate_threshold: 50.0,
            rate_window: 5.0,
        }
    }
}

impl SchedulerParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.lambda1 <= 0.0 || !self.lambda1.is_finite() {
            return Err(ConfigError::field("lambda1", "must be > 0"));
        }
        if self.lambda2 < 0.0 {
            return Err(ConfigError::field("lambda2", "must be >= 0"));
        }
        if self.slo_multiple <= 0.0 {
            return Err(ConfigError::field("slo_multiple", "must be > 0"));
        }
        if self.sigma_floor <= 0.0 {
            return Err(ConfigError::field("sigma_floor", "must be > 0"));
        }
        if self.max_batch < 1 {
            return Err(ConfigError::field("max_batch", "must be >= 1"));
        }
        if self.batch_wait_factor < 0.0 {
            return Err(ConfigError::field("batch_wait_factor", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.latency_noise) {
            return Err(ConfigError::field("latency_noise", "must be in [0, 1)"));
        }
        Ok(())
    }

    /// Simulated seconds one allocation decision occupies the scheduler.
    pub fn decision_latency(&self) -> f64 {
        if let Some(cost) = self.decision_cost {
            return cost;
        }
        match self.policy {
            Policy::LeMix => 2.1e-4,
            Policy::RoundRobin => 1.5e-5,
            Policy::Separate | Policy::SeparateDynamic => 1.4e-5,
            Policy::Luf => self.luf_query_latency,
        }
    }
}

/// Length history of tasks previously routed to a node.
#[derive(Debug, Clone, Default)]
pub struct NodeHistory {
    count: u64,
    mean: f64,
    m2: f64,
    last_arrival: Option<f64>,
}

impl NodeHistory {
    pub fn push(&mut self, length: u32, arrival: f64) {
        self.count += 1;
        let x = length as f64;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
        self.last_arrival = Some(arrival);
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn std(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.m2 / (self.count - 1) as f64).sqrt()
        }
    }

    pub fn last_arrival(&self) -> Option<f64> {
        self.last_arrival
    }
}

/// Read-only snapshot of one node the allocator scores against.
pub struct NodeView<'a> {
    pub config: &'a NodeConfig,
    pub queues: &'a TraceQueues,
    pub history: &'a NodeHistory,
    /// Windowed busy fraction, used by the LUF baseline.
    pub utilization: f64,
}

/// Outcome of routing one task.
#[derive(Debug, Clone, Copy)]
pub struct AllocationDecision {
    pub node_id: usize,
    pub score: f64,
    pub ii: f64,
    pub response_time: f64,
    pub deprioritized: bool,
}

/// Idleness profit: `-max(II/S - gap, tau)`. Penalizes placements whose
/// added idleness exceeds the node's inter-arrival gap; capped at `-tau`.
pub fn idleness_profit(ii: f64, stages: usize, gap: f64, tau: f64) -> f64 {
    -(ii / stages as f64 - gap).max(tau)
}

/// Length consistency: Gaussian density of the task length under the node's
/// history, with the std floored at `sigma_floor`. Nodes with fewer than two
/// samples return the neutral constant `lc0`.
pub fn length_consistency(length: u32, history: &NodeHistory, sigma_floor: f64, lc0: f64) -> f64 {
    if history.count() < 2 {
        return lc0;
    }
    let sigma = history.std().max(sigma_floor);
    let z = (length as f64 - history.mean()) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

/// Node priority score: `(IP + lambda2 * LC) / (lambda1 * R)`.
pub fn priority_score(
    ip: f64,
    lc: f64,
    response_time: f64,
    params: &SchedulerParams,
) -> Result<f64, EngineError> {
    if response_time <= 0.0 {
        return Err(EngineError::Contract(format!(
            "priority score requires R > 0, got {response_time}"
        )));
    }
    Ok((ip + params.lambda2 * lc) / (params.lambda1 * response_time))
}

/// Mutable allocator state: per-policy cursors that persist across tasks.
#[derive(Debug, Default)]
pub struct Allocator {
    rr_cursor: u64,
    sep_inf_cursor: u64,
    sep_train_cursor: u64,
}

impl Allocator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Route one task. `rate_estimate` is the scheduler's current arrivals/s
    /// figure (SeparateDynamic); `both_kinds` says whether the workload
    /// contains both training and inference.
    pub fn allocate(
        &mut self,
        params: &SchedulerParams,
        kind: TaskKind,
        cand: Candidate,
        nodes: &[NodeView<'_>],
        training_rate: f64,
        rate_estimate: f64,
        both_kinds: bool,
    ) -> Result<AllocationDecision, EngineError> {
        debug_assert!(!nodes.is_empty());
        match params.policy {
            Policy::LeMix => self.lemix_assign(params, cand, nodes),
            Policy::RoundRobin => {
                let node_id = self.rr_assign(nodes.len());
                Ok(plain_decision(node_id, nodes, cand))
            }
            Policy::Luf => {
                let node_id = luf_assign(nodes);
                Ok(plain_decision(node_id, nodes, cand))
            }
            Policy::Separate | Policy::SeparateDynamic => {
                let n = nodes.len();
                let n_train = match params.policy {
                    Policy::Separate => separate_partition(n, training_rate, both_kinds)?,
                    _ => dynamic_partition(n, rate_estimate, params.rate_threshold, both_kinds)?,
                };
                let node_id = self.separate_assign(kind, n, n_train);
                Ok(plain_decision(node_id, nodes, cand))
            }
        }
    }

    fn lemix_assign(
        &mut self,
        params: &SchedulerParams,
        cand: Candidate,
        nodes: &[NodeView<'_>],
    ) -> Result<AllocationDecision, EngineError> {
        let mut best: Option<AllocationDecision> = None;
        for (idx, view) in nodes.iter().enumerate() {
            let plan = compute_idleness(view.queues, view.config, cand);
            let gap = view
                .history
                .last_arrival()
                .map(|a| cand.queue_time - a)
                .unwrap_or(f64::INFINITY);
            let ip = idleness_profit(plan.ii, view.config.num_stages(), gap, params.tau);
            let lc = length_consistency(cand.length, view.history, params.sigma_floor, params.lc0);
            let score = priority_score(ip, lc, plan.response_time, params)?;
            let decision = AllocationDecision {
                node_id: idx,
                score,
                ii: plan.ii,
                response_time: plan.response_time,
                deprioritized: false,
            };
            // Strictly-greater keeps the lowest node id on ties.
            if best.map_or(true, |b| score > b.score) {
                best = Some(decision);
            }
        }
        Ok(best.expect("at least one node"))
    }

    /// Sequential round-robin over node ids, one global cycle for all kinds.
    pub fn rr_assign(&mut self, num_nodes: usize) -> usize {
        let id = (self.rr_cursor % num_nodes as u64) as usize;
        self.rr_cursor += 1;
        id
    }

    /// Round-robin within the kind's partition. Inference owns the first
    /// `N - n_train` nodes, training the last `n_train`.
    pub fn separate_assign(&mut self, kind: TaskKind, num_nodes: usize, n_train: usize) -> usize {
        let n_inf = num_nodes - n_train;
        match kind {
            TaskKind::Inference => {
                if n_inf == 0 {
                    return 0;
                }
                let id = (self.sep_inf_cursor % n_inf as u64) as usize;
                self.sep_inf_cursor += 1;
                id
            }
            TaskKind::Training => {
                if n_train == 0 {
                    return num_nodes - 1;
                }
                let id = n_inf + (self.sep_train_cursor % n_train as u64) as usize;
                self.sep_train_cursor += 1;
                id
            }
        }
    }
}

fn plain_decision(node_id: usize, nodes: &[NodeView<'_>], cand: Candidate) -> AllocationDecision {
    let view = &nodes[node_id];
    let plan = compute_idleness(view.queues, view.config, cand);
    AllocationDecision {
        node_id,
        score: 0.0,
        ii: plan.ii,
        response_time: plan.response_time,
        deprioritized: false,
    }
}

/// Size of the training partition: `floor(N * alpha + 0.5)`, clamped to
/// `[1, N-1]` when both workload kinds are present so neither service
/// starves.
pub fn separate_partition(
    num_nodes: usize,
    training_rate: f64,
    both_kinds: bool,
) -> Result<usize, EngineError> {
    let raw = (num_nodes as f64 * training_rate + 0.5).floor() as i64;
    if !both_kinds {
        return Ok(raw.clamp(0, num_nodes as i64) as usize);
    }
    if num_nodes < 2 {
        return Err(EngineError::Contract(
            "separate policy needs at least 2 nodes for mixed workloads".into(),
        ));
    }
    Ok(raw.clamp(1, num_nodes as i64 - 1) as usize)
}

/// SeparateDynamic: a larger training share under light traffic, half the
/// cluster otherwise.
pub fn dynamic_partition(
    num_nodes: usize,
    rate_estimate: f64,
    rate_threshold: f64,
    both_kinds: bool,
) -> Result<usize, EngineError> {
    if !both_kinds {
        return Ok(if rate_estimate >= 0.0 { num_nodes / 2 } else { 0 });
    }
    if num_nodes < 2 {
        return Err(EngineError::Contract(
            "separate-dynamic needs at least 2 nodes for mixed workloads".into(),
        ));
    }
    let n = num_nodes as i64;
    let n_train = if rate_estimate < rate_threshold {
        n - (n / 4).max(1)
    } else {
        n / 2
    };
    Ok(n_train.clamp(1, n - 1) as usize)
}

/// Lowest windowed utilization first; ties go to the lowest node id.
pub fn luf_assign(nodes: &[NodeView<'_>]) -> usize {
    let mut best = 0usize;
    for (idx, view) in nodes.iter().enumerate() {
        if view.utilization < nodes[best].utilization {
            best = idx;
        }
    }
    best
}

/// Queue-level training deprioritization: true iff even the best node cannot
/// serve the next enqueued inference task `(C', l', a')` within its SLO
/// window `tau_r`. Estimated completion per node is the latest planned
/// final-stage forward end (or the task's arrival on an empty node) plus one
/// stage-forward of the task. Returns false when no next inference task
/// exists.
pub fn should_deprioritize(
    next_inf: Option<(u32, u32, f64)>,
    nodes: &[NodeView<'_>],
    tau_r: f64,
) -> bool {
    let (batch, length, arrival) = match next_inf {
        Some(t) => t,
        None => return false,
    };
    let mut best = f64::INFINITY;
    for view in nodes {
        let tail = view
            .queues
            .latest_planned_forward_end()
            .unwrap_or(arrival)
            .max(arrival);
        let last_stage = view.config.stages.last().expect("validated");
        let est = tail + forward_latency(last_stage, batch, length);
        best = best.min(est - arrival);
    }
    best > tau_r
}
