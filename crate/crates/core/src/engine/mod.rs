//! Deterministic discrete-event execution of the cluster.
//!
//! The engine drives a single ordered event stream: task arrivals feed a
//! serial scheduler that charges per-policy decision latency, dispatched
//! work is planned onto a node's trace queues, and per-stage execution units
//! run under the memory-aware wait-or-drop policy. Every actual execution
//! calibrates the planner's forecasts, so planning and execution stay one
//! consistent timeline. Events tie-break on an insertion sequence number,
//! which makes every run a pure function of (inputs, seed).

mod node;
mod result;

pub use result::{GpuLedger, IntervalKind, SimResult, TaskRecord};

use crate::allocator::{should_deprioritize, Allocator, NodeView, Policy, SchedulerParams};
use crate::cluster::{backward_latency, decode_step_latency, forward_latency, ClusterConfig, GB};
use crate::error::EngineError;
use crate::planner::{
    calibrate, compute_idleness, plan_backward, CalibrateOp, Candidate, PlannedEntry,
};
use crate::workload::{workload_hash, Task, TaskKind};
use node::{
    DecodeMember, EntryExec, FormingBatch, MemberShape, NodeState, RunningUnit, Unit, UnitKind,
    WaitingUnit,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::time::Instant;

/// Entry ids above this bound denote merged continuous batches.
const BATCH_ID_BASE: u64 = 1 << 62;

/// Run-level engine options, separate from scheduling parameters.
#[derive(Debug, Clone, Default)]
pub struct SimParams {
    /// Abort with a livelock diagnostic after this many events.
    pub event_budget: Option<u64>,
    /// Keep per-task planned paths in the result (larger output).
    pub record_plans: bool,
}

#[derive(Debug, Clone)]
enum Ev {
    Arrival(usize),
    DispatchDone(usize),
    ForwardDone { node: usize, stage: usize, entry: u64 },
    BackwardDone { node: usize, stage: usize, entry: u64 },
    MemoryCheck { node: usize, stage: usize, token: u64 },
    BatchTimer { node: usize, token: u64 },
    DecodeStep { node: usize, token: u64 },
    SyncDone { version: u64 },
}

struct TimedEvent {
    time: f64,
    seq: u64,
    ev: Ev,
}

impl PartialEq for TimedEvent {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}
impl Eq for TimedEvent {}
impl PartialOrd for TimedEvent {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for TimedEvent {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // BinaryHeap is a max-heap; invert for earliest-first.
        other
            .time
            .total_cmp(&self.time)
            .then(other.seq.cmp(&self.seq))
    }
}

/// Run a simulation with default engine options.
pub fn run(
    cluster: &ClusterConfig,
    tasks: &[Task],
    params: &SchedulerParams,
    seed: u64,
) -> Result<SimResult, EngineError> {
    run_with(cluster, tasks, params, seed, &SimParams::default(), None)
}

/// Run with a fixed task-to-node assignment (replay/debugging and the
/// planner-oracle tests). Decision latency and queue-level reordering are
/// disabled so execution follows the assignment order exactly.
pub fn run_pinned(
    cluster: &ClusterConfig,
    tasks: &[Task],
    params: &SchedulerParams,
    seed: u64,
    assignment: &[usize],
) -> Result<SimResult, EngineError> {
    run_with(
        cluster,
        tasks,
        params,
        seed,
        &SimParams { record_plans: true, ..Default::default() },
        Some(assignment),
    )
}

pub fn run_with(
    cluster: &ClusterConfig,
    tasks: &[Task],
    params: &SchedulerParams,
    seed: u64,
    opts: &SimParams,
    pinned: Option<&[usize]>,
) -> Result<SimResult, EngineError> {
    cluster
        .validate()
        .map_err(|e| EngineError::Contract(e.to_string()))?;
    params
        .validate()
        .map_err(|e| EngineError::Contract(e.to_string()))?;
    if let Some(assignment) = pinned {
        if assignment.len() != tasks.len() {
            return Err(EngineError::Contract(
                "pinned assignment length must match task count".into(),
            ));
        }
        if let Some(&bad) = assignment.iter().find(|&&n| n >= cluster.num_nodes()) {
            return Err(EngineError::Contract(format!(
                "pinned assignment references node {bad} out of {}",
                cluster.num_nodes()
            )));
        }
    }
    let mut sim = Simulation::new(cluster, tasks, params, seed, opts, pinned);
    sim.schedule_initial_arrivals();
    sim.event_loop()?;
    Ok(sim.finalize())
}

struct Simulation<'a> {
    cluster: &'a ClusterConfig,
    params: &'a SchedulerParams,
    opts: &'a SimParams,
    pinned: Option<Vec<usize>>,
    tasks: Vec<Task>,
    records: Vec<TaskRecord>,
    nodes: Vec<NodeState>,
    events: BinaryHeap<TimedEvent>,
    seq: u64,
    clock: f64,
    last_activity: f64,
    allocator: Allocator,
    pending: VecDeque<usize>,
    decision_in_flight: Option<usize>,
    /// Training tasks held back behind upcoming inference arrivals.
    parked: Vec<usize>,
    /// Last (task index, inference id) pairing counted as a reordering.
    last_park: BTreeMap<usize, u64>,
    /// Inference task indices in arrival order; `inf_cursor` points at the
    /// first not-yet-dispatched one.
    inference_order: Vec<usize>,
    inf_cursor: usize,
    /// Training chain: task id -> index of the task it releases.
    release_children: BTreeMap<u64, usize>,
    trainer_version: u64,
    arrivals_recent: VecDeque<f64>,
    rng: ChaCha12Rng,
    seed: u64,
    batch_counter: u64,
    decision_wall_ns: Vec<u64>,
    events_processed: u64,
    both_kinds: bool,
    training_fraction: f64,
    decode_step_start: Vec<f64>,
    workload_hash: String,
    id_index: BTreeMap<u64, usize>,
}

impl<'a> Simulation<'a> {
    fn new(
        cluster: &'a ClusterConfig,
        tasks: &'a [Task],
        params: &'a SchedulerParams,
        seed: u64,
        opts: &'a SimParams,
        pinned: Option<&[usize]>,
    ) -> Self {
        let hash = workload_hash(tasks);
        let mut tasks: Vec<Task> = tasks.to_vec();
        // Resolve SLO deadlines against node 0's cost model: arrival plus a
        // multiple of the task's full-node forward latency.
        let reference = &cluster.nodes[0];
        for t in tasks.iter_mut() {
            if t.slo_deadline.is_none() {
                let fwd = reference.node_forward_latency(t.batch_size, t.query_length);
                t.slo_deadline = Some(t.arrival_time + params.slo_multiple * fwd);
            }
        }
        let n_train = tasks.iter().filter(|t| t.is_training()).count();
        let both_kinds = n_train > 0 && n_train < tasks.len();
        let training_fraction = if tasks.is_empty() {
            0.0
        } else {
            n_train as f64 / tasks.len() as f64
        };
        let mut inference_order: Vec<usize> = (0..tasks.len())
            .filter(|&i| !tasks[i].is_training())
            .collect();
        inference_order.sort_by(|&a, &b| {
            tasks[a]
                .arrival_time
                .total_cmp(&tasks[b].arrival_time)
                .then(a.cmp(&b))
        });
        let mut release_children = BTreeMap::new();
        for (idx, t) in tasks.iter().enumerate() {
            if let Some(dep) = t.release_dep {
                release_children.insert(dep, idx);
            }
        }
        let records = tasks
            .iter()
            .map(|t| TaskRecord {
                id: t.id,
                kind: t.kind,
                node: usize::MAX,
                arrival: t.arrival_time,
                effective_arrival: f64::NAN,
                dispatched: f64::NAN,
                query_length: t.query_length,
                batch_size: t.batch_size,
                output_length: t.output_length,
                slo_deadline: t.slo_deadline.unwrap_or(f64::INFINITY),
                prefill_end: f64::NAN,
                completion: f64::NAN,
                version_at_inference: None,
                token_times: Vec::new(),
                waited: 0.0,
                offloads: 0,
                deprioritized: 0,
                batch_members: 1,
                planned_path: None,
                actual_path: None,
                planned_ii: 0.0,
                planned_response: 0.0,
            })
            .collect();
        let nodes: Vec<NodeState> = cluster.nodes.iter().cloned().map(NodeState::new).collect();
        let num_nodes = nodes.len();
        let id_index: BTreeMap<u64, usize> = tasks.iter().enumerate().map(|(i, t)| (t.id, i)).collect();
        Simulation {
            cluster,
            params,
            opts,
            pinned: pinned.map(|p| p.to_vec()),
            tasks,
            records,
            nodes,
            events: BinaryHeap::new(),
            seq: 0,
            clock: 0.0,
            last_activity: 0.0,
            allocator: Allocator::new(),
            pending: VecDeque::new(),
            decision_in_flight: None,
            parked: Vec::new(),
            last_park: BTreeMap::new(),
            inference_order,
            inf_cursor: 0,
            release_children,
            trainer_version: 0,
            arrivals_recent: VecDeque::new(),
            rng: ChaCha12Rng::seed_from_u64(seed),
            seed,
            batch_counter: 0,
            decision_wall_ns: Vec::new(),
            events_processed: 0,
            both_kinds,
            training_fraction,
            decode_step_start: vec![0.0; num_nodes],
            workload_hash: hash,
            id_index,
        }
    }

    fn record_mut(&mut self, task_id: u64) -> &mut TaskRecord {
        let idx = self.id_index[&task_id];
        &mut self.records[idx]
    }

    fn push_event(&mut self, time: f64, ev: Ev) {
        let seq = self.seq;
        self.seq += 1;
        self.events.push(TimedEvent { time, seq, ev });
    }

    fn schedule_initial_arrivals(&mut self) {
        for i in 0..self.tasks.len() {
            // Chained training tasks arrive when their predecessor's
            // first-stage forward ends; everything else at its nominal time.
            if self.tasks[i].release_dep.is_none() {
                self.push_event(self.tasks[i].arrival_time, Ev::Arrival(i));
            }
        }
    }

    fn event_budget(&self) -> u64 {
        self.opts
            .event_budget
            .unwrap_or_else(|| 2_000_000u64.max(self.tasks.len() as u64 * 20_000))
    }

    fn event_loop(&mut self) -> Result<(), EngineError> {
        let budget = self.event_budget();
        while let Some(timed) = self.events.pop() {
            self.clock = timed.time;
            self.events_processed += 1;
            if self.events_processed > budget {
                return Err(EngineError::Livelock {
                    budget,
                    diagnostic: self.diagnostic(),
                });
            }
            match timed.ev {
                Ev::Arrival(i) => self.on_arrival(i),
                Ev::DispatchDone(i) => self.on_dispatch_done(i)?,
                Ev::ForwardDone { node, stage, entry } => self.on_forward_done(node, stage, entry)?,
                Ev::BackwardDone { node, stage, entry } => {
                    self.on_backward_done(node, stage, entry)?
                }
                Ev::MemoryCheck { node, stage, token } => self.on_memory_check(node, stage, token)?,
                Ev::BatchTimer { node, token } => self.on_batch_timer(node, token)?,
                Ev::DecodeStep { node, token } => self.on_decode_step(node, token)?,
                Ev::SyncDone { version } => self.on_sync_done(version),
            }
        }
        Ok(())
    }

    fn diagnostic(&self) -> String {
        let waiting: Vec<String> = self
            .nodes
            .iter()
            .enumerate()
            .flat_map(|(n, node)| {
                node.stages.iter().enumerate().filter_map(move |(s, st)| {
                    st.waiting
                        .as_ref()
                        .map(|w| format!("node {n} stage {s} entry {}", w.unit.entry))
                })
            })
            .collect();
        format!(
            "pending dispatches: {}, parked training: {:?}, memory-waiting: [{}]",
            self.pending.len(),
            self.parked,
            waiting.join(", ")
        )
    }

    // ------------------------------------------------------------------
    // Dispatch path
    // ------------------------------------------------------------------

    fn on_arrival(&mut self, i: usize) {
        let now = self.clock;
        self.records[i].effective_arrival = now;
        self.arrivals_recent.push_back(now);
        self.last_activity = self.last_activity.max(now);
        self.pending.push_back(i);
        self.maybe_start_decision();
    }

    fn rate_estimate(&mut self) -> f64 {
        let now = self.clock;
        let window = self.params.rate_window.max(1e-9);
        while let Some(&front) = self.arrivals_recent.front() {
            if front < now - window {
                self.arrivals_recent.pop_front();
            } else {
                break;
            }
        }
        self.arrivals_recent.len() as f64 / window
    }

    /// Pop dispatchable work and start the next allocation decision. A
    /// training task at the head is parked behind the next undispatched
    /// inference task whenever its dispatch would break that task's SLO.
    fn maybe_start_decision(&mut self) {
        if self.decision_in_flight.is_some() {
            return;
        }
        let now = self.clock;
        while let Some(&i) = self.pending.front() {
            let deprioritize_applies = self.pinned.is_none()
                && self.params.policy == Policy::LeMix
                && self.params.deprioritize
                && self.tasks[i].is_training();
            if deprioritize_applies {
                if let Some(&next_inf_idx) = self.inference_order.get(self.inf_cursor) {
                    let next = &self.tasks[next_inf_idx];
                    let next_id = next.id;
                    let tau_r = next.slo_deadline.unwrap_or(f64::INFINITY) - next.arrival_time;
                    let park = {
                        let views = node_views(&self.nodes, now, self.params.rate_window);
                        should_deprioritize(
                            Some((next.batch_size, next.query_length, next.arrival_time)),
                            &views,
                            tau_r,
                        )
                    };
                    if park {
                        self.pending.pop_front();
                        // One reordering per task per inference arrival.
                        if self.last_park.get(&i) != Some(&next_id) {
                            self.records[i].deprioritized += 1;
                            self.last_park.insert(i, next_id);
                        }
                        self.parked.push(i);
                        continue;
                    }
                }
            }
            self.pending.pop_front();
            self.decision_in_flight = Some(i);
            let latency = if self.pinned.is_some() {
                0.0
            } else {
                self.params.decision_latency()
            };
            self.push_event(now + latency, Ev::DispatchDone(i));
            return;
        }
    }

    /// Give parked training tasks another dispatch attempt, preserving
    /// their original order ahead of later arrivals.
    fn retry_parked(&mut self) {
        if self.parked.is_empty() {
            return;
        }
        for &i in self.parked.iter().rev() {
            self.pending.push_front(i);
        }
        self.parked.clear();
        self.maybe_start_decision();
    }

    fn on_dispatch_done(&mut self, i: usize) -> Result<(), EngineError> {
        debug_assert_eq!(self.decision_in_flight, Some(i));
        self.decision_in_flight = None;
        let now = self.clock;
        self.last_activity = self.last_activity.max(now);

        let node_id = if let Some(assign) = &self.pinned {
            assign[i]
        } else {
            let rate = self.rate_estimate();
            let task = &self.tasks[i];
            let cand = Candidate {
                queue_time: now,
                length: task.query_length,
                batch: task.batch_size,
            };
            let started = Instant::now();
            let decision = {
                let views = node_views(&self.nodes, now, self.params.rate_window);
                self.allocator.allocate(
                    self.params,
                    task.kind,
                    cand,
                    &views,
                    self.training_fraction,
                    rate,
                    self.both_kinds,
                )?
            };
            self.decision_wall_ns.push(started.elapsed().as_nanos() as u64);
            decision.node_id
        };

        self.records[i].dispatched = now;
        self.records[i].node = node_id;

        let task = self.tasks[i].clone();
        self.commit_task(node_id, &task)?;

        if !task.is_training() {
            // Inference dispatches in arrival order, so this is exactly the
            // cursor task; parked training gets one new attempt behind it.
            if self.inference_order.get(self.inf_cursor) == Some(&i) {
                self.inf_cursor += 1;
            }
            self.retry_parked();
        }
        self.maybe_start_decision();
        Ok(())
    }

    // ------------------------------------------------------------------
    // Node commit: batching and planning
    // ------------------------------------------------------------------

    fn commit_task(&mut self, node_id: usize, task: &Task) -> Result<(), EngineError> {
        let now = self.clock;
        let shape = MemberShape {
            task: task.id,
            batch: task.batch_size,
            length: task.query_length,
            output_length: task.output_length,
        };
        self.nodes[node_id].history.push(task.query_length, now);
        self.nodes[node_id].assigned_tasks += 1;
        self.nodes[node_id].note_event(now);

        if task.is_training() {
            // A training task can never join an inference batch; whatever is
            // forming executes first.
            self.flush_forming(node_id)?;
            self.make_entry_at(node_id, task.id, TaskKind::Training, vec![shape], now)?;
            return Ok(());
        }

        if self.params.max_batch <= 1 {
            self.make_entry_at(node_id, task.id, TaskKind::Inference, vec![shape], now)?;
            return Ok(());
        }

        let node = &mut self.nodes[node_id];
        match node.forming.as_mut() {
            None => {
                let profile = node.profile(0);
                let t_w = self.params.batch_wait_factor
                    * forward_latency(profile, shape.batch, shape.length);
                node.batch_token += 1;
                let token = node.batch_token;
                node.forming = Some(FormingBatch {
                    members: vec![shape],
                    member_queue_times: vec![now],
                    token,
                });
                self.push_event(now + t_w, Ev::BatchTimer { node: node_id, token });
            }
            Some(forming) => {
                forming.members.push(shape);
                forming.member_queue_times.push(now);
            }
        }
        let full = self.nodes[node_id]
            .forming
            .as_ref()
            .map(|f| f.members.len() >= self.params.max_batch as usize)
            .unwrap_or(false);
        if full {
            self.flush_forming(node_id)?;
        }
        Ok(())
    }

    fn on_batch_timer(&mut self, node_id: usize, token: u64) -> Result<(), EngineError> {
        let live = self.nodes[node_id]
            .forming
            .as_ref()
            .map(|f| f.token == token)
            .unwrap_or(false);
        if live {
            self.last_activity = self.last_activity.max(self.clock);
            self.flush_forming(node_id)?;
        }
        Ok(())
    }

    fn flush_forming(&mut self, node_id: usize) -> Result<(), EngineError> {
        let Some(forming) = self.nodes[node_id].forming.take() else {
            return Ok(());
        };
        let entry_id = if forming.members.len() == 1 {
            forming.members[0].task
        } else {
            self.batch_counter += 1;
            BATCH_ID_BASE + self.batch_counter
        };
        let queue_time = forming.member_queue_times[0];
        self.make_entry_at(
            node_id,
            entry_id,
            TaskKind::Inference,
            forming.members,
            queue_time,
        )
    }

    /// Plan an execution entry on a node and insert its stage units.
    fn make_entry_at(
        &mut self,
        node_id: usize,
        entry_id: u64,
        kind: TaskKind,
        members: Vec<MemberShape>,
        queue_time: f64,
    ) -> Result<(), EngineError> {
        let stages = self.nodes[node_id].cfg.num_stages();
        let batch_total: u32 = members.iter().map(|m| m.batch).sum();
        let padded_len: u32 = members.iter().map(|m| m.length).max().unwrap_or(1);

        // A task whose own demand can never fit under the threshold is
        // rejected at admission.
        for s in 0..stages {
            let profile = self.nodes[node_id].profile(s);
            let act = profile.mem_act_coeff * batch_total as f64 * padded_len as f64;
            let kv: f64 = members
                .iter()
                .filter(|m| m.output_length > 0)
                .map(|m| profile.mem_kv_coeff * m.batch as f64 * m.length as f64)
                .sum();
            let threshold = self.nodes[node_id].threshold(s);
            if profile.mem_weights as f64 + act + kv > threshold {
                return Err(EngineError::InfeasibleTask {
                    task: members[0].task,
                    node: node_id,
                    stage: s,
                    demand_bytes: (act + kv) as u64,
                    threshold_bytes: threshold as u64,
                });
            }
        }

        let cand = Candidate { queue_time, length: padded_len, batch: batch_total };
        let (plan, path) = {
            let node = &mut self.nodes[node_id];
            let plan = compute_idleness(&node.queues, &node.cfg, cand);
            for id in &plan.completed_training {
                node.queues.remove_train(*id);
            }
            let path = if kind == TaskKind::Training {
                plan_backward(&node.queues, &node.cfg, kind, cand, &plan.path)?
            } else {
                plan.path.clone()
            };
            (plan, path)
        };

        let plan_ii = plan.ii;
        let plan_r = plan.response_time;
        let n_members = members.len();
        let record_plans = self.opts.record_plans;
        let member_ids: Vec<u64> = members.iter().map(|m| m.task).collect();
        for id in &member_ids {
            let path_copy = if record_plans { Some(path.clone()) } else { None };
            let rec = self.record_mut(*id);
            rec.planned_ii = plan_ii;
            rec.planned_response = plan_r;
            rec.batch_members = n_members;
            rec.planned_path = path_copy;
        }

        let _ = plan;
        self.nodes[node_id].queues.enqueue(PlannedEntry {
            id: entry_id,
            kind,
            queue_time,
            length: padded_len,
            batch: batch_total,
            path: path.clone(),
            members: member_ids,
        });
        self.nodes[node_id].entries.insert(
            entry_id,
            EntryExec {
                id: entry_id,
                kind,
                members,
                batch_total,
                padded_len,
                fwd_actual: vec![None; stages],
                bwd_actual: vec![None; stages],
                waited: 0.0,
                offload_events: 0,
            },
        );

        for s in 0..stages {
            let seq = self.seq;
            self.seq += 1;
            self.nodes[node_id].stages[s].insert_unit(Unit {
                entry: entry_id,
                kind: UnitKind::Forward,
                planned_start: path.forward[s].0,
                seq,
            });
        }
        if let Some(bwd) = &path.backward {
            for s in 0..stages {
                let seq = self.seq;
                self.seq += 1;
                self.nodes[node_id].stages[s].insert_unit(Unit {
                    entry: entry_id,
                    kind: UnitKind::Backward,
                    planned_start: bwd[s].0,
                    seq,
                });
            }
        }
        for s in 0..stages {
            self.try_start(node_id, s);
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Stage execution
    // ------------------------------------------------------------------

    fn unit_dep_ready(&self, node_id: usize, unit: &Unit, stage: usize) -> bool {
        let entry = &self.nodes[node_id].entries[&unit.entry];
        match unit.kind {
            UnitKind::Forward => stage == 0 || entry.fwd_actual[stage - 1].is_some(),
            UnitKind::Backward => {
                let stages = entry.fwd_actual.len();
                if stage + 1 == stages {
                    entry.fwd_actual[stages - 1].is_some()
                } else {
                    entry.bwd_actual[stage + 1].is_some()
                }
            }
        }
    }

    fn try_start(&mut self, node_id: usize, stage: usize) {
        let now = self.clock;
        {
            let st = &self.nodes[node_id].stages[stage];
            if st.running.is_some() || st.waiting.is_some() {
                return;
            }
        }
        let Some(&unit) = self.nodes[node_id].stages[stage].pending.front() else {
            return;
        };
        if !self.unit_dep_ready(node_id, &unit, stage) {
            return;
        }
        self.nodes[node_id].stages[stage].pending.pop_front();

        let entry = self.nodes[node_id].entries[&unit.entry].clone();
        let demand = self.nodes[node_id].admission_demand(&entry, unit.kind, stage);
        let threshold = self.nodes[node_id].threshold(stage);

        if !self.params.memory_aware {
            if !self.nodes[node_id].memory_available(stage, demand, threshold) {
                self.nodes[node_id].stages[stage].violations += 1;
            }
            self.admit(node_id, stage, unit, now);
            return;
        }
        if self.nodes[node_id].memory_available(stage, demand, threshold) {
            self.admit(node_id, stage, unit, now);
            return;
        }
        // Wait-or-drop: hold the unit and re-check every delta_t.
        let st = &mut self.nodes[node_id].stages[stage];
        st.check_token += 1;
        let token = st.check_token;
        st.waiting = Some(WaitingUnit { unit, waited: 0.0, token });
        let delta_t = self.nodes[node_id].cfg.delta_t;
        self.push_event(now + delta_t, Ev::MemoryCheck { node: node_id, stage, token });
    }

    fn on_memory_check(
        &mut self,
        node_id: usize,
        stage: usize,
        token: u64,
    ) -> Result<(), EngineError> {
        let now = self.clock;
        let Some(mut waiting) = self.nodes[node_id].stages[stage].waiting.take() else {
            return Ok(());
        };
        if waiting.token != token {
            self.nodes[node_id].stages[stage].waiting = Some(waiting);
            return Ok(());
        }
        let delta_t = self.nodes[node_id].cfg.delta_t;
        let t_max = self.nodes[node_id].cfg.t_max;
        waiting.waited += delta_t;
        if let Some(entry) = self.nodes[node_id].entries.get_mut(&waiting.unit.entry) {
            entry.waited += delta_t;
        }
        self.records_for_entry(node_id, waiting.unit.entry, |rec| rec.waited += delta_t);
        self.last_activity = self.last_activity.max(now);

        let entry = self.nodes[node_id].entries[&waiting.unit.entry].clone();
        let mut demand = self.nodes[node_id].admission_demand(&entry, waiting.unit.kind, stage);
        let threshold = self.nodes[node_id].threshold(stage);

        if waiting.waited >= t_max {
            match waiting.unit.kind {
                UnitKind::Forward => {
                    // Past the wait budget: move this task's resident bytes
                    // (earlier-stage activations, prefill KV) to host memory
                    // and keep re-checking; it pays the round trip when the
                    // bytes come back.
                    let moved = self.nodes[node_id].offload_entry(waiting.unit.entry);
                    if moved > 0.0 {
                        if let Some(e) = self.nodes[node_id].entries.get_mut(&waiting.unit.entry) {
                            e.offload_events += 1;
                        }
                        self.records_for_entry(node_id, waiting.unit.entry, |rec| {
                            rec.offloads += 1
                        });
                        demand =
                            self.nodes[node_id].admission_demand(&entry, waiting.unit.kind, stage);
                    }
                }
                UnitKind::Backward => {
                    // Backwards free memory when they finish; after the wait
                    // budget they may run up to device capacity so the node
                    // always drains.
                    let capacity = self.nodes[node_id].profile(stage).mem_capacity as f64;
                    if self.nodes[node_id].memory_available(stage, demand, capacity) {
                        self.admit(node_id, stage, waiting.unit, now);
                        return Ok(());
                    }
                }
            }
        }
        if self.nodes[node_id].memory_available(stage, demand, threshold) {
            self.admit(node_id, stage, waiting.unit, now);
        } else {
            let token = waiting.token;
            self.nodes[node_id].stages[stage].waiting = Some(waiting);
            self.push_event(now + delta_t, Ev::MemoryCheck { node: node_id, stage, token });
        }
        Ok(())
    }

    /// Begin executing a unit: restore offloaded bytes, claim memory, apply
    /// optional latency noise, and schedule the completion event.
    fn admit(&mut self, node_id: usize, stage: usize, unit: Unit, now: f64) {
        let entry = self.nodes[node_id].entries[&unit.entry].clone();
        let weights = self.nodes[node_id].profile(stage).mem_weights as f64;

        let mut restored = 0.0;
        {
            let st = &mut self.nodes[node_id].stages[stage];
            restored += st.restore_owner(unit.entry, weights);
            for m in &entry.members {
                restored += st.restore_owner(m.task, weights);
            }
        }
        let penalty = if restored > 0.0 {
            self.nodes[node_id].round_trip_penalty(restored)
        } else {
            0.0
        };

        let profile = self.nodes[node_id].profile(stage).clone();
        let base = match unit.kind {
            UnitKind::Forward => forward_latency(&profile, entry.batch_total, entry.padded_len),
            UnitKind::Backward => backward_latency(&profile, entry.batch_total, entry.padded_len),
        };
        let noise = if self.params.latency_noise > 0.0 {
            1.0 + self.params.latency_noise * (2.0 * self.rng.gen::<f64>() - 1.0)
        } else {
            1.0
        };
        let duration = base * noise + penalty;

        if unit.kind == UnitKind::Forward {
            let act = profile.mem_act_coeff * entry.batch_total as f64 * entry.padded_len as f64;
            self.nodes[node_id].stages[stage].claim(unit.entry, act, 0.0, weights);
            for m in entry.members.iter().filter(|m| m.output_length > 0) {
                let kv = profile.mem_kv_coeff * m.batch as f64 * m.length as f64;
                self.nodes[node_id].stages[stage].claim(m.task, 0.0, kv, weights);
            }
            if stage == 0 && entry.kind == TaskKind::Inference {
                let version = self.nodes[node_id].version;
                self.records_for_entry(node_id, unit.entry, |rec| {
                    rec.version_at_inference = Some(version)
                });
            }
        }

        let end = now + duration;
        self.nodes[node_id].stages[stage].running = Some(RunningUnit { unit, start: now, end });
        self.nodes[node_id].note_event(now);
        self.last_activity = self.last_activity.max(end);
        match unit.kind {
            UnitKind::Forward => {
                self.push_event(end, Ev::ForwardDone { node: node_id, stage, entry: unit.entry })
            }
            UnitKind::Backward => {
                self.push_event(end, Ev::BackwardDone { node: node_id, stage, entry: unit.entry })
            }
        }
    }

    fn records_for_entry(&mut self, node_id: usize, entry_id: u64, mut f: impl FnMut(&mut TaskRecord)) {
        let members: Vec<u64> = self.nodes[node_id]
            .entries
            .get(&entry_id)
            .map(|e| e.members.iter().map(|m| m.task).collect())
            .unwrap_or_default();
        for id in members {
            f(self.record_mut(id));
        }
    }

    fn on_forward_done(
        &mut self,
        node_id: usize,
        stage: usize,
        entry_id: u64,
    ) -> Result<(), EngineError> {
        let now = self.clock;
        let run = self.nodes[node_id].stages[stage]
            .running
            .take()
            .expect("forward-done without running unit");
        debug_assert_eq!(run.unit.entry, entry_id);
        self.nodes[node_id].stages[stage]
            .intervals
            .push((run.start, run.end, IntervalKind::Forward));
        self.nodes[node_id].note_event(now);
        self.last_activity = self.last_activity.max(now);

        let stages = self.nodes[node_id].cfg.num_stages();
        let kind;
        {
            let entry = self.nodes[node_id].entries.get_mut(&entry_id).unwrap();
            entry.fwd_actual[stage] = Some((run.start, run.end));
            kind = entry.kind;
        }
        // Inference activations live only for the duration of the stage.
        if kind == TaskKind::Inference {
            self.nodes[node_id].stages[stage].release_act(entry_id);
        }
        // Entries flagged planned-complete were already dropped from the
        // trace queues; their actual completions need no calibration.
        if self.nodes[node_id].queues.get(entry_id).is_some() {
            calibrate(
                &mut self.nodes[node_id].queues,
                entry_id,
                stage,
                run.start,
                run.end,
                CalibrateOp::Forward,
            )?;
        }

        if stage == 0 && kind == TaskKind::Training {
            // First-stage forward end releases the next chained training task.
            if let Some(&next) = self.release_children.get(&entry_id) {
                let at = now.max(self.tasks[next].arrival_time);
                self.push_event(at, Ev::Arrival(next));
            }
        }

        if stage + 1 < stages {
            self.try_start(node_id, stage + 1);
        } else {
            // Final stage: prefill response complete.
            self.records_for_entry(node_id, entry_id, |rec| rec.prefill_end = run.end);
            if kind == TaskKind::Inference {
                let entry = self.nodes[node_id].entries[&entry_id].clone();
                for m in &entry.members {
                    self.finish_member_actual(node_id, entry_id, m.task);
                    if m.output_length > 0 {
                        self.nodes[node_id].decode.members.push(DecodeMember {
                            task: m.task,
                            batch: m.batch,
                            context: m.length,
                            remaining: m.output_length,
                            offloaded: false,
                        });
                    } else {
                        self.record_mut(m.task).completion = run.end;
                    }
                }
                self.nodes[node_id].entries.remove(&entry_id);
                if entry.is_generative() {
                    self.maybe_start_decode(node_id);
                }
            }
            self.retry_parked();
        }
        self.try_start(node_id, stage);
        Ok(())
    }

    fn on_backward_done(
        &mut self,
        node_id: usize,
        stage: usize,
        entry_id: u64,
    ) -> Result<(), EngineError> {
        let now = self.clock;
        let run = self.nodes[node_id].stages[stage]
            .running
            .take()
            .expect("backward-done without running unit");
        self.nodes[node_id].stages[stage]
            .intervals
            .push((run.start, run.end, IntervalKind::Backward));
        self.nodes[node_id].note_event(now);
        self.last_activity = self.last_activity.max(now);

        {
            let entry = self.nodes[node_id].entries.get_mut(&entry_id).unwrap();
            entry.bwd_actual[stage] = Some((run.start, run.end));
        }
        // Training activations for this stage are consumed by its backward.
        self.nodes[node_id].stages[stage].release_act(entry_id);
        if self.nodes[node_id].queues.get(entry_id).is_some() {
            calibrate(
                &mut self.nodes[node_id].queues,
                entry_id,
                stage,
                run.start,
                run.end,
                CalibrateOp::Backward,
            )?;
        }

        if stage > 0 {
            self.try_start(node_id, stage - 1);
        } else {
            // Whole training step complete.
            self.records_for_entry(node_id, entry_id, |rec| rec.completion = run.end);
            self.finish_member_actual(node_id, entry_id, entry_id);
            self.apply_model_update(node_id);
            self.nodes[node_id].entries.remove(&entry_id);
            self.retry_parked();
        }
        self.try_start(node_id, stage);
        Ok(())
    }

    /// Copy the entry's realized path into a member's record.
    fn finish_member_actual(&mut self, node_id: usize, entry_id: u64, member: u64) {
        let Some(entry) = self.nodes[node_id].entries.get(&entry_id) else {
            return;
        };
        let forward: Vec<(f64, f64)> = entry
            .fwd_actual
            .iter()
            .map(|o| o.expect("forward complete"))
            .collect();
        let backward = if entry.kind == TaskKind::Training {
            Some(entry.bwd_actual.iter().map(|o| o.expect("backward complete")).collect())
        } else {
            None
        };
        self.record_mut(member).actual_path = Some(crate::planner::ExecPath { forward, backward });
    }

    // ------------------------------------------------------------------
    // Model versions
    // ------------------------------------------------------------------

    fn apply_model_update(&mut self, node_id: usize) {
        let separate = matches!(self.params.policy, Policy::Separate | Policy::SeparateDynamic)
            && self.pinned.is_none();
        if separate {
            self.trainer_version += 1;
            self.nodes[node_id].version = self.trainer_version;
            if self.trainer_version % self.cluster.sync_interval == 0 {
                let latency = self
                    .cluster
                    .sync_latency(self.cluster.model_bytes, self.cluster.num_nodes());
                let version = self.trainer_version;
                self.push_event(self.clock + latency, Ev::SyncDone { version });
            }
        } else {
            // Co-located: the node's local model instance updates in place.
            self.nodes[node_id].version += 1;
        }
    }

    fn on_sync_done(&mut self, version: u64) {
        self.last_activity = self.last_activity.max(self.clock);
        for node in self.nodes.iter_mut() {
            node.version = node.version.max(version);
        }
    }

    // ------------------------------------------------------------------
    // Decode pool
    // ------------------------------------------------------------------

    fn maybe_start_decode(&mut self, node_id: usize) {
        if self.nodes[node_id].decode.stepping || self.nodes[node_id].decode.members.is_empty() {
            return;
        }
        let now = self.clock;
        let stages = self.nodes[node_id].cfg.num_stages();
        let mut penalty = 0.0;

        if self.params.memory_aware {
            // KV growth for this step must fit under device capacity on
            // every stage; offload the largest resident KV holders until it
            // does. Offloaded members keep decoding from host memory.
            loop {
                let growth_per_member: Vec<(usize, f64)> = self.nodes[node_id]
                    .decode
                    .members
                    .iter()
                    .enumerate()
                    .filter(|(_, m)| !m.offloaded)
                    .map(|(i, m)| (i, m.batch as f64))
                    .collect();
                let mut fits = true;
                for s in 0..stages {
                    let profile = self.nodes[node_id].profile(s);
                    let growth: f64 = growth_per_member
                        .iter()
                        .map(|(_, b)| profile.mem_kv_coeff * b)
                        .sum();
                    let capacity = profile.mem_capacity as f64;
                    if !self.nodes[node_id].memory_available(s, growth, capacity) {
                        fits = false;
                        break;
                    }
                }
                if fits {
                    break;
                }
                // Evict the member holding the most KV on stage 0.
                let victim = {
                    let node = &self.nodes[node_id];
                    node.decode
                        .members
                        .iter()
                        .enumerate()
                        .filter(|(_, m)| !m.offloaded)
                        .max_by(|a, b| {
                            let ka = node.stages[0]
                                .owners
                                .get(&a.1.task)
                                .map(|o| o.kv)
                                .unwrap_or(0.0);
                            let kb = node.stages[0]
                                .owners
                                .get(&b.1.task)
                                .map(|o| o.kv)
                                .unwrap_or(0.0);
                            ka.total_cmp(&kb).then(b.0.cmp(&a.0))
                        })
                        .map(|(i, _)| i)
                };
                let Some(victim) = victim else { break };
                let task_id = self.nodes[node_id].decode.members[victim].task;
                let mut moved = 0.0;
                for s in 0..stages {
                    moved += self.nodes[node_id].stages[s].offload_owner(task_id);
                }
                self.nodes[node_id].decode.members[victim].offloaded = true;
                penalty += self.nodes[node_id].cfg.offload_penalty * moved / GB;
                self.record_mut(task_id).offloads += 1;
            }
        }

        // Claim this step's KV growth.
        for s in 0..stages {
            let profile = self.nodes[node_id].profile(s).clone();
            let weights = profile.mem_weights as f64;
            let grow: Vec<(u64, f64)> = self.nodes[node_id]
                .decode
                .members
                .iter()
                .filter(|m| !m.offloaded)
                .map(|m| (m.task, profile.mem_kv_coeff * m.batch as f64))
                .collect();
            for (owner, kv) in grow {
                self.nodes[node_id].stages[s].claim(owner, 0.0, kv, weights);
            }
        }

        let node = &mut self.nodes[node_id];
        let total_batch: u32 = node.decode.members.iter().map(|m| m.batch).sum();
        let max_ctx: u32 = node.decode.members.iter().map(|m| m.context).max().unwrap_or(1);
        // The step follows the widest member across the slowest stage.
        let slowest = node
            .cfg
            .stages
            .iter()
            .max_by(|a, b| a.eta_d.total_cmp(&b.eta_d))
            .expect("validated");
        let latency = decode_step_latency(slowest, total_batch, max_ctx) + penalty;
        node.decode.stepping = true;
        node.decode.active_in_step = node.decode.members.iter().map(|m| m.task).collect();
        node.decode.token += 1;
        let token = node.decode.token;
        self.decode_step_start[node_id] = now;
        self.last_activity = self.last_activity.max(now + latency);
        self.push_event(now + latency, Ev::DecodeStep { node: node_id, token });
    }

    fn on_decode_step(&mut self, node_id: usize, token: u64) -> Result<(), EngineError> {
        if self.nodes[node_id].decode.token != token {
            return Ok(());
        }
        let now = self.clock;
        let start = self.decode_step_start[node_id];
        let stages = self.nodes[node_id].cfg.num_stages();
        for s in 0..stages {
            self.nodes[node_id].stages[s]
                .intervals
                .push((start, now, IntervalKind::Decode));
        }
        self.nodes[node_id].note_event(now);
        self.last_activity = self.last_activity.max(now);

        let active = self.nodes[node_id].decode.active_in_step.clone();
        let mut finished: Vec<u64> = Vec::new();
        for task_id in &active {
            let mut advanced = false;
            {
                let node = &mut self.nodes[node_id];
                if let Some(m) = node.decode.members.iter_mut().find(|m| m.task == *task_id) {
                    m.context += 1;
                    m.remaining -= 1;
                    advanced = true;
                    if m.remaining == 0 {
                        finished.push(*task_id);
                    }
                }
            }
            if advanced {
                self.record_mut(*task_id).token_times.push(now);
            }
        }
        for task_id in finished {
            for s in 0..stages {
                self.nodes[node_id].stages[s].release_kv(task_id);
            }
            self.nodes[node_id].decode.members.retain(|m| m.task != task_id);
            self.record_mut(task_id).completion = now;
        }
        self.nodes[node_id].decode.stepping = false;
        self.maybe_start_decode(node_id);
        Ok(())
    }

    // ------------------------------------------------------------------
    // Finalization
    // ------------------------------------------------------------------

    fn finalize(mut self) -> SimResult {
        let horizon = self.last_activity;
        let mut gpus = Vec::new();
        for (n, node) in self.nodes.iter_mut().enumerate() {
            for (s, stage) in node.stages.iter_mut().enumerate() {
                let busy = merged_busy(&mut stage.intervals);
                gpus.push(GpuLedger {
                    node: n,
                    stage: s,
                    busy_s: busy,
                    idle_s: horizon - busy,
                    peak_mem_bytes: (node.cfg.stages[s].mem_weights as f64)
                        .max(stage.peak_resident) as u64,
                    mem_capacity_bytes: node.cfg.stages[s].mem_capacity,
                    offloads: stage.offloads,
                    intervals: stage.intervals.clone(),
                });
            }
        }
        let threshold_violations = self
            .nodes
            .iter()
            .flat_map(|n| n.stages.iter())
            .map(|s| s.violations)
            .sum();
        SimResult {
            policy: self.params.policy.name().to_string(),
            seed: self.seed,
            workload_hash: self.workload_hash.clone(),
            tasks: self.records,
            gpus,
            horizon,
            events_processed: self.events_processed,
            threshold_violations,
            decision_wall_ns: self.decision_wall_ns,
        }
    }
}

fn node_views<'n>(nodes: &'n [NodeState], now: f64, window: f64) -> Vec<NodeView<'n>> {
    nodes
        .iter()
        .map(|n| NodeView {
            config: &n.cfg,
            queues: &n.queues,
            history: &n.history,
            utilization: n.utilization(now, window),
        })
        .collect()
}

/// Total measure of the union of (possibly overlapping) intervals.
fn merged_busy(intervals: &mut Vec<(f64, f64, IntervalKind)>) -> f64 {
    intervals.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut busy = 0.0;
    let mut cursor = f64::NEG_INFINITY;
    for &(start, end, _) in intervals.iter() {
        let s = start.max(cursor);
        if end > s {
            busy += end - s;
            cursor = end;
        }
    }
    busy
}
