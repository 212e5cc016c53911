//! Per-node runtime state: stage execution queues, the stage-level memory
//! model behind the wait-or-drop policy, continuous-batch formation, and the
//! node's decode pool.

use super::result::IntervalKind;
use crate::allocator::NodeHistory;
use crate::cluster::{memory_threshold, NodeConfig, StageProfile, GB};
use crate::planner::TraceQueues;
use crate::workload::TaskKind;
use std::collections::{BTreeMap, VecDeque};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum UnitKind {
    Forward,
    Backward,
}

/// One schedulable execution on a stage: a forward or backward pass of an
/// entry. Stage queues are ordered by planned start (ties broken by
/// insertion sequence), which realizes the planner's gap-filling decisions.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Unit {
    pub entry: u64,
    pub kind: UnitKind,
    pub planned_start: f64,
    pub seq: u64,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct RunningUnit {
    pub unit: Unit,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct WaitingUnit {
    pub unit: Unit,
    pub waited: f64,
    pub token: u64,
}

/// Resident bytes one owner (entry for activations, member task for KV)
/// holds on a stage, plus bytes currently offloaded to host memory.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct OwnerMem {
    pub act: f64,
    pub kv: f64,
    pub act_off: f64,
    pub kv_off: f64,
}

#[derive(Debug, Default)]
pub(crate) struct StageState {
    pub pending: VecDeque<Unit>,
    pub running: Option<RunningUnit>,
    pub waiting: Option<WaitingUnit>,
    pub intervals: Vec<(f64, f64, IntervalKind)>,
    /// Bytes above the static weight shard.
    pub resident: f64,
    pub peak_resident: f64,
    pub owners: BTreeMap<u64, OwnerMem>,
    pub offloads: u64,
    pub violations: u64,
    pub check_token: u64,
}

impl StageState {
    pub fn claim(&mut self, owner: u64, act: f64, kv: f64, weights: f64) {
        let slot = self.owners.entry(owner).or_default();
        slot.act += act;
        slot.kv += kv;
        self.resident += act + kv;
        self.peak_resident = self.peak_resident.max(weights + self.resident);
    }

    pub fn release_act(&mut self, owner: u64) {
        if let Some(slot) = self.owners.get_mut(&owner) {
            self.resident -= slot.act;
            slot.act = 0.0;
            if slot.kv == 0.0 && slot.act_off == 0.0 && slot.kv_off == 0.0 {
                self.owners.remove(&owner);
            }
        }
    }

    pub fn release_kv(&mut self, owner: u64) {
        if let Some(slot) = self.owners.get_mut(&owner) {
            self.resident -= slot.kv;
            slot.kv = 0.0;
            slot.kv_off = 0.0;
            if slot.act == 0.0 && slot.act_off == 0.0 {
                self.owners.remove(&owner);
            }
        }
    }

    /// Move an owner's resident bytes to host memory; returns bytes moved.
    pub fn offload_owner(&mut self, owner: u64) -> f64 {
        let Some(slot) = self.owners.get_mut(&owner) else {
            return 0.0;
        };
        let moved = slot.act + slot.kv;
        if moved > 0.0 {
            slot.act_off += slot.act;
            slot.kv_off += slot.kv;
            self.resident -= moved;
            slot.act = 0.0;
            slot.kv = 0.0;
            self.offloads += 1;
        }
        moved
    }

    /// Bring an owner's offloaded bytes back; returns bytes restored.
    pub fn restore_owner(&mut self, owner: u64, weights: f64) -> f64 {
        let Some(slot) = self.owners.get_mut(&owner) else {
            return 0.0;
        };
        let restored = slot.act_off + slot.kv_off;
        if restored > 0.0 {
            slot.act += slot.act_off;
            slot.kv += slot.kv_off;
            slot.act_off = 0.0;
            slot.kv_off = 0.0;
            self.resident += restored;
            self.peak_resident = self.peak_resident.max(weights + self.resident);
        }
        restored
    }

    pub fn offloaded_bytes(&self, owner: u64) -> f64 {
        self.owners
            .get(&owner)
            .map(|s| s.act_off + s.kv_off)
            .unwrap_or(0.0)
    }

    /// Insert a unit keeping the queue sorted by (planned_start, seq).
    pub fn insert_unit(&mut self, unit: Unit) {
        let pos = self
            .pending
            .iter()
            .position(|u| {
                u.planned_start > unit.planned_start
                    || (u.planned_start == unit.planned_start && u.seq > unit.seq)
            })
            .unwrap_or(self.pending.len());
        self.pending.insert(pos, unit);
    }
}

/// Identity and shape of one request inside an execution entry.
#[derive(Debug, Clone, Copy)]
pub(crate) struct MemberShape {
    pub task: u64,
    pub batch: u32,
    pub length: u32,
    pub output_length: u32,
}

/// Execution progress of one entry (a task, or several inference requests
/// merged into a continuous batch).
#[derive(Debug, Clone)]
pub(crate) struct EntryExec {
    pub id: u64,
    pub kind: TaskKind,
    pub members: Vec<MemberShape>,
    /// Total sequences across members.
    pub batch_total: u32,
    /// Member lengths padded to the batch maximum.
    pub padded_len: u32,
    pub fwd_actual: Vec<Option<(f64, f64)>>,
    pub bwd_actual: Vec<Option<(f64, f64)>>,
    pub waited: f64,
    pub offload_events: u32,
}

impl EntryExec {
    pub fn is_generative(&self) -> bool {
        self.kind == TaskKind::Inference && self.members.iter().any(|m| m.output_length > 0)
    }
}

/// Inference requests accumulating into the next continuous batch.
#[derive(Debug, Clone)]
pub(crate) struct FormingBatch {
    pub members: Vec<MemberShape>,
    pub member_queue_times: Vec<f64>,
    pub token: u64,
}

/// One request decoding autoregressively on this node.
#[derive(Debug, Clone)]
pub(crate) struct DecodeMember {
    pub task: u64,
    pub batch: u32,
    pub context: u32,
    pub remaining: u32,
    pub offloaded: bool,
}

/// Node-wide hybrid decode pool: all generative requests prefilled on this
/// node advance one token per step; the step cost follows the widest member.
#[derive(Debug, Default)]
pub(crate) struct DecodePool {
    pub members: Vec<DecodeMember>,
    pub stepping: bool,
    pub active_in_step: Vec<u64>,
    pub token: u64,
}

#[derive(Debug)]
pub(crate) struct NodeState {
    pub cfg: NodeConfig,
    pub queues: TraceQueues,
    pub history: NodeHistory,
    pub stages: Vec<StageState>,
    pub entries: BTreeMap<u64, EntryExec>,
    pub forming: Option<FormingBatch>,
    pub batch_token: u64,
    pub decode: DecodePool,
    pub version: u64,
    pub assigned_tasks: u64,
    pub first_event: Option<f64>,
    pub last_event: Option<f64>,
}

impl NodeState {
    pub fn new(cfg: NodeConfig) -> Self {
        let stages = (0..cfg.num_stages()).map(|_| StageState::default()).collect();
        NodeState {
            cfg,
            queues: TraceQueues::new(),
            history: NodeHistory::default(),
            stages,
            entries: BTreeMap::new(),
            forming: None,
            batch_token: 0,
            decode: DecodePool::default(),
            version: 0,
            assigned_tasks: 0,
            first_event: None,
            last_event: None,
        }
    }

    pub fn profile(&self, stage: usize) -> &StageProfile {
        &self.cfg.stages[stage]
    }

    pub fn threshold(&self, stage: usize) -> f64 {
        memory_threshold(&self.cfg, stage) as f64
    }

    pub fn note_event(&mut self, t: f64) {
        if self.first_event.is_none() {
            self.first_event = Some(t);
        }
        self.last_event = Some(self.last_event.map_or(t, |l: f64| l.max(t)));
    }

    /// New bytes a unit must bring on-device to execute on `stage`:
    /// activations plus prefill KV for forwards, plus whatever this entry
    /// had offloaded from the stage.
    pub fn admission_demand(&self, entry: &EntryExec, kind: UnitKind, stage: usize) -> f64 {
        let profile = self.profile(stage);
        let stage_state = &self.stages[stage];
        match kind {
            UnitKind::Forward => {
                let act =
                    profile.mem_act_coeff * entry.batch_total as f64 * entry.padded_len as f64;
                let kv: f64 = entry
                    .members
                    .iter()
                    .filter(|m| m.output_length > 0)
                    .map(|m| profile.mem_kv_coeff * m.batch as f64 * m.length as f64)
                    .sum();
                let restore: f64 = entry
                    .members
                    .iter()
                    .map(|m| stage_state.offloaded_bytes(m.task))
                    .sum::<f64>()
                    + stage_state.offloaded_bytes(entry.id);
                act + kv + restore
            }
            UnitKind::Backward => stage_state.offloaded_bytes(entry.id),
        }
    }

    /// Whether `demand` extra bytes fit under the stage's admission limit.
    pub fn memory_available(&self, stage: usize, demand: f64, limit: f64) -> bool {
        let weights = self.profile(stage).mem_weights as f64;
        weights + self.stages[stage].resident + demand <= limit
    }

    /// Offload every byte this entry (and its members) holds on the node.
    /// Returns total bytes moved.
    pub fn offload_entry(&mut self, entry_id: u64) -> f64 {
        let owners: Vec<u64> = match self.entries.get(&entry_id) {
            Some(e) => e
                .members
                .iter()
                .map(|m| m.task)
                .chain(std::iter::once(entry_id))
                .collect(),
            None => vec![entry_id],
        };
        let mut moved = 0.0;
        for stage in self.stages.iter_mut() {
            for &owner in &owners {
                moved += stage.offload_owner(owner);
            }
        }
        moved
    }

    /// Mean busy fraction of the node's GPUs over the trailing window.
    pub fn utilization(&self, now: f64, window: f64) -> f64 {
        if window <= 0.0 || now <= 0.0 {
            return 0.0;
        }
        let cutoff = (now - window).max(0.0);
        let span = now - cutoff;
        if span <= 0.0 {
            return 0.0;
        }
        let mut total = 0.0;
        for stage in &self.stages {
            let mut busy = 0.0;
            for &(start, end, _) in stage.intervals.iter().rev() {
                if end <= cutoff {
                    break;
                }
                busy += end.min(now) - start.max(cutoff);
            }
            if let Some(run) = &stage.running {
                busy += (now - run.start.max(cutoff)).max(0.0);
            }
            total += (busy / span).min(1.0);
        }
        total / self.stages.len() as f64
    }

    /// Seconds to move `bytes` off-device and back.
    pub fn round_trip_penalty(&self, bytes: f64) -> f64 {
        2.0 * self.cfg.offload_penalty * bytes / GB
    }
}
