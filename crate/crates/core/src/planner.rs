//! Task-specific execution planning.
//!
//! For every candidate (node, task) pair the planner forecasts the task's
//! per-stage forward path against the node's trace queues, accounting for
//! far dependencies from pending backward passes, and reports how much new
//! unusable idle time the placement would create (II) together with the
//! forecast response time (R). Training tasks additionally get a backward
//! path planned in reverse stage order. After real execution the engine
//! calibrates the stored forecasts with actual times so later plans build
//! on what really happened.

use crate::cluster::{backward_latency, forward_latency, NodeConfig};
use crate::error::EngineError;
use crate::workload::TaskKind;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// Per-stage execution intervals of one task (or merged batch).
///
/// `forward[s]` is the (start, end) of the stage-`s` forward pass. For
/// training tasks `backward[s]` holds the stage-`s` backward pass; backward
/// traverses stages in reverse order, so `backward[S-1]` runs first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecPath {
    pub forward: Vec<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub backward: Option<Vec<(f64, f64)>>,
}

impl ExecPath {
    pub fn num_stages(&self) -> usize {
        self.forward.len()
    }

    pub fn forward_end(&self) -> f64 {
        self.forward.last().map(|&(_, e)| e).unwrap_or(0.0)
    }

    /// Structural sanity: forward chains left to right, backward (if any)
    /// starts after the final forward and chains right to left.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (s, &(start, end)) in self.forward.iter().enumerate() {
            if start > end {
                return Err(format!("stage {s}: forward start {start} > end {end}"));
            }
            if s + 1 < self.forward.len() && end > self.forward[s + 1].0 {
                return Err(format!("stage {s}: forward end {end} > next stage start"));
            }
        }
        if let Some(bwd) = &self.backward {
            let fwd_done = self.forward_end();
            for (s, &(start, end)) in bwd.iter().enumerate() {
                if start > end {
                    return Err(format!("stage {s}: backward start {start} > end {end}"));
                }
                if start < fwd_done {
                    return Err(format!(
                        "stage {s}: backward start {start} precedes forward completion {fwd_done}"
                    ));
                }
                if s + 1 < bwd.len() && start < bwd[s + 1].1 {
                    return Err(format!(
                        "stage {s}: backward start {start} precedes stage {} end",
                        s + 1
                    ));
                }
            }
        }
        Ok(())
    }
}

/// The shape of a unit being planned: its queue-entry time, padded length,
/// and total sequence count.
#[derive(Debug, Clone, Copy)]
pub struct Candidate {
    pub queue_time: f64,
    pub length: u32,
    pub batch: u32,
}

/// One entry in a node's trace queues: a task, or several inference requests
/// merged into one execution batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlannedEntry {
    pub id: u64,
    pub kind: TaskKind,
    pub queue_time: f64,
    pub length: u32,
    pub batch: u32,
    pub path: ExecPath,
    /// Ids of the workload tasks this entry executes.
    pub members: Vec<u64>,
}

/// Per-node forecast of pending and in-flight execution paths.
///
/// `train` holds training entries whose backward has not fully completed;
/// `inference` holds inference entries whose forward has not fully completed.
/// `last` is an owned copy of the most recently enqueued entry's path, kept
/// alive even after the entry itself is pruned.
#[derive(Debug, Clone, Default)]
pub struct TraceQueues {
    pub train: Vec<PlannedEntry>,
    pub inference: Vec<PlannedEntry>,
    last: Option<(u64, ExecPath)>,
}

impl TraceQueues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.last.is_none()
    }

    pub fn last_path(&self) -> Option<&ExecPath> {
        self.last.as_ref().map(|(_, p)| p)
    }

    /// Append a freshly planned entry and make it the node's `last`.
    pub fn enqueue(&mut self, entry: PlannedEntry) {
        self.last = Some((entry.id, entry.path.clone()));
        match entry.kind {
            TaskKind::Training => self.train.push(entry),
            TaskKind::Inference => self.inference.push(entry),
        }
    }

    pub fn get(&self, id: u64) -> Option<&PlannedEntry> {
        self.train
            .iter()
            .chain(self.inference.iter())
            .find(|e| e.id == id)
    }

    fn get_mut(&mut self, id: u64) -> Option<&mut PlannedEntry> {
        self.train
            .iter_mut()
            .chain(self.inference.iter_mut())
            .find(|e| e.id == id)
    }

    /// Drop a training entry whose backward has fully completed in the
    /// planned timeline (flagged by `compute_idleness`).
    pub fn remove_train(&mut self, id: u64) {
        self.train.retain(|e| e.id != id);
    }

    /// Latest planned final-stage forward end among queued entries.
    pub fn latest_planned_forward_end(&self) -> Option<f64> {
        self.train
            .iter()
            .chain(self.inference.iter())
            .map(|e| e.path.forward_end())
            .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
    }
}

/// Outcome of planning one candidate on one node.
#[derive(Debug, Clone)]
pub struct PlanResult {
    /// Idleness increased: new unusable idle seconds this placement creates.
    pub ii: f64,
    /// Arrival-to-forward-completion latency.
    pub response_time: f64,
    pub path: ExecPath,
    /// Training entries observed to be fully complete in the planned
    /// timeline; the caller removes them when it commits this plan.
    pub completed_training: Vec<u64>,
}

/// Forecast a candidate's forward path on `node` and the idleness it adds.
///
/// Works on copies; never mutates the queues. Per stage, the forward starts
/// at the later of the candidate's previous-stage end and the preceding
/// entry's end on this stage, then pending backward passes are scanned in
/// queue order: the forward either fits entirely before a backward begins or
/// is postponed to that backward's end. Backward time spent inside the
/// serving gap is subtracted from the per-stage idleness contribution, and
/// the final summed II is clamped at zero.
pub fn compute_idleness(q: &TraceQueues, node: &NodeConfig, task: Candidate) -> PlanResult {
    let stages = node.num_stages();
    let mut forward = Vec::with_capacity(stages);

    let prev = match q.last_path() {
        Some(p) => p,
        None => {
            // A node with no history contributes no new idleness: the task
            // runs its unimpeded pipeline chain.
            let mut cursor = task.queue_time;
            for profile in &node.stages {
                let end = cursor + forward_latency(profile, task.batch, task.length);
                forward.push((cursor, end));
                cursor = end;
            }
            let path = ExecPath { forward, backward: None };
            return PlanResult {
                ii: 0.0,
                response_time: path.forward_end() - task.queue_time,
                path,
                completed_training: Vec::new(),
            };
        }
    };

    let mut q_temp: VecDeque<&PlannedEntry> = q.train.iter().collect();
    let mut completed_training = Vec::new();
    let mut ii = 0.0;
    let mut prev_stage_end = task.queue_time;

    for (s, profile) in node.stages.iter().enumerate() {
        let duration = forward_latency(profile, task.batch, task.length);
        let prev_end = prev.forward[s].1;
        let mut start = prev_stage_end.max(prev_end);
        let mut offset = 0.0;

        while let Some(train) = q_temp.pop_front() {
            let (b_start, b_end) = train
                .path
                .backward
                .as_ref()
                .map(|b| b[s])
                .unwrap_or((f64::INFINITY, f64::INFINITY));
            if start + duration <= b_start {
                // Fits in the idle gap before this backward; keep the
                // backward around for later stages.
                q_temp.push_front(train);
                break;
            }
            start = start.max(b_end);
            if prev_end <= b_start {
                offset += backward_latency(profile, train.batch, train.length);
            }
            if s == 0 {
                // Backward traverses stages in reverse, so a stage-0 backward
                // that postponed us means this training task is fully done in
                // the planned timeline.
                completed_training.push(train.id);
            }
        }

        ii += start - prev_end - offset;
        let end = start + duration;
        forward.push((start, end));
        prev_stage_end = end;
    }

    let path = ExecPath { forward, backward: None };
    PlanResult {
        ii: ii.max(0.0),
        response_time: path.forward_end() - task.queue_time,
        path,
        completed_training,
    }
}

/// Plan a training task's backward path immediately after its forward path.
///
/// Stages are traversed in reverse; each stage starts at the later of the
/// next stage's backward end and the last already-planned backward on the
/// same stage, so backwards on one stage never overlap.
pub fn plan_backward(
    q: &TraceQueues,
    node: &NodeConfig,
    kind: TaskKind,
    task: Candidate,
    path: &ExecPath,
) -> Result<ExecPath, EngineError> {
    if kind != TaskKind::Training {
        return Err(EngineError::Contract(
            "plan_backward called on an inference task".into(),
        ));
    }
    let stages = node.num_stages();
    debug_assert_eq!(path.forward.len(), stages);
    let mut backward = vec![(0.0, 0.0); stages];
    let mut dep = path.forward_end();
    for s in (0..stages).rev() {
        let others = q
            .train
            .iter()
            .filter_map(|e| e.path.backward.as_ref().map(|b| b[s].1))
            .fold(f64::NEG_INFINITY, f64::max);
        let start = dep.max(others);
        let end = start + backward_latency(&node.stages[s], task.batch, task.length);
        backward[s] = (start, end);
        dep = end;
    }
    Ok(ExecPath {
        forward: path.forward.clone(),
        backward: Some(backward),
    })
}

/// Which pass a calibration refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CalibrateOp {
    Forward,
    Backward,
}

/// Overwrite a stored plan entry with actual execution times and shift the
/// same entry's downstream planned stages so path invariants hold.
///
/// Completed work is pruned: an inference entry leaves the queues once its
/// final-stage forward is calibrated, a training entry once its stage-0
/// backward is. The node's `last` copy survives pruning.
pub fn calibrate(
    q: &mut TraceQueues,
    entry_id: u64,
    stage: usize,
    actual_start: f64,
    actual_end: f64,
    op: CalibrateOp,
) -> Result<(), EngineError> {
    let stages;
    {
        let entry = q.get_mut(entry_id).ok_or(EngineError::UnknownTask(entry_id))?;
        stages = entry.path.num_stages();
        match op {
            CalibrateOp::Forward => {
                entry.path.forward[stage] = (actual_start, actual_end);
                // Later forward stages keep their planned durations but may
                // not start before this stage ends.
                let mut dep = actual_end;
                for s in stage + 1..stages {
                    let (start, end) = entry.path.forward[s];
                    let dur = end - start;
                    let new_start = start.max(dep);
                    entry.path.forward[s] = (new_start, new_start + dur);
                    dep = new_start + dur;
                }
                if let Some(bwd) = entry.path.backward.as_mut() {
                    let mut dep = entry.path.forward[stages - 1].1;
                    for s in (0..stages).rev() {
                        let (start, end) = bwd[s];
                        let dur = end - start;
                        let new_start = start.max(dep);
                        bwd[s] = (new_start, new_start + dur);
                        dep = new_start + dur;
                    }
                }
            }
            CalibrateOp::Backward => {
                let bwd = entry
                    .path
                    .backward
                    .as_mut()
                    .ok_or_else(|| EngineError::Contract("backward calibration on forward-only entry".into()))?;
                bwd[stage] = (actual_start, actual_end);
                let mut dep = actual_end;
                for s in (0..stage).rev() {
                    let (start, end) = bwd[s];
                    let dur = end - start;
                    let new_start = start.max(dep);
                    bwd[s] = (new_start, new_start + dur);
                    dep = new_start + dur;
                }
            }
        }
        if let Some((last_id, last_path)) = q.last.as_mut() {
            if *last_id == entry_id {
                *last_path = q
                    .train
                    .iter()
                    .chain(q.inference.iter())
                    .find(|e| e.id == entry_id)
                    .map(|e| e.path.clone())
                    .unwrap_or_else(|| last_path.clone());
            }
        }
    }

    // Prune completed work.
    match op {
        CalibrateOp::Forward if stage + 1 == stages => {
            let is_inference = q
                .inference
                .iter()
                .any(|e| e.id == entry_id);
            if is_inference {
                q.inference.retain(|e| e.id != entry_id);
            }
        }
        CalibrateOp::Backward if stage == 0 => {
            q.remove_train(entry_id);
        }
        _ => {}
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::StageProfile;

    fn test_node(stages: usize, eta_f: f64, eta_b: f64) -> NodeConfig {
        let profile = StageProfile {
            eta_f,
            eta_b,
            eta_d: eta_f,
            mem_capacity: 100_000_000_000,
            mem_weights: 1_000_000_000,
            mem_act_coeff: 1.0,
            mem_kv_coeff: 1.0,
        };
        NodeConfig {
            id: 0,
            stages: vec![profile; stages],
            kappa: 0.9,
            t_max: 1.0,
            delta_t: 0.1,
            offload_penalty: 0.0625,
        }
    }

    fn entry(id: u64, kind: TaskKind, length: u32, path: ExecPath) -> PlannedEntry {
        PlannedEntry {
            id,
            kind,
            queue_time: 0.0,
            length,
            batch: 1,
            path,
            members: vec![id],
        }
    }

    #[test]
    fn empty_node_has_zero_idleness() {
        let node = test_node(2, 1e-4, 2e-4);
        let q = TraceQueues::new();
        let res = compute_idleness(&q, &node, Candidate { queue_time: 0.0, length: 100, batch: 1 });
        assert_eq!(res.ii, 0.0);
        assert!((res.response_time - 2.0).abs() < 1e-12);
        assert_eq!(res.path.forward, vec![(0.0, 1.0), (1.0, 2.0)]);
    }

    #[test]
    fn forward_postponed_behind_backward_fills_gap() {
        // One-stage node. Previous forward ends at 5; a pending training
        // backward occupies [5, 7]. A 1-second forward planned at [5, 6]
        // collides, is postponed to 7, and the 2-second backward exactly
        // fills the gap, so the stage contributes zero idleness.
        let node = test_node(1, 1e-4, 2e-4);
        let mut q = TraceQueues::new();
        q.enqueue(entry(
            0,
            TaskKind::Training,
            100,
            ExecPath { forward: vec![(4.0, 5.0)], backward: Some(vec![(5.0, 7.0)]) },
        ));
        let res = compute_idleness(&q, &node, Candidate { queue_time: 5.0, length: 100, batch: 1 });
        assert_eq!(res.path.forward, vec![(7.0, 8.0)]);
        assert_eq!(res.ii, 0.0);
        assert!((res.response_time - 3.0).abs() < 1e-12);
        // The training task's stage-0 backward completed in the planned
        // timeline, so it is flagged for removal.
        assert_eq!(res.completed_training, vec![0]);
    }

    #[test]
    fn forward_fits_before_backward() {
        // Backward starts late enough for the forward to fit in the gap.
        let node = test_node(1, 1e-4, 2e-4);
        let mut q = TraceQueues::new();
        q.enqueue(entry(
            0,
            TaskKind::Training,
            100,
            ExecPath { forward: vec![(4.0, 5.0)], backward: Some(vec![(6.5, 8.5)]) },
        ));
        let res = compute_idleness(&q, &node, Candidate { queue_time: 5.0, length: 100, batch: 1 });
        assert_eq!(res.path.forward, vec![(5.0, 6.0)]);
        assert_eq!(res.ii, 0.0);
        assert!(res.completed_training.is_empty());
    }

    #[test]
    fn idleness_counts_unfilled_gap() {
        // Previous task ended at 2; the new task arrives at 5 and starts
        // there, with no backward to fill the 3-second gap.
        let node = test_node(1, 1e-4, 2e-4);
        let mut q = TraceQueues::new();
        q.enqueue(entry(
            0,
            TaskKind::Inference,
            100,
            ExecPath { forward: vec![(1.0, 2.0)], backward: None },
        ));
        let res = compute_idleness(&q, &node, Candidate { queue_time: 5.0, length: 100, batch: 1 });
        assert!((res.ii - 3.0).abs() < 1e-12);
    }

    #[test]
    fn compute_idleness_is_pure() {
        let node = test_node(2, 1e-4, 2e-4);
        let mut q = TraceQueues::new();
        let fwd = ExecPath { forward: vec![(0.0, 1.0), (1.0, 2.0)], backward: Some(vec![(4.0, 6.0), (2.0, 4.0)]) };
        q.enqueue(entry(0, TaskKind::Training, 100, fwd));
        let before = format!("{q:?}");
        let a = compute_idleness(&q, &node, Candidate { queue_time: 0.5, length: 120, batch: 1 });
        let b = compute_idleness(&q, &node, Candidate { queue_time: 0.5, length: 120, batch: 1 });
        assert_eq!(format!("{q:?}"), before);
        assert_eq!(a.ii, b.ii);
        assert_eq!(a.response_time, b.response_time);
        assert_eq!(a.path, b.path);
    }

    #[test]
    fn backward_single_stage() {
        let node = test_node(1, 1e-4, 5e-5);
        let q = TraceQueues::new();
        let path = ExecPath { forward: vec![(2.0, 3.0)], backward: None };
        let planned = plan_backward(
            &q,
            &node,
            TaskKind::Training,
            Candidate { queue_time: 0.0, length: 100, batch: 1 },
            &path,
        )
        .unwrap();
        assert_eq!(planned.backward.unwrap(), vec![(3.0, 3.5)]);
    }

    #[test]
    fn backward_chains_in_reverse() {
        let node = test_node(2, 1e-4, 2e-4);
        let q = TraceQueues::new();
        let path = ExecPath { forward: vec![(0.0, 1.0), (1.0, 2.0)], backward: None };
        let planned = plan_backward(
            &q,
            &node,
            TaskKind::Training,
            Candidate { queue_time: 0.0, length: 100, batch: 1 },
            &path,
        )
        .unwrap();
        let bwd = planned.backward.unwrap();
        // Stage 1 backward first, then stage 0: end_b^0 = end_f^1 + 2 * 2.0.
        assert_eq!(bwd[1], (2.0, 4.0));
        assert_eq!(bwd[0], (4.0, 6.0));
    }

    #[test]
    fn backward_on_inference_is_contract_violation() {
        let node = test_node(1, 1e-4, 2e-4);
        let q = TraceQueues::new();
        let path = ExecPath { forward: vec![(0.0, 1.0)], backward: None };
        let err = plan_backward(
            &q,
            &node,
            TaskKind::Inference,
            Candidate { queue_time: 0.0, length: 100, batch: 1 },
            &path,
        )
        .unwrap_err();
        assert!(matches!(err, EngineError::Contract(_)));
    }

    #[test]
    fn backwards_never_overlap_on_a_stage() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(17);
        for _ in 0..50 {
            let stages = rng.gen_range(1..=3);
            let node = test_node(stages, 1e-4, 2e-4);
            let mut q = TraceQueues::new();
            let mut cursor = 0.0;
            for id in 0..rng.gen_range(2..=5u64) {
                let len = rng.gen_range(50..300u32);
                let cand = Candidate { queue_time: cursor, length: len, batch: 1 };
                let plan = compute_idleness(&q, &node, cand);
                let full = plan_backward(&q, &node, TaskKind::Training, cand, &plan.path).unwrap();
                full.check_invariants().unwrap();
                q.enqueue(entry(id, TaskKind::Training, len, full));
                cursor += rng.gen_range(0.0..0.5);
            }
            for s in 0..stages {
                let mut intervals: Vec<(f64, f64)> = q
                    .train
                    .iter()
                    .map(|e| e.path.backward.as_ref().unwrap()[s])
                    .collect();
                intervals.sort_by(|a, b| a.0.total_cmp(&b.0));
                for w in intervals.windows(2) {
                    assert!(
                        w[0].1 <= w[1].0 + 1e-12,
                        "stage {s}: backward intervals overlap: {w:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn adding_backward_never_decreases_response() {
        let node = test_node(2, 1e-4, 2e-4);
        let mut q = TraceQueues::new();
        q.enqueue(entry(
            0,
            TaskKind::Inference,
            100,
            ExecPath { forward: vec![(0.0, 1.0), (1.0, 2.0)], backward: None },
        ));
        let cand = Candidate { queue_time: 0.5, length: 100, batch: 1 };
        let base = compute_idleness(&q, &node, cand).response_time;
        // Conflicting pending backward on stage 0.
        q.enqueue(entry(
            1,
            TaskKind::Training,
            100,
            ExecPath { forward: vec![(0.2, 1.2), (1.2, 2.2)], backward: Some(vec![(4.2, 6.2), (2.2, 4.2)]) },
        ));
        let with_bwd = compute_idleness(&q, &node, cand).response_time;
        assert!(with_bwd >= base);
    }

    #[test]
    fn calibrate_fixed_point_leaves_queue_unchanged() {
        let node = test_node(2, 1e-4, 2e-4);
        let q0 = TraceQueues::new();
        let cand = Candidate { queue_time: 0.0, length: 100, batch: 1 };
        let plan = compute_idleness(&q0, &node, cand);
        let mut q = TraceQueues::new();
        q.enqueue(entry(7, TaskKind::Inference, 100, plan.path.clone()));
        let planned = q.get(7).unwrap().path.clone();
        calibrate(&mut q, 7, 0, planned.forward[0].0, planned.forward[0].1, CalibrateOp::Forward)
            .unwrap();
        assert_eq!(q.get(7).unwrap().path, planned);
    }

    #[test]
    fn calibrate_shifts_downstream_stages() {
        let mut q = TraceQueues::new();
        q.enqueue(entry(
            3,
            TaskKind::Inference,
            100,
            ExecPath { forward: vec![(0.0, 1.0), (1.0, 2.0)], backward: None },
        ));
        // Stage 0 actually finished 1 second late.
        calibrate(&mut q, 3, 0, 0.0, 2.0, CalibrateOp::Forward).unwrap();
        let path = &q.get(3).unwrap().path;
        assert!(path.forward[1].0 >= 2.0);
        assert_eq!(path.forward[1].1 - path.forward[1].0, 1.0);
    }

    #[test]
    fn calibrating_final_backward_removes_train_entry() {
        let mut q = TraceQueues::new();
        q.enqueue(entry(
            9,
            TaskKind::Training,
            100,
            ExecPath { forward: vec![(0.0, 1.0), (1.0, 2.0)], backward: Some(vec![(4.0, 6.0), (2.0, 4.0)]) },
        ));
        calibrate(&mut q, 9, 1, 2.0, 4.0, CalibrateOp::Backward).unwrap();
        assert_eq!(q.train.len(), 1);
        calibrate(&mut q, 9, 0, 4.0, 6.0, CalibrateOp::Backward).unwrap();
        assert!(q.train.is_empty());
        // The last-path copy survives for future planning.
        assert!(q.last_path().is_some());
    }

    #[test]
    fn calibrate_unknown_task_errors() {
        let mut q = TraceQueues::new();
        let err = calibrate(&mut q, 42, 0, 0.0, 1.0, CalibrateOp::Forward).unwrap_err();
        assert!(matches!(err, EngineError::UnknownTask(42)));
    }
}
