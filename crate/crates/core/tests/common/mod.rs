//! Shared test support: a brute-force replay oracle and random instance
//! generation.
//!
//! The oracle re-derives every task's execution timeline with flat interval
//! bookkeeping — no trace queues, no working copies, no calibration — so it
//! stays independent of both the planner's incremental math and the engine's
//! event machinery. Idleness-increased is computed definitionally from the
//! realized timeline: per stage, the gap opened after the previous task's
//! forward minus the backward time executed inside that gap.

#![allow(dead_code)]

use mixsim_core::cluster::{
    backward_latency, forward_latency, ClusterConfig, NodeConfig, StageProfile,
};
use mixsim_core::workload::{Task, TaskKind};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

#[derive(Debug, Clone)]
pub struct OracleTask {
    pub idx: usize,
    pub node: usize,
    pub effective_arrival: f64,
    pub ii: f64,
    pub response: f64,
    pub forward: Vec<(f64, f64)>,
    pub backward: Option<Vec<(f64, f64)>>,
}

struct PendingTask {
    idx: usize,
    effective: f64,
    seq: usize,
}

/// Replay a fixed assignment with direct interval arithmetic.
pub fn oracle_replay(tasks: &[Task], assignment: &[usize], cluster: &ClusterConfig) -> Vec<OracleTask> {
    let num_nodes = cluster.num_nodes();
    // Per (node, stage): forward end of the last task placed, and every
    // backward interval placed so far with its model duration.
    let mut last_fwd_end: Vec<Option<Vec<f64>>> = vec![None; num_nodes];
    let mut bwds: Vec<Vec<Vec<(f64, f64, f64)>>> = cluster
        .nodes
        .iter()
        .map(|n| vec![Vec::new(); n.num_stages()])
        .collect();

    let mut pending: Vec<PendingTask> = Vec::new();
    let mut seq = 0usize;
    for (idx, t) in tasks.iter().enumerate() {
        if t.release_dep.is_none() {
            pending.push(PendingTask { idx, effective: t.arrival_time, seq });
            seq += 1;
        }
    }
    let chain: std::collections::BTreeMap<u64, usize> = tasks
        .iter()
        .enumerate()
        .filter_map(|(i, t)| t.release_dep.map(|dep| (dep, i)))
        .collect();

    let mut out = Vec::new();
    while !pending.is_empty() {
        // Earliest effective arrival, ties by scheduling order.
        let pick = pending
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| a.effective.total_cmp(&b.effective).then(a.seq.cmp(&b.seq)))
            .map(|(i, _)| i)
            .unwrap();
        let PendingTask { idx, effective, .. } = pending.swap_remove(pick);
        let task = &tasks[idx];
        let node_id = assignment[idx];
        let node = &cluster.nodes[node_id];
        let stages = node.num_stages();

        let mut forward = Vec::with_capacity(stages);
        let mut ii = 0.0;
        match &last_fwd_end[node_id] {
            None => {
                // First task on the node: unimpeded pipeline chain, no new
                // idleness.
                let mut cursor = effective;
                for s in 0..stages {
                    let end = cursor + forward_latency(&node.stages[s], task.batch_size, task.query_length);
                    forward.push((cursor, end));
                    cursor = end;
                }
            }
            Some(prev) => {
                let mut prev_stage_end = effective;
                for s in 0..stages {
                    let dur = forward_latency(&node.stages[s], task.batch_size, task.query_length);
                    let mut start = prev_stage_end.max(prev[s]);
                    for &(b_start, b_end, _) in &bwds[node_id][s] {
                        if start + dur <= b_start {
                            break;
                        }
                        start = start.max(b_end);
                    }
                    let gap = start - prev[s];
                    let filled: f64 = bwds[node_id][s]
                        .iter()
                        .filter(|&&(b_start, b_end, _)| b_start >= prev[s] && b_end <= start)
                        .map(|&(_, _, model_dur)| model_dur)
                        .sum();
                    ii += gap - filled;
                    forward.push((start, start + dur));
                    prev_stage_end = start + dur;
                }
            }
        }
        let response = forward[stages - 1].1 - effective;
        let ii = ii.max(0.0);

        let backward = if task.is_training() {
            let mut bwd = vec![(0.0, 0.0); stages];
            let mut dep = forward[stages - 1].1;
            for s in (0..stages).rev() {
                let others = bwds[node_id][s]
                    .iter()
                    .map(|&(_, e, _)| e)
                    .fold(f64::NEG_INFINITY, f64::max);
                let start = dep.max(others);
                let dur = backward_latency(&node.stages[s], task.batch_size, task.query_length);
                bwd[s] = (start, start + dur);
                dep = start + dur;
            }
            for s in 0..stages {
                bwds[node_id][s].push((
                    bwd[s].0,
                    bwd[s].1,
                    backward_latency(&node.stages[s], task.batch_size, task.query_length),
                ));
            }
            Some(bwd)
        } else {
            None
        };

        last_fwd_end[node_id] = Some(forward.iter().map(|&(_, e)| e).collect());

        // A completed first-stage forward releases the next chained task.
        if task.is_training() {
            if let Some(&next) = chain.get(&task.id) {
                pending.push(PendingTask {
                    idx: next,
                    effective: forward[0].1.max(tasks[next].arrival_time),
                    seq,
                });
                seq += 1;
            }
        }

        out.push(OracleTask {
            idx,
            node: node_id,
            effective_arrival: effective,
            ii,
            response,
            forward,
            backward,
        });
    }
    out.sort_by_key(|t| t.idx);
    out
}

/// A small cluster with per-stage coefficient variation and memory sized so
/// admission never waits.
pub fn unconstrained_cluster(num_nodes: usize, stages: usize, eta_scale: f64) -> ClusterConfig {
    let nodes = (0..num_nodes)
        .map(|id| {
            let profiles: Vec<StageProfile> = (0..stages)
                .map(|s| StageProfile {
                    eta_f: eta_scale * (1.0 + 0.13 * s as f64),
                    eta_b: eta_scale * (1.35 + 0.11 * s as f64),
                    eta_d: eta_scale,
                    mem_capacity: 1 << 50,
                    mem_weights: 1 << 20,
                    mem_act_coeff: 1.0,
                    mem_kv_coeff: 1.0,
                })
                .collect();
            NodeConfig {
                id,
                stages: profiles,
                kappa: 0.9,
                t_max: 1.0,
                delta_t: 0.1,
                offload_penalty: 0.0625,
            }
        })
        .collect();
    ClusterConfig {
        nodes,
        sync_interval: 100,
        sync_base: 0.5,
        sync_per_node: 0.25,
        model_bytes: 1_000_000_000,
        sync_ref_bytes: 1_000_000_000,
    }
}

/// Random instance: a handful of mixed tasks with chained training releases
/// and a random node assignment.
pub fn random_instance(
    seed: u64,
    max_tasks: usize,
    max_stages: usize,
    num_nodes: usize,
) -> (Vec<Task>, Vec<usize>, ClusterConfig) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n_tasks = rng.gen_range(1..=max_tasks);
    let stages = rng.gen_range(1..=max_stages);
    let cluster = unconstrained_cluster(num_nodes, stages, 1e-5);

    let mut tasks = Vec::with_capacity(n_tasks);
    let mut clock = 0.0;
    let mut prev_training: Option<u64> = None;
    for id in 0..n_tasks as u64 {
        clock += rng.gen_range(0.01..0.8);
        let training = rng.gen_bool(0.4);
        let release_dep = if training { prev_training.replace(id) } else { None };
        tasks.push(Task {
            id,
            kind: if training { TaskKind::Training } else { TaskKind::Inference },
            arrival_time: clock,
            query_length: rng.gen_range(50..400),
            batch_size: rng.gen_range(1..=3),
            output_length: 0,
            slo_deadline: None,
            release_dep,
            planned_path: None,
            actual_path: None,
        });
    }
    let assignment: Vec<usize> = (0..n_tasks).map(|_| rng.gen_range(0..num_nodes)).collect();
    (tasks, assignment, cluster)
}
