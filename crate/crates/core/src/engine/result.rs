//! Simulation outputs: per-task records, per-GPU ledgers, and the invariant
//! checks the acceptance suite runs on every result.

use crate::planner::ExecPath;
use crate::workload::TaskKind;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// What a GPU was doing during a busy interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntervalKind {
    Forward,
    Backward,
    Decode,
}

/// Execution outcome of one workload task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskRecord {
    pub id: u64,
    pub kind: TaskKind,
    pub node: usize,
    /// Nominal arrival from the workload.
    pub arrival: f64,
    /// When the task entered the global queue (training release applied).
    pub effective_arrival: f64,
    /// When the allocation decision completed.
    pub dispatched: f64,
    pub query_length: u32,
    pub batch_size: u32,
    pub output_length: u32,
    pub slo_deadline: f64,
    /// Final-stage forward completion (prefill response).
    pub prefill_end: f64,
    /// Last token for generative tasks, final backward for training tasks,
    /// `prefill_end` otherwise.
    pub completion: f64,
    /// Executing node's model version at forward start (inference only).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub version_at_inference: Option<u64>,
    /// Decode token emission times (generative tasks).
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub token_times: Vec<f64>,
    /// Total simulated seconds spent in memory-wait states.
    pub waited: f64,
    /// Offload operations this task triggered.
    pub offloads: u32,
    /// Times the task was pushed behind an inference arrival.
    pub deprioritized: u32,
    /// Number of requests merged into the execution batch that ran this task.
    pub batch_members: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub planned_path: Option<ExecPath>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub actual_path: Option<ExecPath>,
    /// Planner forecast at dispatch time (idleness increased, response).
    pub planned_ii: f64,
    pub planned_response: f64,
}

/// Busy/idle accounting for one GPU (one stage of one node).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpuLedger {
    pub node: usize,
    pub stage: usize,
    pub busy_s: f64,
    pub idle_s: f64,
    pub peak_mem_bytes: u64,
    pub mem_capacity_bytes: u64,
    pub offloads: u64,
    /// Raw execution intervals, kept for invariant checking.
    pub intervals: Vec<(f64, f64, IntervalKind)>,
}

/// Everything a single simulation run produces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimResult {
    pub policy: String,
    pub seed: u64,
    pub workload_hash: String,
    pub tasks: Vec<TaskRecord>,
    pub gpus: Vec<GpuLedger>,
    /// Time of the last event; the accounting horizon.
    pub horizon: f64,
    pub events_processed: u64,
    /// Admissions whose projected memory exceeded the threshold (only
    /// non-zero when memory awareness is disabled).
    pub threshold_violations: u64,
    /// Wall-clock nanoseconds per allocation decision. Real measurements:
    /// excluded from determinism comparisons.
    pub decision_wall_ns: Vec<u64>,
}

impl SimResult {
    pub fn completed_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// One JSON record per task.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for task in &self.tasks {
            serde_json::to_writer(&mut w, task)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Per-GPU utilization ledger CSV.
    pub fn write_gpu_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "node,stage,busy_s,idle_s,peak_mem_bytes,offloads")?;
        for gpu in &self.gpus {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                gpu.node, gpu.stage, gpu.busy_s, gpu.idle_s, gpu.peak_mem_bytes, gpu.offloads
            )?;
        }
        Ok(())
    }

    /// Structural invariants every run must satisfy: exact busy+idle time
    /// conservation per GPU, memory under capacity, no forward/forward or
    /// forward/backward overlap on a GPU, causal paths, and non-decreasing
    /// version-at-inference along each node's execution order.
    pub fn verify_invariants(&self) -> Result<(), String> {
        for gpu in &self.gpus {
            // Idle is defined as horizon - busy, so conservation must be exact.
            if gpu.busy_s + gpu.idle_s != self.horizon {
                return Err(format!(
                    "node {} stage {}: busy {} + idle {} != horizon {}",
                    gpu.node, gpu.stage, gpu.busy_s, gpu.idle_s, self.horizon
                ));
            }
            if gpu.peak_mem_bytes > gpu.mem_capacity_bytes {
                return Err(format!(
                    "node {} stage {}: peak memory {} exceeds capacity {}",
                    gpu.node, gpu.stage, gpu.peak_mem_bytes, gpu.mem_capacity_bytes
                ));
            }
            let mut sorted: Vec<_> = gpu
                .intervals
                .iter()
                .filter(|(_, _, k)| *k != IntervalKind::Decode)
                .collect();
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
            for pair in sorted.windows(2) {
                let (s0, e0, k0) = *pair[0];
                let (s1, _, k1) = *pair[1];
                // Forward-forward and forward-backward overlaps are illegal.
                if e0 > s1 + 1e-12 {
                    return Err(format!(
                        "node {} stage {}: {:?} [{} ,{}] overlaps {:?} starting {}",
                        gpu.node, gpu.stage, k0, s0, e0, k1, s1
                    ));
                }
            }
        }
        let mut last_version: Vec<(usize, f64, u64)> = Vec::new();
        for task in &self.tasks {
            if task.prefill_end + 1e-12 < task.effective_arrival {
                return Err(format!(
                    "task {}: prefill end {} precedes effective arrival {}",
                    task.id, task.prefill_end, task.effective_arrival
                ));
            }
            if let Some(path) = &task.actual_path {
                path.check_invariants()
                    .map_err(|e| format!("task {}: {}", task.id, e))?;
                if path.forward[0].0 + 1e-12 < task.effective_arrival {
                    return Err(format!(
                        "task {}: forward starts {} before effective arrival {}",
                        task.id, path.forward[0].0, task.effective_arrival
                    ));
                }
            }
            if let Some(v) = task.version_at_inference {
                last_version.push((task.node, task.prefill_end, v));
            }
        }
        // Version-at-inference must be non-decreasing along each node's
        // inference execution order.
        last_version.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
        for pair in last_version.windows(2) {
            if pair[0].0 == pair[1].0 && pair[0].2 > pair[1].2 {
                return Err(format!(
                    "node {}: version-at-inference decreased from {} to {}",
                    pair[0].0, pair[0].2, pair[1].2
                ));
            }
        }
        Ok(())
    }
}
