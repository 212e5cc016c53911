//! Post-processing of simulation results into the reported quantities:
//! throughput, latency breakdowns, SLO attainment, utilization, consolidation
//! and freshness proxies, and scheduler overhead statistics.

use crate::cluster::ClusterConfig;
use crate::engine::SimResult;
use crate::error::ConfigError;
use crate::workload::TaskKind;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;

/// Mean and order statistics of one latency population.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
}

impl Stats {
    fn from_samples(samples: &mut Vec<f64>) -> Self {
        if samples.is_empty() {
            return Stats::default();
        }
        samples.sort_by(|a, b| a.total_cmp(b));
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        Stats {
            mean,
            p50: percentile(samples, 0.50),
            p95: percentile(samples, 0.95),
        }
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

/// Wall-clock scheduler overhead. Real measurements, so excluded from
/// determinism comparisons.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct SchedulerOverhead {
    pub decision_wall_mean_us: f64,
    pub decision_wall_p99_us: f64,
    pub decisions: usize,
}

/// Per-GPU busy fraction.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GpuUtilization {
    pub node: usize,
    pub stage: usize,
    pub fraction: f64,
}

/// Aggregates for one simulation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub policy: String,
    pub seed: u64,
    pub workload_hash: String,
    pub completed: usize,
    pub makespan: f64,
    /// Completed tasks per second of makespan.
    pub throughput: f64,
    /// Arrival to final-stage forward completion, inference tasks.
    pub ttft: Stats,
    /// Mean inter-token gap per generative request.
    pub tbt: Stats,
    pub generative_requests: usize,
    /// Fraction of inference tasks whose TTFT met the SLO deadline.
    pub slo_attainment: f64,
    /// True when there were no inference tasks and attainment is vacuous.
    pub slo_vacuous: bool,
    pub utilization: Vec<GpuUtilization>,
    pub mean_utilization: f64,
    /// First-to-last event span per node.
    pub e2e_latency_per_node: Vec<f64>,
    /// Nodes that received at least one task.
    pub active_nodes: usize,
    pub mean_version_at_inference: f64,
    /// Mean over nodes of the std of assigned query lengths.
    pub per_node_length_std: f64,
    pub threshold_violations: u64,
    pub deprioritizations: u64,
    pub offloads: u64,
    pub mean_wait: f64,
    pub overhead: SchedulerOverhead,
}

impl MetricsReport {
    /// Serialization with wall-clock fields zeroed; two runs of the same
    /// (inputs, seed) must produce byte-identical output here.
    pub fn deterministic_bytes(&self) -> Vec<u8> {
        let mut clone = self.clone();
        clone.overhead = SchedulerOverhead::default();
        serde_json::to_vec_pretty(&clone).expect("report serializes")
    }
}

/// Compute every reported quantity from one run.
pub fn summarize(result: &SimResult, cluster: &ClusterConfig) -> MetricsReport {
    let makespan = result.horizon;
    let completed = result.tasks.len();
    let throughput = if makespan > 0.0 {
        completed as f64 / makespan
    } else {
        0.0
    };

    let mut ttft_samples = Vec::new();
    let mut slo_hits = 0usize;
    let mut inference_count = 0usize;
    let mut tbt_samples = Vec::new();
    let mut versions = Vec::new();
    let mut node_lengths: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut active: BTreeMap<usize, usize> = BTreeMap::new();
    let mut deprioritizations = 0u64;
    let mut offloads = 0u64;
    let mut wait_total = 0.0;

    for task in &result.tasks {
        *active.entry(task.node).or_default() += 1;
        node_lengths
            .entry(task.node)
            .or_default()
            .push(task.query_length as f64);
        deprioritizations += task.deprioritized as u64;
        offloads += task.offloads as u64;
        wait_total += task.waited;
        if task.kind == TaskKind::Inference {
            inference_count += 1;
            let ttft = task.prefill_end - task.arrival;
            ttft_samples.push(ttft);
            if task.prefill_end <= task.slo_deadline {
                slo_hits += 1;
            }
            if let Some(v) = task.version_at_inference {
                versions.push(v as f64);
            }
            if !task.token_times.is_empty() {
                let mut prev = task.prefill_end;
                let mut gaps = Vec::with_capacity(task.token_times.len());
                for &t in &task.token_times {
                    gaps.push(t - prev);
                    prev = t;
                }
                tbt_samples.push(gaps.iter().sum::<f64>() / gaps.len() as f64);
            }
        }
    }

    let slo_vacuous = inference_count == 0;
    let slo_attainment = if slo_vacuous {
        1.0
    } else {
        slo_hits as f64 / inference_count as f64
    };

    let utilization: Vec<GpuUtilization> = result
        .gpus
        .iter()
        .map(|g| GpuUtilization {
            node: g.node,
            stage: g.stage,
            fraction: if makespan > 0.0 { g.busy_s / makespan } else { 0.0 },
        })
        .collect();
    let mean_utilization = if utilization.is_empty() {
        0.0
    } else {
        utilization.iter().map(|u| u.fraction).sum::<f64>() / utilization.len() as f64
    };

    let mut e2e = vec![0.0; cluster.num_nodes()];
    for node in 0..cluster.num_nodes() {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for gpu in result.gpus.iter().filter(|g| g.node == node) {
            for &(s, e, _) in &gpu.intervals {
                lo = lo.min(s);
                hi = hi.max(e);
            }
        }
        if hi > lo {
            e2e[node] = hi - lo;
        }
    }

    let stds: Vec<f64> = node_lengths
        .values()
        .filter(|l| l.len() >= 2)
        .map(|l| {
            let n = l.len() as f64;
            let mean = l.iter().sum::<f64>() / n;
            (l.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        })
        .collect();
    let per_node_length_std = if stds.is_empty() {
        0.0
    } else {
        stds.iter().sum::<f64>() / stds.len() as f64
    };

    let generative_requests = tbt_samples.len();
    let overhead = {
        let mut us: Vec<f64> = result
            .decision_wall_ns
            .iter()
            .map(|&ns| ns as f64 / 1_000.0)
            .collect();
        us.sort_by(|a, b| a.total_cmp(b));
        let mean = if us.is_empty() {
            0.0
        } else {
            us.iter().sum::<f64>() / us.len() as f64
        };
        SchedulerOverhead {
            decision_wall_mean_us: mean,
            decision_wall_p99_us: percentile(&us, 0.99),
            decisions: us.len(),
        }
    };

    MetricsReport {
        policy: result.policy.clone(),
        seed: result.seed,
        workload_hash: result.workload_hash.clone(),
        completed,
        makespan,
        throughput,
        ttft: Stats::from_samples(&mut ttft_samples),
        tbt: Stats::from_samples(&mut tbt_samples),
        generative_requests,
        slo_attainment,
        slo_vacuous,
        utilization,
        mean_utilization,
        e2e_latency_per_node: e2e,
        active_nodes: active.len(),
        mean_version_at_inference: if versions.is_empty() {
            0.0
        } else {
            versions.iter().sum::<f64>() / versions.len() as f64
        },
        per_node_length_std,
        threshold_violations: result.threshold_violations,
        deprioritizations,
        offloads,
        mean_wait: if completed > 0 { wait_total / completed as f64 } else { 0.0 },
        overhead,
    }
}

/// Re-evaluate SLO attainment on an existing result under a different
/// deadline multiple.
pub fn slo_attainment_at(result: &SimResult, cluster: &ClusterConfig, multiple: f64) -> f64 {
    let reference = &cluster.nodes[0];
    let mut hits = 0usize;
    let mut total = 0usize;
    for task in &result.tasks {
        if task.kind != TaskKind::Inference {
            continue;
        }
        total += 1;
        let deadline =
            task.arrival + multiple * reference.node_forward_latency(task.batch_size, task.query_length);
        if task.prefill_end <= deadline {
            hits += 1;
        }
    }
    if total == 0 {
        1.0
    } else {
        hits as f64 / total as f64
    }
}

/// One row of a policy comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareRow {
    pub metric: String,
    pub policy: String,
    pub value: f64,
    /// Value divided by the Separate baseline's; NaN when undefined.
    pub ratio_vs_separate: f64,
}

/// Per-metric ratios of every policy against the Separate baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub workload_hash: String,
    pub rows: Vec<CompareRow>,
}

impl ComparisonTable {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "metric,policy,value,ratio_vs_separate")?;
        for row in &self.rows {
            writeln!(
                w,
                "{},{},{},{}",
                row.metric, row.policy, row.value, row.ratio_vs_separate
            )?;
        }
        Ok(())
    }
}

const COMPARED_METRICS: &[&str] = &[
    "throughput",
    "slo_attainment",
    "ttft_mean",
    "tbt_mean",
    "mean_utilization",
    "active_nodes",
    "mean_version_at_inference",
    "makespan",
];

fn metric_value(report: &MetricsReport, metric: &str) -> f64 {
    match metric {
        "throughput" => report.throughput,
        "slo_attainment" => report.slo_attainment,
        "ttft_mean" => report.ttft.mean,
        "tbt_mean" => report.tbt.mean,
        "mean_utilization" => report.mean_utilization,
        "active_nodes" => report.active_nodes as f64,
        "mean_version_at_inference" => report.mean_version_at_inference,
        "makespan" => report.makespan,
        _ => f64::NAN,
    }
}

/// Build the comparison table. Every report must come from the same workload
/// (verified by hash) and a `separate` report must be present as baseline.
pub fn compare(reports: &BTreeMap<String, MetricsReport>) -> Result<ComparisonTable, ConfigError> {
    let mut hashes: Vec<&str> = reports.values().map(|r| r.workload_hash.as_str()).collect();
    hashes.dedup();
    if hashes.len() > 1 {
        return Err(ConfigError::field(
            "workload_hash",
            "comparison refused: reports come from different workloads",
        ));
    }
    let baseline = reports.get("separate").ok_or_else(|| {
        ConfigError::field("policy", "comparison requires a `separate` baseline report")
    })?;
    let mut rows = Vec::new();
    for metric in COMPARED_METRICS {
        let base = metric_value(baseline, metric);
        for (policy, report) in reports {
            let value = metric_value(report, metric);
            rows.push(CompareRow {
                metric: metric.to_string(),
                policy: policy.clone(),
                value,
                ratio_vs_separate: if base != 0.0 { value / base } else { f64::NAN },
            });
        }
    }
    Ok(ComparisonTable {
        workload_hash: hashes.first().copied().unwrap_or_default().to_string(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocator::{Policy, SchedulerParams};
    use crate::cluster::preset_by_name;
    use crate::engine::run;
    use crate::workload::{generate_poisson, GenerationLimit, LengthDistribution, WorkloadSpec};

    fn small_run(policy: Policy, seed: u64) -> (SimResult, ClusterConfig) {
        let preset = preset_by_name("gpt-400m").unwrap();
        let cluster = preset.cluster(2, 2);
        let spec = WorkloadSpec {
            request_rate: 20.0,
            training_rate: 0.3,
            limit: GenerationLimit::TaskCount(60),
            length_dist: LengthDistribution::default_lognormal(),
            output_dist: None,
            batch_size: 1,
            seed,
        };
        let tasks = generate_poisson(&spec).unwrap();
        let params = SchedulerParams { policy, ..Default::default() };
        let result = run(&cluster, &tasks, &params, seed).unwrap();
        (result, cluster)
    }

    #[test]
    fn throughput_is_completed_over_makespan() {
        let (result, cluster) = small_run(Policy::RoundRobin, 3);
        let report = summarize(&result, &cluster);
        assert_eq!(report.completed, 60);
        assert!(report.makespan > 0.0);
        assert!((report.throughput - 60.0 / report.makespan).abs() < 1e-12);
    }

    #[test]
    fn busy_plus_idle_sums_to_cluster_time() {
        let (result, cluster) = small_run(Policy::LeMix, 4);
        let n = cluster.num_nodes() as f64;
        let s = cluster.nodes[0].num_stages() as f64;
        let total: f64 = result.gpus.iter().map(|g| g.busy_s + g.idle_s).sum();
        assert!((total - n * s * result.horizon).abs() < 1e-6);
    }

    #[test]
    fn single_task_ttft_equals_forward_sum() {
        let preset = preset_by_name("gpt-400m").unwrap();
        let cluster = preset.cluster(1, 2);
        let spec = WorkloadSpec {
            request_rate: 1.0,
            training_rate: 0.0,
            limit: GenerationLimit::TaskCount(1),
            length_dist: LengthDistribution {
                std: 0.0,
                mean: 500.0,
                ..LengthDistribution::default_lognormal()
            },
            output_dist: None,
            batch_size: 1,
            seed: 1,
        };
        let tasks = generate_poisson(&spec).unwrap();
        let params = SchedulerParams { policy: Policy::RoundRobin, max_batch: 1, ..Default::default() };
        let result = run(&cluster, &tasks, &params, 1).unwrap();
        let report = summarize(&result, &cluster);
        let expected = cluster.nodes[0].node_forward_latency(1, 500)
            + params.decision_latency();
        assert!(
            (report.ttft.mean - expected).abs() < 1e-9,
            "ttft {} vs expected {}",
            report.ttft.mean,
            expected
        );
        assert_eq!(report.slo_attainment, 1.0);
    }

    #[test]
    fn vacuous_slo_flagged() {
        let preset = preset_by_name("gpt-400m").unwrap();
        let cluster = preset.cluster(1, 1);
        let spec = WorkloadSpec {
            request_rate: 5.0,
            training_rate: 1.0,
            limit: GenerationLimit::TaskCount(5),
            length_dist: LengthDistribution::default_lognormal(),
            output_dist: None,
            batch_size: 1,
            seed: 2,
        };
        let tasks = generate_poisson(&spec).unwrap();
        let params = SchedulerParams { policy: Policy::RoundRobin, ..Default::default() };
        let result = run(&cluster, &tasks, &params, 2).unwrap();
        let report = summarize(&result, &cluster);
        assert!(report.slo_vacuous);
        assert_eq!(report.slo_attainment, 1.0);
    }

    #[test]
    fn slo_attainment_monotone_in_deadline_multiple() {
        let (result, cluster) = small_run(Policy::RoundRobin, 9);
        let tight = slo_attainment_at(&result, &cluster, 1.0);
        let base = slo_attainment_at(&result, &cluster, 5.0);
        let loose = slo_attainment_at(&result, &cluster, 20.0);
        assert!(tight <= base + 1e-12);
        assert!(base <= loose + 1e-12);
    }

    #[test]
    fn compare_refuses_mismatched_workloads() {
        let (a, cluster) = small_run(Policy::Separate, 5);
        let preset_report = summarize(&a, &cluster);
        let mut other = preset_report.clone();
        other.policy = "lemix".into();
        other.workload_hash = "different".into();
        let mut reports = BTreeMap::new();
        reports.insert("separate".to_string(), preset_report);
        reports.insert("lemix".to_string(), other);
        assert!(compare(&reports).is_err());
    }

    #[test]
    fn compare_ratios_against_separate() {
        let (a, cluster) = small_run(Policy::Separate, 5);
        let base = summarize(&a, &cluster);
        let mut faster = base.clone();
        faster.policy = "lemix".into();
        faster.throughput = base.throughput * 3.0;
        let mut reports = BTreeMap::new();
        reports.insert("separate".to_string(), base);
        reports.insert("lemix".to_string(), faster);
        let table = compare(&reports).unwrap();
        let row = table
            .rows
            .iter()
            .find(|r| r.metric == "throughput" && r.policy == "lemix")
            .unwrap();
        assert!((row.ratio_vs_separate - 3.0).abs() < 1e-12);
        let self_row = table
            .rows
            .iter()
            .find(|r| r.metric == "throughput" && r.policy == "separate")
            .unwrap();
        assert!((self_row.ratio_vs_separate - 1.0).abs() < 1e-12);
        assert_eq!(table.rows.len(), 8 * 2);
    }
}
