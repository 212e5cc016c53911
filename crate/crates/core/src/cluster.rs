//! Simulated hardware description and offline-profiled cost models.
//!
//! Stage execution time is modeled as quadratic in query length and linear
//! in batch size: forward `eta_f * C * l^2`, backward `eta_b * C * l^2`.
//! Decode steps are linear in context length: `eta_d * C * l_ctx`. The
//! coefficients come either from shipped presets or from fitting profiling
//! observations normalized by `C * l^2`.

use crate::error::{ConfigError, ParseError, ProfilingError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const GB: f64 = 1e9;

/// Which pass a profiling observation measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileOp {
    Forward,
    Backward,
}

/// Cost and memory model for one pipeline stage (one GPU).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageProfile {
    /// Forward coefficient, seconds per (token^2 * sequence).
    pub eta_f: f64,
    /// Backward coefficient, seconds per (token^2 * sequence).
    pub eta_b: f64,
    /// Decode-step coefficient, seconds per (context token * sequence).
    pub eta_d: f64,
    /// Total device memory in bytes.
    pub mem_capacity: u64,
    /// Static weight shard resident on the device.
    pub mem_weights: u64,
    /// Activation bytes per (token * sequence) claimed by a forward pass.
    pub mem_act_coeff: f64,
    /// KV-cache bytes per (context token * sequence) for generative requests.
    pub mem_kv_coeff: f64,
}

impl StageProfile {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [
            ("eta_f", self.eta_f),
            ("eta_b", self.eta_b),
            ("eta_d", self.eta_d),
            ("mem_act_coeff", self.mem_act_coeff),
            ("mem_kv_coeff", self.mem_kv_coeff),
        ] {
            if v <= 0.0 || !v.is_finite() {
                return Err(ConfigError::field(name, "must be > 0"));
            }
        }
        if self.mem_weights >= self.mem_capacity {
            return Err(ConfigError::field(
                "mem_weights",
                "must be < mem_capacity",
            ));
        }
        Ok(())
    }
}

/// Forward latency of one stage: `eta_f * C * l^2`.
pub fn forward_latency(p: &StageProfile, batch: u32, len: u32) -> f64 {
    p.eta_f * batch as f64 * (len as f64) * (len as f64)
}

/// Backward latency of one stage: `eta_b * C * l^2`.
pub fn backward_latency(p: &StageProfile, batch: u32, len: u32) -> f64 {
    p.eta_b * batch as f64 * (len as f64) * (len as f64)
}

/// One autoregressive decode step over a cached context: `eta_d * C * l_ctx`.
pub fn decode_step_latency(p: &StageProfile, batch: u32, context_len: u32) -> f64 {
    p.eta_d * batch as f64 * context_len as f64
}

/// One server: an ordered pipeline of stages plus memory-policy knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeConfig {
    pub id: usize,
    pub stages: Vec<StageProfile>,
    /// Safety factor on peak memory; the admission threshold is
    /// `kappa * mem_capacity`.
    pub kappa: f64,
    /// Maximum cumulative memory wait before offloading, seconds.
    pub t_max: f64,
    /// Memory re-check interval, seconds.
    pub delta_t: f64,
    /// Seconds per GB moved when offloading/restoring state.
    pub offload_penalty: f64,
}

impl NodeConfig {
    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.stages.is_empty() {
            return Err(ConfigError::field("stages", "node needs at least one stage"));
        }
        if !(0.0..=1.0).contains(&self.kappa) || self.kappa <= 0.0 {
            return Err(ConfigError::field("kappa", "must be in (0, 1]"));
        }
        if self.delta_t <= 0.0 || self.delta_t >= self.t_max {
            return Err(ConfigError::field("delta_t", "must satisfy 0 < delta_t < t_max"));
        }
        if self.offload_penalty < 0.0 {
            return Err(ConfigError::field("offload_penalty", "must be >= 0"));
        }
        for (s, p) in self.stages.iter().enumerate() {
            p.validate()?;
            if (self.kappa * p.mem_capacity as f64) <= p.mem_weights as f64 {
                return Err(ConfigError::field(
                    format!("stages[{s}]"),
                    "kappa * mem_capacity must exceed the weight shard",
                ));
            }
        }
        Ok(())
    }

    /// Full forward latency through every stage of this node.
    pub fn node_forward_latency(&self, batch: u32, len: u32) -> f64 {
        self.stages
            .iter()
            .map(|p| forward_latency(p, batch, len))
            .sum()
    }
}

/// Memory admission threshold for one stage: `kappa * mem_capacity`.
pub fn memory_threshold(node: &NodeConfig, stage: usize) -> u64 {
    (node.kappa * node.stages[stage].mem_capacity as f64) as u64
}

/// The whole simulated cluster plus model-synchronization parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub nodes: Vec<NodeConfig>,
    /// Training tasks between checkpoints under the Separate policy.
    pub sync_interval: u64,
    /// Fixed component of inter-node weight synchronization, seconds.
    pub sync_base: f64,
    /// Per-additional-node component of synchronization, seconds.
    pub sync_per_node: f64,
    /// Model footprint in bytes; scales synchronization latency.
    pub model_bytes: u64,
    /// Reference model size the sync parameters were measured at.
    pub sync_ref_bytes: u64,
}

impl ClusterConfig {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.nodes.is_empty() {
            return Err(ConfigError::field("nodes", "cluster needs at least one node"));
        }
        if self.sync_interval < 1 {
            return Err(ConfigError::field("sync_interval", "must be >= 1"));
        }
        if self.sync_base < 0.0 || self.sync_per_node < 0.0 {
            return Err(ConfigError::field("sync_base", "must be >= 0"));
        }
        if self.sync_ref_bytes == 0 {
            return Err(ConfigError::field("sync_ref_bytes", "must be > 0"));
        }
        for n in &self.nodes {
            n.validate()?;
        }
        Ok(())
    }

    /// Checkpoint propagation latency: affine in node count, linear in model
    /// size relative to the reference. Nothing to sync below two nodes.
    pub fn sync_latency(&self, model_bytes: u64, num_nodes: usize) -> f64 {
        if num_nodes < 2 {
            return 0.0;
        }
        let scale = model_bytes as f64 / self.sync_ref_bytes as f64;
        (self.sync_base + self.sync_per_node * (num_nodes as f64 - 1.0)) * scale
    }
}

/// One offline profiling measurement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProfilingObservation {
    pub stage_id: usize,
    pub op: ProfileOp,
    pub batch: u32,
    pub length: u32,
    pub measured_latency: f64,
}

/// Fitted latency coefficients for one stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FittedStage {
    pub eta_f: f64,
    pub eta_b: f64,
}

/// Fit per-stage coefficients as the mean of `latency / (C * l^2)` over the
/// observations for each (stage, op). Every stage present in the input must
/// have both a forward and a backward observation.
pub fn fit_coefficients(
    observations: &[ProfilingObservation],
) -> Result<BTreeMap<usize, FittedStage>, ProfilingError> {
    if observations.is_empty() {
        return Err(ProfilingError::Empty);
    }
    let mut sums: BTreeMap<(usize, ProfileOp), (f64, usize)> = BTreeMap::new();
    for obs in observations {
        let norm = obs.measured_latency
            / (obs.batch as f64 * obs.length as f64 * obs.length as f64);
        let entry = sums.entry((obs.stage_id, obs.op)).or_insert((0.0, 0));
        entry.0 += norm;
        entry.1 += 1;
    }
    let stages: Vec<usize> = {
        let mut s: Vec<usize> = sums.keys().map(|(stage, _)| *stage).collect();
        s.dedup();
        s
    };
    let mut gaps = Vec::new();
    for &stage in &stages {
        for op in [ProfileOp::Forward, ProfileOp::Backward] {
            if !sums.contains_key(&(stage, op)) {
                gaps.push((stage, op));
            }
        }
    }
    if !gaps.is_empty() {
        return Err(ProfilingError::Incomplete { gaps });
    }
    Ok(stages
        .into_iter()
        .map(|stage| {
            let (fs, fc) = sums[&(stage, ProfileOp::Forward)];
            let (bs, bc) = sums[&(stage, ProfileOp::Backward)];
            (
                stage,
                FittedStage {
                    eta_f: fs / fc as f64,
                    eta_b: bs / bc as f64,
                },
            )
        })
        .collect())
}

/// Parse profiling observations from a CSV with header
/// `stage,op,batch,length,latency`.
pub fn load_observations_csv(path: &Path) -> Result<Vec<ProfilingObservation>, ParseError> {
    let text = std::fs::read_to_string(path).map_err(|source| ParseError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let display = path.display().to_string();
    let malformed = |line: usize, reason: String| ParseError::Malformed {
        path: display.clone(),
        line,
        reason,
    };
    let mut out = Vec::new();
    let mut saw_header = false;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !saw_header {
            if line != "stage,op,batch,length,latency" {
                return Err(malformed(
                    line_no,
                    format!("expected header `stage,op,batch,length,latency`, got `{line}`"),
                ));
            }
            saw_header = true;
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 5 {
            return Err(malformed(line_no, format!("expected 5 fields, got {}", f.len())));
        }
        let op = match f[1] {
            "forward" => ProfileOp::Forward,
            "backward" => ProfileOp::Backward,
            other => return Err(malformed(line_no, format!("bad op `{other}`"))),
        };
        out.push(ProfilingObservation {
            stage_id: f[0]
                .parse()
                .map_err(|e| malformed(line_no, format!("bad stage: {e}")))?,
            op,
            batch: f[2]
                .parse()
                .map_err(|e| malformed(line_no, format!("bad batch: {e}")))?,
            length: f[3]
                .parse()
                .map_err(|e| malformed(line_no, format!("bad length: {e}")))?,
            measured_latency: f[4]
                .parse()
                .map_err(|e| malformed(line_no, format!("bad latency: {e}")))?,
        });
    }
    Ok(out)
}

/// Reference shape the preset coefficients were fit at.
pub const PRESET_REF_BATCH: u32 = 1;
pub const PRESET_REF_LEN: u32 = 500;

/// A shipped model profile: measured stage latencies at the reference shape.
#[derive(Debug, Clone, Copy)]
pub struct ModelPreset {
    pub name: &'static str,
    pub size_gb: f64,
    pub layers: u32,
    pub hidden: u32,
    /// Stage forward latency at (C=1, l=500), seconds.
    pub forward_s: f64,
    /// Stage backward latency at (C=1, l=500), seconds.
    pub backward_s: f64,
    /// Device memory of the GPUs this model was profiled on.
    pub gpu_mem_gb: f64,
}

pub const MODEL_PRESETS: &[ModelPreset] = &[
    ModelPreset { name: "gpt-400m", size_gb: 1.0, layers: 12, hidden: 768, forward_s: 0.03, backward_s: 0.04, gpu_mem_gb: 48.0 },
    ModelPreset { name: "gpt-1.4b", size_gb: 2.3, layers: 24, hidden: 1024, forward_s: 0.08, backward_s: 0.09, gpu_mem_gb: 48.0 },
    ModelPreset { name: "gpt-2.5b", size_gb: 4.5, layers: 36, hidden: 1280, forward_s: 0.12, backward_s: 0.14, gpu_mem_gb: 48.0 },
    ModelPreset { name: "llama-8b", size_gb: 13.0, layers: 32, hidden: 4096, forward_s: 0.11, backward_s: 0.15, gpu_mem_gb: 80.0 },
    ModelPreset { name: "llama-13b", size_gb: 26.0, layers: 40, hidden: 5120, forward_s: 0.24, backward_s: 0.36, gpu_mem_gb: 80.0 },
    ModelPreset { name: "llama-70b", size_gb: 132.0, layers: 80, hidden: 8192, forward_s: 0.73, backward_s: 1.05, gpu_mem_gb: 80.0 },
];

pub fn preset_by_name(name: &str) -> Option<&'static ModelPreset> {
    MODEL_PRESETS.iter().find(|p| p.name == name)
}

impl ModelPreset {
    /// Stage profile with coefficients fit so the stage reproduces the
    /// preset's forward/backward latency at (C=1, l=500).
    pub fn stage_profile(&self, stages_per_node: usize) -> StageProfile {
        let ref_work = PRESET_REF_BATCH as f64 * (PRESET_REF_LEN as f64).powi(2);
        let eta_f = self.forward_s / ref_work;
        let eta_b = self.backward_s / ref_work;
        let layers_per_stage = (self.layers as f64 / stages_per_node as f64).ceil();
        // fp16 activations with a fixed multiplier for intermediate buffers;
        // K and V caches are 2 bytes each per hidden unit per layer.
        let mem_act_coeff = 24.0 * self.hidden as f64 * layers_per_stage;
        let mem_kv_coeff = 4.0 * self.hidden as f64 * layers_per_stage;
        StageProfile {
            eta_f,
            eta_b,
            // A decode step over the full context costs one forward's worth
            // of work per context token.
            eta_d: eta_f,
            mem_capacity: (self.gpu_mem_gb * GB) as u64,
            mem_weights: (self.size_gb * GB / stages_per_node as f64) as u64,
            mem_act_coeff,
            mem_kv_coeff,
        }
    }

    /// Homogeneous node: `stages_per_node` identical stages, default memory
    /// policy (kappa 0.9, T_max 10x and delta_t 0.1x the reference forward).
    pub fn node_config(&self, id: usize, stages_per_node: usize) -> NodeConfig {
        let profile = self.stage_profile(stages_per_node);
        NodeConfig {
            id,
            stages: vec![profile; stages_per_node],
            kappa: 0.9,
            t_max: 10.0 * self.forward_s,
            delta_t: 0.1 * self.forward_s,
            offload_penalty: 0.0625,
        }
    }

    /// Homogeneous cluster of `num_nodes` nodes with `stages_per_node` GPUs each.
    pub fn cluster(&self, num_nodes: usize, stages_per_node: usize) -> ClusterConfig {
        ClusterConfig {
            nodes: (0..num_nodes)
                .map(|id| self.node_config(id, stages_per_node))
                .collect(),
            sync_interval: 100,
            sync_base: 0.5,
            sync_per_node: 0.25,
            model_bytes: (self.size_gb * GB) as u64,
            sync_ref_bytes: GB as u64,
        }
    }
}
