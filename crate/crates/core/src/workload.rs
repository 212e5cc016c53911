//! Synthetic and trace-driven workload generation.
//!
//! Tasks are either forward-only inference requests or forward+backward
//! training steps. Synthetic streams draw inter-arrival gaps from an
//! exponential distribution (Poisson arrivals), pick the task kind with a
//! seeded Bernoulli draw, and sample query lengths from a configurable
//! distribution. Everything is deterministic given the spec's seed.

use crate::error::{ConfigError, ParseError};
use crate::planner::ExecPath;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Exp, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

/// Whether a task is a serving request or a training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Inference,
    Training,
}

/// One schedulable unit of work: an inference request (forward only) or a
/// training step (forward + backward) that moves through every stage of the
/// node it is assigned to.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Task {
    pub id: u64,
    pub kind: TaskKind,
    /// Nominal arrival time in simulated seconds.
    pub arrival_time: f64,
    /// Query length in tokens.
    pub query_length: u32,
    /// Number of sequences carried by this task.
    pub batch_size: u32,
    /// Tokens to generate after the forward pass; 0 for training tasks and
    /// non-generative inference.
    pub output_length: u32,
    /// Absolute SLO deadline in seconds. Resolved against the cluster's cost
    /// model before a run starts; `None` until then.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub slo_deadline: Option<f64>,
    /// For training tasks: the id of the previous training task whose
    /// first-stage forward end releases this one into the queue.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub release_dep: Option<u64>,
    /// Per-stage forecast produced at dispatch time.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub planned_path: Option<ExecPath>,
    /// Per-stage execution trace recorded by the engine.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub actual_path: Option<ExecPath>,
}

impl Task {
    pub fn is_training(&self) -> bool {
        self.kind == TaskKind::Training
    }

    pub fn is_generative(&self) -> bool {
        self.kind == TaskKind::Inference && self.output_length > 0
    }
}

/// Parametric family of a length distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthFamily {
    LogNormal,
    Normal,
    Empirical,
}

/// Query-length distribution, clamped to `[min, max]` tokens.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LengthDistribution {
    pub family: LengthFamily,
    /// Mean length in tokens.
    pub mean: f64,
    /// Standard deviation in tokens.
    pub std: f64,
    pub min: u32,
    pub max: u32,
    /// Pool for the `Empirical` family; drawn uniformly with replacement.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub empirical_samples: Option<Vec<u32>>,
}

impl LengthDistribution {
    /// Heavy right tail clamped to [16, 2048] tokens, the shape real query
    /// length data tends to follow.
    pub fn default_lognormal() -> Self {
        LengthDistribution {
            family: LengthFamily::LogNormal,
            mean: 300.0,
            std: 150.0,
            min: 16,
            max: 2048,
            empirical_samples: None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.mean <= 0.0 || !self.mean.is_finite() {
            return Err(ConfigError::field("length_dist.mean", "must be > 0"));
        }
        if self.std < 0.0 || !self.std.is_finite() {
            return Err(ConfigError::field("length_dist.std", "must be >= 0"));
        }
        if self.min < 1 {
            return Err(ConfigError::field("length_dist.min", "must be >= 1"));
        }
        if self.min > self.max {
            return Err(ConfigError::field("length_dist.min", "must be <= max"));
        }
        if self.family == LengthFamily::Empirical {
            match &self.empirical_samples {
                Some(s) if !s.is_empty() => {}
                _ => {
                    return Err(ConfigError::field(
                        "length_dist.empirical_samples",
                        "must be non-empty for the empirical family",
                    ))
                }
            }
        }
        Ok(())
    }

    /// Draw one length, always within `[min, max]`.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> u32 {
        let raw = match self.family {
            LengthFamily::LogNormal => {
                if self.std == 0.0 {
                    self.mean
                } else {
                    // Convert token-space mean/std to log-space parameters.
                    let cv2 = (self.std / self.mean).powi(2);
                    let sigma2 = (1.0 + cv2).ln();
                    let mu = self.mean.ln() - sigma2 / 2.0;
                    LogNormal::new(mu, sigma2.sqrt()).unwrap().sample(rng)
                }
            }
            LengthFamily::Normal => {
                if self.std == 0.0 {
                    self.mean
                } else {
                    Normal::new(self.mean, self.std).unwrap().sample(rng)
                }
            }
            LengthFamily::Empirical => {
                let samples = self.empirical_samples.as_ref().expect("validated");
                let idx = rng.gen_range(0..samples.len());
                samples[idx] as f64
            }
        };
        (raw.round() as i64).clamp(self.min as i64, self.max as i64) as u32
    }
}

/// Limit on how much work a synthetic stream contains.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationLimit {
    /// Generate exactly this many tasks.
    TaskCount(usize),
    /// Generate tasks with arrivals inside `[0, horizon)` seconds.
    Horizon(f64),
}

/// Parameters of a synthetic Poisson workload.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkloadSpec {
    /// Mean arrival rate in tasks per second.
    pub request_rate: f64,
    /// Fraction of tasks that are training steps, in [0, 1].
    pub training_rate: f64,
    pub limit: GenerationLimit,
    pub length_dist: LengthDistribution,
    /// Output-length distribution for generative inference; `None` makes all
    /// inference non-generative (output_length = 0).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub output_dist: Option<LengthDistribution>,
    /// Sequences per task.
    #[serde(default = "default_batch_size")]
    pub batch_size: u32,
    pub seed: u64,
}

fn default_batch_size() -> u32 {
    1
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.request_rate <= 0.0 || !self.request_rate.is_finite() {
            return Err(ConfigError::field("request_rate", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.training_rate) {
            return Err(ConfigError::field("training_rate", "must be in [0, 1]"));
        }
        match self.limit {
            GenerationLimit::TaskCount(0) => {
                return Err(ConfigError::field("task_count", "must be >= 1"))
            }
            GenerationLimit::Horizon(h) if h <= 0.0 || !h.is_finite() => {
                return Err(ConfigError::field("horizon", "must be > 0"))
            }
            _ => {}
        }
        if self.batch_size < 1 {
            return Err(ConfigError::field("batch_size", "must be >= 1"));
        }
        self.length_dist.validate()?;
        if let Some(d) = &self.output_dist {
            d.validate()?;
        }
        Ok(())
    }
}

/// Generate a Poisson task stream: i.i.d. exponential inter-arrival gaps,
/// seeded Bernoulli kind selection, lengths from the configured distribution.
/// Training tasks are chained: each carries a release dependency on the
/// previous training task, which the engine materializes at runtime as
/// "enters the queue when the predecessor's first-stage forward ends".
pub fn generate_poisson(spec: &WorkloadSpec) -> Result<Vec<Task>, ConfigError> {
    spec.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let gap = Exp::new(spec.request_rate).expect("validated rate");

    let mut tasks = Vec::new();
    let mut clock = 0.0_f64;
    let mut prev_training: Option<u64> = None;
    let mut id = 0u64;
    loop {
        clock += gap.sample(&mut rng);
        match spec.limit {
            GenerationLimit::TaskCount(n) if tasks.len() >= n => break,
            GenerationLimit::Horizon(h) if clock >= h => break,
            _ => {}
        }
        let kind = if rng.gen_bool(spec.training_rate) {
            TaskKind::Training
        } else {
            TaskKind::Inference
        };
        let query_length = spec.length_dist.sample(&mut rng);
        let output_length = match (kind, &spec.output_dist) {
            (TaskKind::Inference, Some(d)) => d.sample(&mut rng),
            _ => 0,
        };
        let release_dep = match kind {
            TaskKind::Training => prev_training.replace(id),
            TaskKind::Inference => None,
        };
        tasks.push(Task {
            id,
            kind,
            arrival_time: clock,
            query_length,
            batch_size: spec.batch_size,
            output_length,
            slo_deadline: None,
            release_dep,
            planned_path: None,
            actual_path: None,
        });
        id += 1;
    }
    // Arrivals are a running sum of non-negative gaps, already sorted.
    Ok(tasks)
}

const TRACE_HEADER: &str = "arrival_time,kind,length,batch_size,output_length";

/// Load a task stream from a trace CSV. Lines starting with `#` are comments.
/// When `rescale_window` is given, timestamps are affinely mapped so the
/// trace span equals the window.
pub fn load_trace(path: &Path, rescale_window: Option<f64>) -> Result<Vec<Task>, ParseError> {
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

    let mut rows: Vec<(f64, TaskKind, u32, u32, u32)> = Vec::new();
    let mut saw_header = false;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !saw_header {
            if line != TRACE_HEADER {
                return Err(malformed(
                    line_no,
                    format!("expected header `{TRACE_HEADER}`, got `{line}`"),
                ));
            }
            saw_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(malformed(
                line_no,
                format!("expected 5 fields, got {}", fields.len()),
            ));
        }
        let arrival: f64 = fields[0]
            .parse()
            .map_err(|e| malformed(line_no, format!("bad arrival_time: {e}")))?;
        let kind = match fields[1] {
            "inference" => TaskKind::Inference,
            "training" => TaskKind::Training,
            other => {
                return Err(malformed(
                    line_no,
                    format!("kind must be `inference` or `training`, got `{other}`"),
                ))
            }
        };
        let length: u32 = fields[2]
            .parse()
            .map_err(|e| malformed(line_no, format!("bad length: {e}")))?;
        let batch: u32 = fields[3]
            .parse()
            .map_err(|e| malformed(line_no, format!("bad batch_size: {e}")))?;
        let output: u32 = fields[4]
            .parse()
            .map_err(|e| malformed(line_no, format!("bad output_length: {e}")))?;
        if arrival < 0.0 || !arrival.is_finite() {
            return Err(malformed(line_no, "arrival_time must be >= 0".into()));
        }
        if length < 1 {
            return Err(malformed(line_no, "length must be >= 1".into()));
        }
        if batch < 1 {
            return Err(malformed(line_no, "batch_size must be >= 1".into()));
        }
        rows.push((arrival, kind, length, batch, output));
    }

    if rows.is_empty() {
        return Ok(Vec::new());
    }

    if let Some(window) = rescale_window {
        let lo = rows.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
        let hi = rows.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        for row in &mut rows {
            row.0 = if span > 0.0 {
                (row.0 - lo) / span * window
            } else {
                0.0
            };
        }
    }

    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut prev_training: Option<u64> = None;
    let tasks = rows
        .into_iter()
        .enumerate()
        .map(|(i, (arrival, kind, length, batch, output))| {
            let id = i as u64;
            let release_dep = match kind {
                TaskKind::Training => prev_training.replace(id),
                TaskKind::Inference => None,
            };
            Task {
                id,
                kind,
                arrival_time: arrival,
                query_length: length,
                batch_size: batch,
                output_length: if kind == TaskKind::Training { 0 } else { output },
                slo_deadline: None,
                release_dep,
                planned_path: None,
                actual_path: None,
            }
        })
        .collect();
    Ok(tasks)
}

/// Build one distribution per heterogeneity level: identical mean, standard
/// deviation set to the level. Parametric families adjust `std` directly;
/// empirical pools are resampled to a subset whose sample std lands within
/// 5% of the level.
pub fn make_heterogeneity_sweep(
    base: &LengthDistribution,
    variance_levels: &[f64],
) -> Result<Vec<LengthDistribution>, ConfigError> {
    for (i, level) in variance_levels.iter().enumerate() {
        if *level < 0.0 || !level.is_finite() {
            return Err(ConfigError::field(
                format!("variance_levels[{i}]"),
                "must be >= 0",
            ));
        }
    }
    variance_levels
        .iter()
        .map(|&level| {
            let mut dist = base.clone();
            dist.std = level;
            if dist.family == LengthFamily::Empirical {
                let samples = dist
                    .empirical_samples
                    .as_ref()
                    .ok_or_else(|| {
                        ConfigError::field("empirical_samples", "required for empirical family")
                    })?
                    .clone();
                dist.empirical_samples = Some(resample_to_std(&samples, level));
            }
            Ok(dist)
        })
        .collect()
}

/// Greedily drop samples until the subset's sample std is within 5% of the
/// target (or no single removal improves it further).
fn resample_to_std(samples: &[u32], target: f64) -> Vec<u32> {
    let mut subset: Vec<u32> = samples.to_vec();
    subset.sort_unstable();
    let tol = 0.05 * target;
    loop {
        let current = sample_std(&subset);
        if (current - target).abs() <= tol || subset.len() <= 2 {
            break;
        }
        // Try removing each element; keep the removal that gets closest.
        let mut best: Option<(usize, f64)> = None;
        for i in 0..subset.len() {
            let mut candidate = subset.clone();
            candidate.remove(i);
            let d = (sample_std(&candidate) - target).abs();
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        match best {
            Some((i, d)) if d < (current - target).abs() => {
                subset.remove(i);
            }
            _ => break,
        }
    }
    subset
}

fn sample_std(values: &[u32]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / (n - 1.0);
    var.sqrt()
}

/// Stable content hash of a task list; used to refuse cross-workload
/// comparisons and to stamp run outputs.
pub fn workload_hash(tasks: &[Task]) -> String {
    let mut hasher = Sha256::new();
    for t in tasks {
        hasher.update(t.id.to_le_bytes());
        hasher.update([matches!(t.kind, TaskKind::Training) as u8]);
        hasher.update(t.arrival_time.to_le_bytes());
        hasher.update(t.query_length.to_le_bytes());
        hasher.update(t.batch_size.to_le_bytes());
        hasher.update(t.output_length.to_le_bytes());
    }
    hex::encode(&hasher.finalize()[..16])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(rate: f64, alpha: f64, n: usize, seed: u64) -> WorkloadSpec {
        WorkloadSpec {
            request_rate: rate,
            training_rate: alpha,
            limit: GenerationLimit::TaskCount(n),
            length_dist: LengthDistribution::default_lognormal(),
            output_dist: None,
            batch_size: 1,
            seed,
        }
    }

    #[test]
    fn poisson_mean_interarrival_matches_rate() {
        let tasks = generate_poisson(&spec(1.0, 0.0, 1000, 7)).unwrap();
        let mut gaps = Vec::new();
        let mut prev = 0.0;
        for t in &tasks {
            gaps.push(t.arrival_time - prev);
            prev = t.arrival_time;
        }
        let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
        assert!(
            (mean - 1.0).abs() < 0.1,
            "sample mean inter-arrival {mean} outside 1.0 +/- 0.1"
        );
    }

    #[test]
    fn degenerate_training_rates() {
        let all_inf = generate_poisson(&spec(10.0, 0.0, 200, 1)).unwrap();
        assert!(all_inf.iter().all(|t| t.kind == TaskKind::Inference));
        let all_train = generate_poisson(&spec(10.0, 1.0, 200, 1)).unwrap();
        assert!(all_train.iter().all(|t| t.kind == TaskKind::Training));
    }

    #[test]
    fn training_fraction_within_tolerance() {
        let tasks = generate_poisson(&spec(50.0, 0.3, 10_000, 42)).unwrap();
        let frac = tasks.iter().filter(|t| t.is_training()).count() as f64 / tasks.len() as f64;
        assert!((frac - 0.3).abs() <= 0.02, "training fraction {frac}");
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_poisson(&spec(20.0, 0.5, 500, 99)).unwrap();
        let b = generate_poisson(&spec(20.0, 0.5, 500, 99)).unwrap();
        assert_eq!(
            serde_json::to_vec(&a).unwrap(),
            serde_json::to_vec(&b).unwrap()
        );
    }

    #[test]
    fn training_tasks_chain_release_deps() {
        let tasks = generate_poisson(&spec(20.0, 0.5, 200, 3)).unwrap();
        let train_ids: Vec<u64> = tasks.iter().filter(|t| t.is_training()).map(|t| t.id).collect();
        let mut prev = None;
        for t in tasks.iter().filter(|t| t.is_training()) {
            assert_eq!(t.release_dep, prev);
            prev = Some(t.id);
        }
        assert!(!train_ids.is_empty());
        assert!(tasks
            .iter()
            .filter(|t| !t.is_training())
            .all(|t| t.release_dep.is_none()));
    }

    #[test]
    fn invalid_spec_names_field() {
        let mut s = spec(0.0, 0.5, 10, 1);
        let err = generate_poisson(&s).unwrap_err();
        assert!(err.to_string().contains("request_rate"));
        s = spec(1.0, 1.5, 10, 1);
        let err = generate_poisson(&s).unwrap_err();
        assert!(err.to_string().contains("training_rate"));
    }

    #[test]
    fn trace_rescale_affine() {
        let dir = std::env::temp_dir().join(format!("mixsim_trace_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rescale.csv");
        std::fs::write(
            &path,
            "arrival_time,kind,length,batch_size,output_length\n\
             0,inference,100,1,0\n\
             5,inference,100,1,0\n\
             10,inference,100,1,0\n",
        )
        .unwrap();
        let tasks = load_trace(&path, Some(2.0)).unwrap();
        let arrivals: Vec<f64> = tasks.iter().map(|t| t.arrival_time).collect();
        assert_eq!(arrivals, vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn trace_empty_file_is_empty_list() {
        let dir = std::env::temp_dir().join(format!("mixsim_trace_e_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("empty.csv");
        std::fs::write(&path, "").unwrap();
        assert!(load_trace(&path, None).unwrap().is_empty());
    }

    #[test]
    fn trace_round_trip_fixture() {
        let dir = std::env::temp_dir().join(format!("mixsim_trace_r_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("fixture.csv");
        std::fs::write(
            &path,
            "# hand-written fixture\n\
             arrival_time,kind,length,batch_size,output_length\n\
             0.5,inference,128,2,16\n\
             1.25,training,256,4,0\n",
        )
        .unwrap();
        let tasks = load_trace(&path, None).unwrap();
        assert_eq!(tasks.len(), 2);
        assert_eq!(tasks[0].query_length, 128);
        assert_eq!(tasks[0].batch_size, 2);
        assert_eq!(tasks[0].output_length, 16);
        assert_eq!(tasks[1].kind, TaskKind::Training);
        assert_eq!(tasks[1].query_length, 256);
        assert_eq!(tasks[1].batch_size, 4);
    }

    #[test]
    fn trace_malformed_row_reports_line() {
        let dir = std::env::temp_dir().join(format!("mixsim_trace_m_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.csv");
        std::fs::write(
            &path,
            "arrival_time,kind,length,batch_size,output_length\n\
             0.5,inference,128,1,0\n\
             oops,inference,128,1,0\n",
        )
        .unwrap();
        let err = load_trace(&path, None).unwrap_err();
        assert!(err.to_string().contains(":3:"), "got: {err}");
    }

    #[test]
    fn heterogeneity_sweep_parametric() {
        let base = LengthDistribution::default_lognormal();
        let sweep = make_heterogeneity_sweep(&base, &[0.0, 10.0, 20.0]).unwrap();
        assert_eq!(sweep.len(), 3);
        for (d, expect) in sweep.iter().zip([0.0, 10.0, 20.0]) {
            assert_eq!(d.mean, base.mean);
            assert_eq!(d.std, expect);
        }
    }

    #[test]
    fn heterogeneity_sweep_empirical_resamples_to_target() {
        // Wide pool: stds from tight to loose are reachable by subsetting.
        let pool: Vec<u32> = (1..=400).map(|i| 100 + (i % 200)).collect();
        let base = LengthDistribution {
            family: LengthFamily::Empirical,
            mean: 200.0,
            std: sample_std(&pool),
            min: 1,
            max: 4096,
            empirical_samples: Some(pool),
        };
        let target = 30.0;
        let sweep = make_heterogeneity_sweep(&base, &[target]).unwrap();
        let got = sample_std(sweep[0].empirical_samples.as_ref().unwrap());
        assert!(
            (got - target).abs() <= 0.05 * target,
            "subset std {got} not within 5% of {target}"
        );
    }

    #[test]
    fn lengths_respect_clamp() {
        let mut d = LengthDistribution::default_lognormal();
        d.min = 64;
        d.max = 128;
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let l = d.sample(&mut rng);
            assert!((64..=128).contains(&l));
        }
    }

    #[test]
    fn arrivals_nondecreasing_property() {
        for seed in 0..20 {
            let tasks = generate_poisson(&spec(80.0, 0.4, 300, seed)).unwrap();
            for w in tasks.windows(2) {
                assert!(w[0].arrival_time <= w[1].arrival_time);
            }
        }
    }
}
