//! Discrete-event harness comparing the teacher/student pipeline with a
//! memory-less baseline.
//!
//! Both methods run in separate worlds built from the same seed: identical
//! device populations, task sequences, background collaborations and outcome
//! draws. Every random draw is keyed by `(seed, stream, index)` so the two
//! worlds stay paired even though they select different collaborators.
//!
//! Evaluation time is a cost model, not wall clock:
//!
//! * teacher/student: `2*l_msg + c_eng + c_lookup*log2(1 + retrieved) + c_decide`
//! * baseline: `candidates*(2*l_msg + k*c_rec) + c_eng + c_decide`

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::num::NonZeroUsize;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    DeviceId, PerformanceRecord, RecordMetrics, ResourceProfile, Task, TaskId, TaskType, Timestamp, Verdict,
    BITS_PER_MB,
};
use crate::matching::{evaluate_chain, MatchConfig};
use crate::memory::{HistoryQuery, HistoryWindow, MemoryError, RecordLog};
use crate::semantics::{DeterministicEngine, EngineConfig, SemanticsEngine};
use crate::student::{decide, DecisionPolicy};
use crate::teacher::{Candidate, CandidateBundle, Teacher, TeacherConfig, TeacherError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error(transparent)]
    Teacher(#[from] TeacherError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Semantics(#[from] crate::semantics::SemanticsError),
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Range { min, max }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.max > self.min {
            rng.random_range(self.min..self.max)
        } else {
            self.min
        }
    }

    fn validate(&self, name: &str) -> Result<(), String> {
        if !(self.min.is_finite() && self.max.is_finite() && self.min <= self.max) {
            return Err(format!("{name}: need finite min <= max"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyModel {
    /// One-way message latency, seconds.
    pub l_msg_s: f64,
    /// Device-side cost per collected history record.
    pub c_rec_s: f64,
    /// One trust evaluation / matching pass.
    pub c_eng_s: f64,
    /// Tree retrieval cost per log2 of retrieved entries.
    pub c_lookup_s: f64,
    /// Student decision cost.
    pub c_decide_s: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            l_msg_s: 0.1,
            c_rec_s: 0.02,
            c_eng_s: 1.0,
            c_lookup_s: 0.001,
            c_decide_s: 0.01,
        }
    }
}

impl LatencyModel {
    pub fn teacher_cost(&self, retrieved: usize) -> f64 {
        2.0 * self.l_msg_s + self.c_eng_s + self.c_lookup_s * (1.0 + retrieved as f64).log2() + self.c_decide_s
    }

    pub fn baseline_cost(&self, candidates: usize, window_k: usize) -> f64 {
        candidates as f64 * (2.0 * self.l_msg_s + window_k as f64 * self.c_rec_s) + self.c_eng_s + self.c_decide_s
    }

    fn validate(&self) -> Result<(), String> {
        let all = [self.l_msg_s, self.c_rec_s, self.c_eng_s, self.c_lookup_s, self.c_decide_s];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err("latency costs must be finite and >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskTemplate {
    pub task_type: TaskType,
    pub weight: f64,
    pub size_mb: f64,
    pub density_cpb: f64,
    pub deadline_s: f64,
    /// Relative uniform jitter applied to the size.
    #[serde(default)]
    pub size_jitter: f64,
}

pub fn default_task_mix() -> Vec<TaskTemplate> {
    vec![
        TaskTemplate {
            task_type: TaskType::face_recognition(),
            weight: 1.0,
            size_mb: 100.0,
            density_cpb: 2339.0,
            deadline_s: 60.0,
            size_jitter: 0.2,
        },
        TaskTemplate {
            task_type: TaskType::video_transcoding(),
            weight: 1.0,
            size_mb: 50.0,
            density_cpb: 1000.0,
            deadline_s: 50.0,
            size_jitter: 0.2,
        },
        TaskTemplate {
            task_type: TaskType::text_word_count(),
            weight: 1.0,
            size_mb: 20.0,
            density_cpb: 500.0,
            deadline_s: 10.0,
            size_jitter: 0.2,
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopulationConfig {
    pub cpu_cps: Range,
    pub storage_mb: Range,
    pub bandwidth_mbps: Range,
    pub base_loss: Range,
    pub base_accuracy: Range,
    /// Satisfaction probability of reliable devices.
    pub reliable_level: f64,
    /// Satisfaction probability of unreliable devices.
    pub unreliable_level: f64,
    /// Relative uniform noise on per-record metrics.
    pub metric_noise: f64,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        PopulationConfig {
            cpu_cps: Range::new(1.0e10, 6.0e10),
            storage_mb: Range::new(32.0, 256.0),
            bandwidth_mbps: Range::new(50.0, 300.0),
            base_loss: Range::new(0.005, 0.02),
            base_accuracy: Range::new(0.95, 0.99),
            reliable_level: 0.95,
            unreliable_level: 0.7,
            metric_noise: 0.05,
        }
    }
}

/// Linear degradation of a subset of reliable devices during measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftConfig {
    /// Fraction of reliable devices that drift.
    pub fraction: f64,
    /// Onsets are uniform in `[0, onset_spread_s]` after measurement starts.
    pub onset_spread_s: f64,
    pub reliability_per_s: f64,
    pub loss_rate_per_s: f64,
    /// Relative decline per second.
    pub throughput_per_s: f64,
    pub accuracy_per_s: f64,
    pub proc_speed_per_s: f64,
}

impl Default for DriftConfig {
    fn default() -> Self {
        DriftConfig {
            fraction: 0.2,
            onset_spread_s: 1000.0,
            reliability_per_s: 0.0005,
            loss_rate_per_s: 0.00005,
            throughput_per_s: 0.0,
            accuracy_per_s: 0.0,
            proc_speed_per_s: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub device_counts: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            device_counts: vec![10, 20, 40],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    /// Runs seeds `seed .. seed + seeds`.
    pub seeds: u32,
    pub device_count: usize,
    /// Each warm-up round has every device serve every task type once.
    pub warmup_rounds: usize,
    pub warmup_round_s: f64,
    /// Measured task requests per seed.
    pub task_count: usize,
    pub task_interval_s: f64,
    /// Unmeasured collaborations between consecutive measured tasks.
    pub background_per_task: usize,
    pub report_interval_s: f64,
    pub unreliable_fraction: f64,
    pub baseline_window_k: usize,
    pub task_mix: Vec<TaskTemplate>,
    pub population: PopulationConfig,
    pub drift: DriftConfig,
    pub latency: LatencyModel,
    pub engine: EngineConfig,
    pub teacher: TeacherConfig,
    pub student: DecisionPolicy,
    pub sweep: SweepConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 1,
            seeds: 1,
            device_count: 20,
            warmup_rounds: 10,
            warmup_round_s: 60.0,
            task_count: 200,
            task_interval_s: 10.0,
            background_per_task: 3,
            report_interval_s: 60.0,
            unreliable_fraction: 0.3,
            baseline_window_k: 5,
            task_mix: default_task_mix(),
            population: PopulationConfig::default(),
            drift: DriftConfig::default(),
            latency: LatencyModel::default(),
            engine: EngineConfig::default(),
            teacher: TeacherConfig::default(),
            student: DecisionPolicy::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let fail = |m: String| Err(SimError::Config(m));
        if self.device_count < 2 {
            return fail("device_count must be >= 2".into());
        }
        if self.seeds < 1 {
            return fail("seeds must be >= 1".into());
        }
        if self.baseline_window_k < 1 {
            return fail("baseline_window_k must be >= 1".into());
        }
        for (name, v) in [
            ("unreliable_fraction", self.unreliable_fraction),
            ("drift.fraction", self.drift.fraction),
            ("population.reliable_level", self.population.reliable_level),
            ("population.unreliable_level", self.population.unreliable_level),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must be in [0, 1]"));
            }
        }
        for (name, v) in [
            ("warmup_round_s", self.warmup_round_s),
            ("task_interval_s", self.task_interval_s),
            ("report_interval_s", self.report_interval_s),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return fail(format!("{name} must be > 0"));
            }
        }
        if self.task_mix.is_empty() {
            return fail("task_mix must not be empty".into());
        }
        if self.task_mix.iter().all(|t| t.weight <= 0.0) {
            return fail("task_mix needs a positive weight".into());
        }
        for t in &self.task_mix {
            Task::new(
                TaskId::new("probe").unwrap(),
                DeviceId::new("probe").unwrap(),
                t.task_type.clone(),
                t.size_mb,
                t.density_cpb,
                t.deadline_s,
            )
            .map_err(|e| SimError::Config(format!("task_mix {}: {e}", t.task_type)))?;
            if !(0.0..1.0).contains(&t.size_jitter) || !(t.weight >= 0.0) {
                return fail(format!("task_mix {}: bad weight or jitter", t.task_type));
            }
        }
        let p = &self.population;
        for (name, r) in [
            ("population.cpu_cps", p.cpu_cps),
            ("population.storage_mb", p.storage_mb),
            ("population.bandwidth_mbps", p.bandwidth_mbps),
            ("population.base_loss", p.base_loss),
            ("population.base_accuracy", p.base_accuracy),
        ] {
            r.validate(name).map_err(SimError::Config)?;
        }
        if p.cpu_cps.min <= 0.0 || p.bandwidth_mbps.min <= 0.0 || p.storage_mb.min < 0.0 {
            return fail("population resources must be positive".into());
        }
        if p.base_loss.min < 0.0 || p.base_loss.max > 1.0 || p.base_accuracy.min < 0.0 || p.base_accuracy.max > 1.0 {
            return fail("population loss/accuracy ranges must lie in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&p.metric_noise) {
            return fail("population.metric_noise must be in [0, 1)".into());
        }
        self.latency.validate().map_err(SimError::Config)?;
        self.engine
            .validate()
            .map_err(|e| SimError::Config(e.to_string()))?;
        self.teacher.validate().map_err(SimError::Config)?;
        self.student.validate().map_err(SimError::Config)?;
        Ok(())
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.seed.wrapping_add(i)).collect()
    }

    fn matching(&self) -> &MatchConfig {
        &self.teacher.matching
    }

    fn measurement_start(&self) -> Timestamp {
        Timestamp::from_secs_f64(self.warmup_rounds as f64 * self.warmup_round_s + 120.0)
    }
}

// ---------------------------------------------------------------------------
// Ground truth

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftRates {
    pub onset: Timestamp,
    pub reliability_per_s: f64,
    pub loss_rate_per_s: f64,
    pub throughput_per_s: f64,
    pub accuracy_per_s: f64,
    pub proc_speed_per_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthDevice {
    pub device: DeviceId,
    pub true_profile: ResourceProfile,
    pub reliability: BTreeMap<TaskType, f64>,
    pub base_loss: f64,
    pub base_accuracy: f64,
    pub unreliable: bool,
    pub drift: Option<DriftRates>,
}

impl GroundTruthDevice {
    fn drift_elapsed(&self, at: Timestamp) -> f64 {
        match &self.drift {
            Some(d) if at > d.onset => at.secs_since(d.onset),
            _ => 0.0,
        }
    }

    /// Probability that a collaboration of this type started at `at` ends
    /// satisfied, assuming it meets its deadline.
    pub fn reliability_at(&self, task_type: &TaskType, at: Timestamp) -> f64 {
        let base = self.reliability.get(task_type).copied().unwrap_or(0.0);
        let rate = self.drift.as_ref().map_or(0.0, |d| d.reliability_per_s);
        (base - rate * self.drift_elapsed(at)).clamp(0.0, 1.0)
    }

    fn metrics_at(&self, task: &Task, at: Timestamp, noise: [f64; 4]) -> RecordMetrics {
        let dt = self.drift_elapsed(at);
        let d = self.drift.as_ref();
        let rate = |f: fn(&DriftRates) -> f64| d.map_or(0.0, f);
        let loss = (self.base_loss + rate(|d| d.loss_rate_per_s) * dt).clamp(0.0, 1.0);
        let tp_factor = (1.0 - rate(|d| d.throughput_per_s) * dt).max(0.0);
        let acc = (self.base_accuracy - rate(|d| d.accuracy_per_s) * dt).clamp(0.0, 1.0);
        let sp_factor = (1.0 - rate(|d| d.proc_speed_per_s) * dt).max(0.0);
        let p = &self.true_profile;
        let throughput = p.bandwidth_mbps() * (1.0 - loss) * tp_factor;
        let proc_speed = p.cpu_cps() / (task.density_cpb() * BITS_PER_MB) * sp_factor;
        RecordMetrics {
            throughput_mbps: (throughput * noise[0]).max(0.0),
            loss_rate: (loss * noise[1]).clamp(0.0, 1.0),
            proc_speed_mbps: (proc_speed * noise[2]).max(0.0),
            accuracy: (acc * noise[3]).clamp(0.0, 1.0),
        }
    }
}

fn device_name(i: usize) -> DeviceId {
    DeviceId::new(format!("d{i:03}")).expect("non-empty")
}

/// Stream ids for keyed random draws.
#[derive(Clone, Copy)]
enum Stream {
    Population = 1,
    Warmup = 2,
    Background = 3,
    Measured = 4,
    Outcome = 5,
}

fn keyed_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    // splitmix64 over the three parts
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((stream as u64) << 56)
        .wrapping_add(index);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Deterministic device population for one seed.
pub fn build_population(cfg: &ScenarioConfig, seed: u64) -> Vec<GroundTruthDevice> {
    let n = cfg.device_count;
    let mut rng = keyed_rng(seed, Stream::Population, 0);
    let p = &cfg.population;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_unreliable = (cfg.unreliable_fraction * n as f64).round() as usize;
    let unreliable: Vec<usize> = order[..n_unreliable].to_vec();
    let reliable: Vec<usize> = order[n_unreliable..].to_vec();
    let n_drift = (cfg.drift.fraction * reliable.len() as f64).round() as usize;
    let drifting: Vec<usize> = reliable[..n_drift].to_vec();
    let start = cfg.measurement_start();

    (0..n)
        .map(|i| {
            let device = device_name(i);
            let profile = ResourceProfile::new(
                device.clone(),
                p.cpu_cps.sample(&mut rng),
                p.storage_mb.sample(&mut rng),
                p.bandwidth_mbps.sample(&mut rng),
                Timestamp(0),
            )
            .expect("validated ranges");
            let is_unreliable = unreliable.contains(&i);
            let level = if is_unreliable {
                p.unreliable_level
            } else {
                p.reliable_level
            };
            let reliability = cfg
                .task_mix
                .iter()
                .map(|t| (t.task_type.clone(), level))
                .collect();
            let base_loss = p.base_loss.sample(&mut rng);
            let base_accuracy = p.base_accuracy.sample(&mut rng);
            let onset_offset = rng.random::<f64>() * cfg.drift.onset_spread_s;
            let drift = drifting.contains(&i).then(|| DriftRates {
                onset: Timestamp(start.0 + Timestamp::from_secs_f64(onset_offset).0),
                reliability_per_s: cfg.drift.reliability_per_s,
                loss_rate_per_s: cfg.drift.loss_rate_per_s,
                throughput_per_s: cfg.drift.throughput_per_s,
                accuracy_per_s: cfg.drift.accuracy_per_s,
                proc_speed_per_s: cfg.drift.proc_speed_per_s,
            });
            GroundTruthDevice {
                device,
                true_profile: profile,
                reliability,
                base_loss,
                base_accuracy,
                unreliable: is_unreliable,
                drift,
            }
        })
        .collect()
}

/// Whether `device` is a correct choice for `task` at `now`: reliable enough
/// and actually able to meet the deadline.
pub fn is_correct_option(
    device: &GroundTruthDevice,
    task: &Task,
    now: Timestamp,
    trust_threshold: f64,
    matching: &MatchConfig,
) -> bool {
    device.reliability_at(task.task_type(), now) >= trust_threshold
        && evaluate_chain(task, &device.true_profile.touched(now), now, matching).matched
}

/// Scores one selection. `None` means the task is left out of the accuracy
/// denominator (nothing selected and nothing correct was available).
pub fn accuracy_of(
    selection: Option<&DeviceId>,
    task: &Task,
    now: Timestamp,
    population: &[GroundTruthDevice],
    trust_threshold: f64,
    matching: &MatchConfig,
) -> Option<bool> {
    let correct = |d: &GroundTruthDevice| is_correct_option(d, task, now, trust_threshold, matching);
    match selection {
        Some(sel) => Some(
            population
                .iter()
                .find(|d| &d.device == sel)
                .is_some_and(correct),
        ),
        None => {
            let any = population
                .iter()
                .filter(|d| d.device != *task.owner())
                .any(correct);
            any.then_some(false)
        }
    }
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[serde(rename = "2tsd")]
    TwoTsd,
    Baseline,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::TwoTsd => "2tsd",
            Method::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub method: Method,
    pub seed: u64,
    pub device_count: usize,
    pub task_index: usize,
    pub task_id: String,
    pub owner: DeviceId,
    pub task_type: TaskType,
    /// Semantics entries (2TSD) or devices contacted (baseline).
    pub retrieved: usize,
    pub bundle_size: usize,
    pub evaluation_time_sim_s: f64,
    /// Device-contacting history fetches.
    pub data_collection_events: u64,
    pub messages: u64,
    pub selected: Option<DeviceId>,
    pub correct: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    /// `None` for the pooled summary over all seeds.
    pub seed: Option<u64>,
    pub device_count: usize,
    pub tasks: usize,
    pub mean_evaluation_time_s: f64,
    pub data_collection_events: u64,
    pub scored_tasks: usize,
    pub correct_tasks: usize,
    pub selection_accuracy: Option<f64>,
    pub records_generated: u64,
    pub records_ingested: u64,
}

impl MethodSummary {
    fn from_tasks(method: Method, seed: Option<u64>, device_count: usize, tasks: &[&TaskMetrics], generated: u64, ingested: u64) -> Self {
        let n = tasks.len();
        let mean = if n == 0 {
            0.0
        } else {
            tasks.iter().map(|t| t.evaluation_time_sim_s).sum::<f64>() / n as f64
        };
        let scored: Vec<bool> = tasks.iter().filter_map(|t| t.correct).collect();
        let correct = scored.iter().filter(|c| **c).count();
        MethodSummary {
            method,
            seed,
            device_count,
            tasks: n,
            mean_evaluation_time_s: mean,
            data_collection_events: tasks.iter().map(|t| t.data_collection_events).sum(),
            scored_tasks: scored.len(),
            correct_tasks: correct,
            selection_accuracy: (!scored.is_empty()).then(|| correct as f64 / scored.len() as f64),
            records_generated: generated,
            records_ingested: ingested,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tasks: Vec<TaskMetrics>,
    /// Per (method, seed), then one pooled row per method.
    pub summaries: Vec<MethodSummary>,
}

impl MetricsReport {
    pub fn pooled(&self, method: Method) -> Option<&MethodSummary> {
        self.summaries
            .iter()
            .find(|s| s.method == method && s.seed.is_none())
    }

    pub fn per_seed(&self, method: Method) -> Vec<&MethodSummary> {
        self.summaries
            .iter()
            .filter(|s| s.method == method && s.seed.is_some())
            .collect()
    }

    pub fn tasks_for(&self, method: Method) -> impl Iterator<Item = &TaskMetrics> {
        self.tasks.iter().filter(move |t| t.method == method)
    }
}

// ---------------------------------------------------------------------------
// Event loop

#[derive(Debug)]
enum Event {
    Report(usize),
    Collaboration { stream: StreamKey, owner: usize, collaborator: usize, template: usize },
    Measured(usize),
    Complete(PerformanceRecord),
}

#[derive(Debug, Clone, Copy)]
enum StreamKey {
    Warmup(u64),
    Background(u64),
}

struct Scheduled {
    at: Timestamp,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

#[derive(Default)]
struct Queue {
    heap: BinaryHeap<Reverse<Scheduled>>,
    seq: u64,
}

impl Queue {
    fn push(&mut self, at: Timestamp, event: Event) {
        self.seq += 1;
        self.heap.push(Reverse(Scheduled {
            at,
            seq: self.seq,
            event,
        }));
    }

    fn pop(&mut self) -> Option<(Timestamp, Event)> {
        self.heap.pop().map(|Reverse(s)| (s.at, s.event))
    }
}

/// Records as the baseline can see them: each device keeps the records of
/// collaborations it served, each owner keeps the ones it requested.
#[derive(Default)]
struct PeerLogs {
    served: RecordLog,
    requested: HashMap<(DeviceId, DeviceId, TaskType), Vec<PerformanceRecord>>,
}

impl PeerLogs {
    fn append(&mut self, rec: PerformanceRecord) -> Result<(), MemoryError> {
        self.served.append(rec.clone())?;
        self.requested
            .entry((rec.owner().clone(), rec.collaborator().clone(), rec.task_type().clone()))
            .or_default()
            .push(rec);
        Ok(())
    }

    /// Owner's own records about `collaborator` merged with the window the
    /// collaborator hands over, ascending by timestamp.
    fn local_view(&self, owner: &DeviceId, collaborator: &DeviceId, task_type: &TaskType, k: usize) -> Vec<PerformanceRecord> {
        let fetched = self.served.query(&HistoryQuery {
            collaborator: collaborator.clone(),
            task_type: task_type.clone(),
            window: HistoryWindow::LastK(NonZeroUsize::new(k).unwrap_or(NonZeroUsize::MIN)),
        });
        let mut view = fetched;
        if let Some(own) = self
            .requested
            .get(&(owner.clone(), collaborator.clone(), task_type.clone()))
        {
            for r in own {
                if !view.contains(r) {
                    view.push(r.clone());
                }
            }
        }
        view.sort_by_key(|r| r.at());
        view
    }
}

enum Backend {
    Teacher(Box<Teacher>),
    Peers(Box<PeerLogs>),
}

struct World<'a> {
    cfg: &'a ScenarioConfig,
    seed: u64,
    method: Method,
    population: &'a [GroundTruthDevice],
    engine: DeterministicEngine,
    backend: Backend,
    queue: Queue,
    tasks: Vec<TaskMetrics>,
    generated: u64,
    ingested: u64,
}

fn pick_template(cfg: &ScenarioConfig, rng: &mut impl Rng) -> usize {
    let total: f64 = cfg.task_mix.iter().map(|t| t.weight.max(0.0)).sum();
    let mut x = rng.random::<f64>() * total;
    for (i, t) in cfg.task_mix.iter().enumerate() {
        x -= t.weight.max(0.0);
        if x < 0.0 {
            return i;
        }
    }
    cfg.task_mix.len() - 1
}

fn make_task(cfg: &ScenarioConfig, template: usize, id: String, owner: &DeviceId, rng: &mut impl Rng) -> Task {
    let t = &cfg.task_mix[template];
    let jitter = 1.0 + t.size_jitter * (2.0 * rng.random::<f64>() - 1.0);
    Task::new(
        TaskId::new(id).expect("non-empty"),
        owner.clone(),
        t.task_type.clone(),
        t.size_mb * jitter,
        t.density_cpb,
        t.deadline_s,
    )
    .expect("validated template")
}

/// Outcome draws: verdict uniform and four metric noise factors.
fn outcome_draws(rng: &mut impl Rng, noise: f64) -> (f64, [f64; 4]) {
    let u = rng.random::<f64>();
    let mut n = [0.0; 4];
    for v in &mut n {
        *v = 1.0 + noise * (2.0 * rng.random::<f64>() - 1.0);
    }
    (u, n)
}

impl<'a> World<'a> {
    fn new(cfg: &'a ScenarioConfig, seed: u64, method: Method, population: &'a [GroundTruthDevice]) -> Result<Self, SimError> {
        let engine = DeterministicEngine::new(cfg.engine.clone()).map_err(|e| SimError::Config(e.to_string()))?;
        let backend = match method {
            Method::TwoTsd => Backend::Teacher(Box::new(Teacher::new(Box::new(engine.clone()), cfg.teacher.clone()))),
            Method::Baseline => Backend::Peers(Box::default()),
        };
        Ok(World {
            cfg,
            seed,
            method,
            population,
            engine,
            backend,
            queue: Queue::default(),
            tasks: Vec::new(),
            generated: 0,
            ingested: 0,
        })
    }

    fn schedule_all(&mut self) {
        let cfg = self.cfg;
        let n = cfg.device_count;
        let types = cfg.task_mix.len();
        let start = cfg.measurement_start();
        let end_s = start.0 as f64 / 1000.0 + cfg.task_count as f64 * cfg.task_interval_s + 120.0;

        let mut t = 0.0;
        while t <= end_s {
            for d in 0..n {
                let offset = d as f64 * cfg.report_interval_s / n as f64;
                self.queue.push(Timestamp::from_secs_f64(t + offset), Event::Report(d));
            }
            t += cfg.report_interval_s;
        }

        // Warm-up: every (device, type) pair is served once per round.
        let per_round = n * types;
        let mut idx = 0u64;
        for round in 0..cfg.warmup_rounds {
            for slot in 0..per_round {
                let collaborator = slot % n;
                let template = slot / n;
                let mut rng = keyed_rng(self.seed, Stream::Warmup, idx);
                let owner = (collaborator + 1 + rng.random_range(0..n - 1)) % n;
                let at = round as f64 * cfg.warmup_round_s + (slot as f64 + 0.5) * cfg.warmup_round_s / per_round as f64;
                self.queue.push(
                    Timestamp::from_secs_f64(at),
                    Event::Collaboration {
                        stream: StreamKey::Warmup(idx),
                        owner,
                        collaborator,
                        template,
                    },
                );
                idx += 1;
            }
        }

        let start_s = start.0 as f64 / 1000.0;
        let mut bg = 0u64;
        for i in 0..cfg.task_count {
            let t_task = start_s + i as f64 * cfg.task_interval_s;
            self.queue.push(Timestamp::from_secs_f64(t_task), Event::Measured(i));
            for b in 0..cfg.background_per_task {
                let mut rng = keyed_rng(self.seed, Stream::Background, bg);
                let owner = rng.random_range(0..n);
                let collaborator = (owner + 1 + rng.random_range(0..n - 1)) % n;
                let template = pick_template(cfg, &mut rng);
                let at = t_task + (b as f64 + 1.0) * cfg.task_interval_s / (cfg.background_per_task as f64 + 1.0);
                self.queue.push(
                    Timestamp::from_secs_f64(at),
                    Event::Collaboration {
                        stream: StreamKey::Background(bg),
                        owner,
                        collaborator,
                        template,
                    },
                );
                bg += 1;
            }
        }
    }

    /// Runs the collaboration and schedules its completion record.
    fn execute(&mut self, owner: usize, collaborator: usize, task: &Task, start: Timestamp, u: f64, noise: [f64; 4]) {
        let gt = &self.population[collaborator];
        let verdict_chain = evaluate_chain(task, &gt.true_profile.touched(start), start, self.cfg.matching());
        let duration = if verdict_chain.matched {
            verdict_chain.carry()
        } else {
            task.deadline_s()
        };
        let satisfied = verdict_chain.matched && u < gt.reliability_at(task.task_type(), start);
        let done = Timestamp(start.0 + Timestamp::from_secs_f64(duration).0.max(1));
        let record = PerformanceRecord::new(
            self.population[owner].device.clone(),
            gt.device.clone(),
            task.task_type().clone(),
            done,
            gt.metrics_at(task, start, noise),
            if satisfied {
                Verdict::Satisfied
            } else {
                Verdict::Unsatisfied
            },
        )
        .expect("simulated record is valid");
        self.generated += 1;
        self.queue.push(done, Event::Complete(record));
    }

    fn ingest(&mut self, mut record: PerformanceRecord) -> Result<(), SimError> {
        // Two collaborations of one pair finishing in the same millisecond
        // would collide on record identity; nudge the later one.
        loop {
            let result = match &mut self.backend {
                Backend::Teacher(t) => t.handle_performance_record(record.clone()).map(|_| ()),
                Backend::Peers(p) => p.append(record.clone()).map_err(TeacherError::from),
            };
            match result {
                Ok(()) => break,
                Err(TeacherError::Memory(MemoryError::DuplicateRecord { .. })) => {
                    record = PerformanceRecord::new(
                        record.owner().clone(),
                        record.collaborator().clone(),
                        record.task_type().clone(),
                        Timestamp(record.at().0 + 1),
                        RecordMetrics {
                            throughput_mbps: record.throughput_mbps(),
                            loss_rate: record.loss_rate(),
                            proc_speed_mbps: record.proc_speed_mbps(),
                            accuracy: record.accuracy(),
                        },
                        record.verdict(),
                    )
                    .expect("same values");
                }
                Err(e) => return Err(e.into()),
            }
        }
        self.ingested += 1;
        Ok(())
    }

    fn measured(&mut self, index: usize, now: Timestamp) -> Result<(), SimError> {
        let cfg = self.cfg;
        let n = cfg.device_count;
        let mut rng = keyed_rng(self.seed, Stream::Measured, index as u64);
        let owner_idx = rng.random_range(0..n);
        let template = pick_template(cfg, &mut rng);
        let owner = self.population[owner_idx].device.clone();
        let task = make_task(cfg, template, format!("s{}-t{index:05}", self.seed), &owner, &mut rng);

        let (selected, retrieved, bundle_size, eval_s, collections, messages) = match &self.backend {
            Backend::Teacher(teacher) => {
                let trace = teacher.evaluate_request(&task, now);
                let pick = decide(&trace.bundle, &cfg.student);
                (
                    pick,
                    trace.retrieved,
                    trace.bundle.len(),
                    cfg.latency.teacher_cost(trace.retrieved),
                    0u64,
                    2u64,
                )
            }
            Backend::Peers(peers) => {
                let k = cfg.baseline_window_k;
                let mut candidates = Vec::new();
                let mut contacted = 0u64;
                for gt in self.population.iter().filter(|d| d.device != owner) {
                    contacted += 1;
                    let view = peers.local_view(&owner, &gt.device, task.task_type(), k);
                    let ts = self.engine.extract(&gt.device, task.task_type(), &view, now)?;
                    let claim = gt.true_profile.touched(now);
                    let verdict = evaluate_chain(&task, &claim, now, cfg.matching());
                    if ts.state() == crate::domain::TrustState::Trusted && verdict.matched {
                        candidates.push(Candidate {
                            semantics: ts,
                            matched: true,
                            stages: verdict.stages,
                        });
                    }
                }
                let bundle = CandidateBundle::new(task.task_id().clone(), candidates, now)
                    .expect("population is in device order");
                let pick = decide(&bundle, &cfg.student);
                let contacted_n = contacted as usize;
                (
                    pick,
                    contacted_n,
                    bundle.len(),
                    cfg.latency.baseline_cost(contacted_n, k),
                    contacted,
                    2 * contacted,
                )
            }
        };

        let correct = accuracy_of(
            selected.as_ref(),
            &task,
            now,
            self.population,
            cfg.engine.state.trust_threshold,
            cfg.matching(),
        );

        let mut out_rng = keyed_rng(self.seed, Stream::Outcome, index as u64);
        let (u, noise) = outcome_draws(&mut out_rng, cfg.population.metric_noise);
        if let Some(sel) = &selected {
            let collab_idx = self
                .population
                .iter()
                .position(|d| &d.device == sel)
                .expect("selection comes from the population");
            let start = Timestamp(now.0 + Timestamp::from_secs_f64(eval_s).0);
            self.execute(owner_idx, collab_idx, &task, start, u, noise);
        }

        self.tasks.push(TaskMetrics {
            method: self.method,
            seed: self.seed,
            device_count: cfg.device_count,
            task_index: index,
            task_id: task.task_id().to_string(),
            owner,
            task_type: task.task_type().clone(),
            retrieved,
            bundle_size,
            evaluation_time_sim_s: eval_s,
            data_collection_events: collections,
            messages,
            selected,
            correct,
        });
        Ok(())
    }

    fn run(mut self) -> Result<(Vec<TaskMetrics>, u64, u64), SimError> {
        self.schedule_all();
        while let Some((now, event)) = self.queue.pop() {
            match event {
                Event::Report(d) => {
                    if let Backend::Teacher(t) = &self.backend {
                        t.handle_resource_report(self.population[d].true_profile.touched(now))?;
                    }
                }
                Event::Collaboration {
                    stream,
                    owner,
                    collaborator,
                    template,
                } => {
                    let (stream_id, idx) = match stream {
                        StreamKey::Warmup(i) => (Stream::Warmup, i),
                        StreamKey::Background(i) => (Stream::Background, i),
                    };
                    // Separate sub-stream from the one that picked the pair.
                    let mut rng = keyed_rng(self.seed ^ 0x5eed, stream_id, idx);
                    let owner_id = self.population[owner].device.clone();
                    let task = make_task(self.cfg, template, format!("bg{idx}"), &owner_id, &mut rng);
                    let (u, noise) = outcome_draws(&mut rng, self.cfg.population.metric_noise);
                    self.execute(owner, collaborator, &task, now, u, noise);
                }
                Event::Measured(i) => self.measured(i, now)?,
                Event::Complete(rec) => self.ingest(rec)?,
            }
        }
        Ok((self.tasks, self.generated, self.ingested))
    }
}

struct SeedRun {
    seed: u64,
    per_method: Vec<(Method, Vec<TaskMetrics>, u64, u64)>,
}

fn run_seed(cfg: &ScenarioConfig, seed: u64, methods: &[Method]) -> Result<SeedRun, SimError> {
    let population = build_population(cfg, seed);
    let mut per_method = Vec::new();
    for &m in methods {
        let (tasks, generated, ingested) = World::new(cfg, seed, m, &population)?.run()?;
        per_method.push((m, tasks, generated, ingested));
    }
    Ok(SeedRun { seed, per_method })
}

fn run_methods(cfg: &ScenarioConfig, methods: &[Method]) -> Result<MetricsReport, SimError> {
    cfg.validate()?;
    let runs: Vec<SeedRun> = cfg
        .seed_list()
        .par_iter()
        .map(|&s| run_seed(cfg, s, methods))
        .collect::<Result<_, _>>()?;

    let mut tasks = Vec::new();
    let mut summaries = Vec::new();
    for &m in methods {
        let mut pooled_tasks = Vec::new();
        let (mut gen_total, mut ing_total) = (0, 0);
        for run in &runs {
            let (_, t, g, i) = run.per_method.iter().find(|(mm, ..)| *mm == m).expect("method ran");
            let refs: Vec<&TaskMetrics> = t.iter().collect();
            summaries.push(MethodSummary::from_tasks(m, Some(run.seed), cfg.device_count, &refs, *g, *i));
            pooled_tasks.extend(t.iter().cloned());
            gen_total += g;
            ing_total += i;
        }
        let refs: Vec<&TaskMetrics> = pooled_tasks.iter().collect();
        summaries.push(MethodSummary::from_tasks(m, None, cfg.device_count, &refs, gen_total, ing_total));
        tasks.extend(pooled_tasks);
    }
    Ok(MetricsReport { tasks, summaries })
}

/// Runs both methods on every configured seed under identical workloads.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<MetricsReport, SimError> {
    run_methods(cfg, &[Method::TwoTsd, Method::Baseline])
}

/// Baseline only.
pub fn run_baseline(cfg: &ScenarioConfig) -> Result<MetricsReport, SimError> {
    run_methods(cfg, &[Method::Baseline])
}

pub fn run_method(cfg: &ScenarioConfig, method: Method) -> Result<MetricsReport, SimError> {
    run_methods(cfg, &[method])
}

/// One run per device count in `cfg.sweep`, same seeds.
pub fn run_device_sweep(cfg: &ScenarioConfig) -> Result<Vec<(usize, MetricsReport)>, SimError> {
    if cfg.sweep.device_counts.is_empty() {
        return Err(SimError::Config("sweep.device_counts must not be empty".into()));
    }
    cfg.sweep
        .device_counts
        .iter()
        .map(|&n| {
            let c = ScenarioConfig {
                device_count: n,
                ..cfg.clone()
            };
            run_scenario(&c).map(|r| (n, r))
        })
        .collect()
}

/// The teacher's memory after the warm-up and measurement phases of one seed.
pub fn teacher_after_run(cfg: &ScenarioConfig, seed: u64) -> Result<Teacher, SimError> {
    cfg.validate()?;
    let population = build_population(cfg, seed);
    let mut world = World::new(cfg, seed, Method::TwoTsd, &population)?;
    world.schedule_all();
    while let Some((now, event)) = world.queue.pop() {
        match event {
            Event::Report(d) => {
                if let Backend::Teacher(t) = &world.backend {
                    t.handle_resource_report(world.population[d].true_profile.touched(now))?;
                }
            }
            Event::Collaboration { stream, owner, collaborator, template } => {
                let (stream_id, idx) = match stream {
                    StreamKey::Warmup(i) => (Stream::Warmup, i),
                    StreamKey::Background(i) => (Stream::Background, i),
                };
                let mut rng = keyed_rng(world.seed ^ 0x5eed, stream_id, idx);
                let owner_id = world.population[owner].device.clone();
                let task = make_task(cfg, template, format!("bg{idx}"), &owner_id, &mut rng);
                let (u, noise) = outcome_draws(&mut rng, cfg.population.metric_noise);
                world.execute(owner, collaborator, &task, now, u, noise);
            }
            Event::Measured(i) => world.measured(i, now)?,
            Event::Complete(rec) => world.ingest(rec)?,
        }
    }
    match world.backend {
        Backend::Teacher(t) => Ok(*t),
        Backend::Peers(_) => unreachable!("2TSD world"),
    }
}
