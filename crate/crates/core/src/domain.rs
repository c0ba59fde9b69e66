//! Core value types shared by the teacher, the students and the simulator.
//!
//! Every type here validates on construction and on deserialization, so a
//! value that exists is a value whose invariants hold.
//!
//! Units are decimal: 1 MB = 10^6 bytes, 1 Mbps = 10^6 bit/s. Percent-style
//! fields are stored as fractions in `[0, 1]`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

/// Bits in one megabyte.
pub const BITS_PER_MB: f64 = 8.0e6;
/// Bits per second in one Mbps.
pub const BPS_PER_MBPS: f64 = 1.0e6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("{field} must be > 0 (got {value})")]
    NonPositive { field: &'static str, value: f64 },
    #[error("{field} must be >= 0 (got {value})")]
    Negative { field: &'static str, value: f64 },
    #[error("{field} must be finite")]
    NonFinite { field: &'static str },
    #[error("{field} must not be empty")]
    Empty { field: &'static str },
    #[error("{field} out of range [0, 1] (got {value})")]
    OutOfRange { field: &'static str, value: f64 },
    #[error("owner and collaborator are the same device ({0})")]
    SelfCollaboration(DeviceId),
    #[error("cannot parse {what} from {input:?}")]
    Unparseable { what: &'static str, input: String },
}

impl DomainError {
    /// Stable short code, used in protocol error payloads.
    pub fn code(&self) -> &'static str {
        match self {
            DomainError::NonPositive { .. } | DomainError::Negative { .. } => "nonpositive",
            DomainError::NonFinite { .. } => "non_finite",
            DomainError::Empty { .. } => "empty_field",
            DomainError::OutOfRange { .. } => "out_of_range",
            DomainError::SelfCollaboration(_) => "self_collaboration",
            DomainError::Unparseable { .. } => "unparseable",
        }
    }
}

fn finite(field: &'static str, value: f64) -> Result<f64, DomainError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(DomainError::NonFinite { field })
    }
}

fn positive(field: &'static str, value: f64) -> Result<f64, DomainError> {
    finite(field, value)?;
    if value > 0.0 {
        Ok(value)
    } else {
        Err(DomainError::NonPositive { field, value })
    }
}

fn non_negative(field: &'static str, value: f64) -> Result<f64, DomainError> {
    finite(field, value)?;
    if value >= 0.0 {
        Ok(value)
    } else {
        Err(DomainError::Negative { field, value })
    }
}

fn unit_interval(field: &'static str, value: f64) -> Result<f64, DomainError> {
    finite(field, value)?;
    if (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(DomainError::OutOfRange { field, value })
    }
}

fn non_empty(field: &'static str, value: String) -> Result<String, DomainError> {
    if value.trim().is_empty() {
        Err(DomainError::Empty { field })
    } else {
        Ok(value)
    }
}

/// Milliseconds on a scenario-local clock (simulation) or the wall clock
/// (service mode).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub const fn from_millis(ms: i64) -> Self {
        Timestamp(ms)
    }

    pub fn from_secs_f64(secs: f64) -> Self {
        Timestamp((secs * 1000.0).round() as i64)
    }

    pub const fn millis(self) -> i64 {
        self.0
    }

    /// Signed difference `self - earlier` in seconds.
    pub fn secs_since(self, earlier: Timestamp) -> f64 {
        (self.0 - earlier.0) as f64 / 1000.0
    }

    pub fn now_wall() -> Self {
        let ms = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as i64)
            .unwrap_or(0);
        Timestamp(ms)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ms", self.0)
    }
}

macro_rules! string_token {
    ($(#[$meta:meta])* $name:ident, $field:literal) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
        #[serde(transparent)]
        pub struct $name(String);

        impl $name {
            pub fn new(value: impl Into<String>) -> Result<Self, DomainError> {
                non_empty($field, value.into()).map($name)
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let raw = String::deserialize(d)?;
                $name::new(raw).map_err(serde::de::Error::custom)
            }
        }
    };
}

string_token!(
    /// Opaque device identifier. Ordering is plain byte-wise string order and
    /// is used for every deterministic tie-break.
    DeviceId,
    "device"
);
string_token!(
    /// Open task-type label, e.g. `face_recognition`.
    TaskType,
    "task_type"
);
string_token!(TaskId, "task_id");

impl TaskType {
    pub fn face_recognition() -> Self {
        TaskType("face_recognition".into())
    }

    pub fn video_transcoding() -> Self {
        TaskType("video_transcoding".into())
    }

    pub fn text_word_count() -> Self {
        TaskType("text_word_count".into())
    }
}

/// Opaque extra fields carried along with tasks and records but never
/// interpreted.
pub type Extensions = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTask")]
pub struct Task {
    task_id: TaskId,
    owner: DeviceId,
    task_type: TaskType,
    size_mb: f64,
    density_cpb: f64,
    deadline_s: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    extensions: Extensions,
}

/// Unvalidated task fields, as received from a device or a config file.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct RawTask {
    pub task_id: String,
    pub owner: String,
    pub task_type: String,
    pub size_mb: f64,
    pub density_cpb: f64,
    pub deadline_s: f64,
    #[serde(default)]
    pub extensions: Extensions,
}

impl TryFrom<RawTask> for Task {
    type Error = DomainError;

    fn try_from(raw: RawTask) -> Result<Self, DomainError> {
        validate_task(raw)
    }
}

/// Checks every task invariant and returns the validated task.
pub fn validate_task(raw: RawTask) -> Result<Task, DomainError> {
    Ok(Task {
        task_id: TaskId::new(raw.task_id)?,
        owner: DeviceId::new(raw.owner)?,
        task_type: TaskType::new(raw.task_type)?,
        size_mb: positive("size_mb", raw.size_mb)?,
        density_cpb: positive("density_cpb", raw.density_cpb)?,
        deadline_s: positive("deadline_s", raw.deadline_s)?,
        extensions: raw.extensions,
    })
}

impl Task {
    pub fn new(
        task_id: TaskId,
        owner: DeviceId,
        task_type: TaskType,
        size_mb: f64,
        density_cpb: f64,
        deadline_s: f64,
    ) -> Result<Self, DomainError> {
        Ok(Task {
            task_id,
            owner,
            task_type,
            size_mb: positive("size_mb", size_mb)?,
            density_cpb: positive("density_cpb", density_cpb)?,
            deadline_s: positive("deadline_s", deadline_s)?,
            extensions: Extensions::new(),
        })
    }

    pub fn task_id(&self) -> &TaskId {
        &self.task_id
    }
    pub fn owner(&self) -> &DeviceId {
        &self.owner
    }
    pub fn task_type(&self) -> &TaskType {
        &self.task_type
    }
    pub fn size_mb(&self) -> f64 {
        self.size_mb
    }
    pub fn density_cpb(&self) -> f64 {
        self.density_cpb
    }
    pub fn deadline_s(&self) -> f64 {
        self.deadline_s
    }
    pub fn extensions(&self) -> &Extensions {
        &self.extensions
    }

    pub fn size_bits(&self) -> f64 {
        self.size_mb * BITS_PER_MB
    }

    /// Same task with a different deadline.
    pub fn with_deadline(&self, deadline_s: f64) -> Result<Self, DomainError> {
        Ok(Task {
            deadline_s: positive("deadline_s", deadline_s)?,
            ..self.clone()
        })
    }
}

/// Idle-state resources a device reports to the server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawResourceProfile")]
pub struct ResourceProfile {
    device: DeviceId,
    cpu_cps: f64,
    storage_mb: f64,
    bandwidth_mbps: f64,
    updated_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct RawResourceProfile {
    pub device: String,
    pub cpu_cps: f64,
    pub storage_mb: f64,
    pub bandwidth_mbps: f64,
    pub updated_at: Timestamp,
}

impl TryFrom<RawResourceProfile> for ResourceProfile {
    type Error = DomainError;

    fn try_from(raw: RawResourceProfile) -> Result<Self, DomainError> {
        ResourceProfile::new(
            DeviceId::new(raw.device)?,
            raw.cpu_cps,
            raw.storage_mb,
            raw.bandwidth_mbps,
            raw.updated_at,
        )
    }
}

impl ResourceProfile {
    pub fn new(
        device: DeviceId,
        cpu_cps: f64,
        storage_mb: f64,
        bandwidth_mbps: f64,
        updated_at: Timestamp,
    ) -> Result<Self, DomainError> {
        Ok(ResourceProfile {
            device,
            cpu_cps: positive("cpu_cps", cpu_cps)?,
            storage_mb: non_negative("storage_mb", storage_mb)?,
            bandwidth_mbps: positive("bandwidth_mbps", bandwidth_mbps)?,
            updated_at,
        })
    }

    pub fn device(&self) -> &DeviceId {
        &self.device
    }
    pub fn cpu_cps(&self) -> f64 {
        self.cpu_cps
    }
    pub fn storage_mb(&self) -> f64 {
        self.storage_mb
    }
    pub fn bandwidth_mbps(&self) -> f64 {
        self.bandwidth_mbps
    }
    pub fn updated_at(&self) -> Timestamp {
        self.updated_at
    }

    pub fn touched(&self, at: Timestamp) -> Self {
        ResourceProfile {
            updated_at: at,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Satisfied,
    Unsatisfied,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Satisfied => "satisfied",
            Verdict::Unsatisfied => "unsatisfied",
        }
    }

    pub fn is_satisfied(self) -> bool {
        matches!(self, Verdict::Satisfied)
    }
}

/// Outcome of one collaboration, reported by the task owner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPerformanceRecord")]
pub struct PerformanceRecord {
    owner: DeviceId,
    collaborator: DeviceId,
    task_type: TaskType,
    at: Timestamp,
    throughput_mbps: f64,
    loss_rate: f64,
    proc_speed_mbps: f64,
    accuracy: f64,
    verdict: Verdict,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    extensions: Extensions,
}

/// Unvalidated record fields. `loss_rate` and `accuracy` accept either a
/// fraction (`0.01`) or a percent string (`"1%"`).
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct RawPerformanceRecord {
    pub owner: String,
    pub collaborator: String,
    pub task_type: String,
    pub at: Timestamp,
    pub throughput_mbps: f64,
    #[serde(deserialize_with = "fraction_or_percent")]
    pub loss_rate: f64,
    pub proc_speed_mbps: f64,
    #[serde(deserialize_with = "fraction_or_percent")]
    pub accuracy: f64,
    pub verdict: Verdict,
    #[serde(default)]
    pub extensions: Extensions,
}

impl TryFrom<RawPerformanceRecord> for PerformanceRecord {
    type Error = DomainError;

    fn try_from(raw: RawPerformanceRecord) -> Result<Self, DomainError> {
        validate_record(raw)
    }
}

pub fn validate_record(raw: RawPerformanceRecord) -> Result<PerformanceRecord, DomainError> {
    let mut rec = PerformanceRecord::new(
        DeviceId::new(raw.owner)?,
        DeviceId::new(raw.collaborator)?,
        TaskType::new(raw.task_type)?,
        raw.at,
        RecordMetrics {
            throughput_mbps: raw.throughput_mbps,
            loss_rate: raw.loss_rate,
            proc_speed_mbps: raw.proc_speed_mbps,
            accuracy: raw.accuracy,
        },
        raw.verdict,
    )?;
    rec.extensions = raw.extensions;
    Ok(rec)
}

/// The four measured quantities of a collaboration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecordMetrics {
    pub throughput_mbps: f64,
    pub loss_rate: f64,
    pub proc_speed_mbps: f64,
    pub accuracy: f64,
}

impl PerformanceRecord {
    pub fn new(
        owner: DeviceId,
        collaborator: DeviceId,
        task_type: TaskType,
        at: Timestamp,
        metrics: RecordMetrics,
        verdict: Verdict,
    ) -> Result<Self, DomainError> {
        if owner == collaborator {
            return Err(DomainError::SelfCollaboration(owner));
        }
        Ok(PerformanceRecord {
            owner,
            collaborator,
            task_type,
            at,
            throughput_mbps: non_negative("throughput_mbps", metrics.throughput_mbps)?,
            loss_rate: unit_interval("loss_rate", metrics.loss_rate)?,
            proc_speed_mbps: non_negative("proc_speed_mbps", metrics.proc_speed_mbps)?,
            accuracy: unit_interval("accuracy", metrics.accuracy)?,
            verdict,
            extensions: Extensions::new(),
        })
    }

    pub fn owner(&self) -> &DeviceId {
        &self.owner
    }
    pub fn collaborator(&self) -> &DeviceId {
        &self.collaborator
    }
    pub fn task_type(&self) -> &TaskType {
        &self.task_type
    }
    pub fn at(&self) -> Timestamp {
        self.at
    }
    pub fn throughput_mbps(&self) -> f64 {
        self.throughput_mbps
    }
    pub fn loss_rate(&self) -> f64 {
        self.loss_rate
    }
    pub fn proc_speed_mbps(&self) -> f64 {
        self.proc_speed_mbps
    }
    pub fn accuracy(&self) -> f64 {
        self.accuracy
    }
    pub fn verdict(&self) -> Verdict {
        self.verdict
    }
    pub fn extensions(&self) -> &Extensions {
        &self.extensions
    }

    pub fn metric(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Throughput => self.throughput_mbps,
            Metric::LossRate => self.loss_rate,
            Metric::Accuracy => self.accuracy,
            Metric::ProcSpeed => self.proc_speed_mbps,
        }
    }
}

/// The per-record metrics the semantics engine tracks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Throughput,
    LossRate,
    Accuracy,
    ProcSpeed,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::Throughput,
        Metric::LossRate,
        Metric::Accuracy,
        Metric::ProcSpeed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Throughput => "throughput",
            Metric::LossRate => "loss_rate",
            Metric::Accuracy => "accuracy",
            Metric::ProcSpeed => "proc_speed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trend {
    Increasing,
    Decreasing,
    Normal,
}

impl Trend {
    pub fn as_str(self) -> &'static str {
        match self {
            Trend::Increasing => "increasing",
            Trend::Decreasing => "decreasing",
            Trend::Normal => "normal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrustState {
    Trusted,
    Untrusted,
    InsufficientData,
}

impl TrustState {
    pub fn as_str(self) -> &'static str {
        match self {
            TrustState::Trusted => "trusted",
            TrustState::Untrusted => "untrusted",
            TrustState::InsufficientData => "insufficient_data",
        }
    }
}

/// Communication-side trends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommTrends {
    pub throughput: Trend,
    pub loss_rate: Trend,
}

/// Computation-side trends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompTrends {
    pub accuracy: Trend,
    pub proc_speed: Trend,
}

impl CommTrends {
    pub const NORMAL: CommTrends = CommTrends {
        throughput: Trend::Normal,
        loss_rate: Trend::Normal,
    };
}

impl CompTrends {
    pub const NORMAL: CompTrends = CompTrends {
        accuracy: Trend::Normal,
        proc_speed: Trend::Normal,
    };
}

/// Closed time interval covered by the records an assessment was built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub from: Timestamp,
    pub to: Timestamp,
}

/// Task-specific trust assessment of one device.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTrustSemantics")]
pub struct TrustSemantics {
    device: DeviceId,
    task_type: TaskType,
    state: TrustState,
    comm_trends: CommTrends,
    comp_trends: CompTrends,
    window: Option<TimeWindow>,
    extracted_at: Timestamp,
    record_count: u64,
}

#[derive(Debug, Clone, Deserialize)]
struct RawTrustSemantics {
    device: DeviceId,
    task_type: TaskType,
    state: TrustState,
    comm_trends: CommTrends,
    comp_trends: CompTrends,
    window: Option<TimeWindow>,
    extracted_at: Timestamp,
    record_count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SemanticsInvariantError {
    #[error("insufficient_data semantics must carry only normal trends")]
    TrendsWithoutData,
    #[error("window start {from} is after window end {to}")]
    InvertedWindow { from: Timestamp, to: Timestamp },
    #[error("window present but record_count is 0")]
    WindowWithoutRecords,
}

impl TryFrom<RawTrustSemantics> for TrustSemantics {
    type Error = SemanticsInvariantError;

    fn try_from(raw: RawTrustSemantics) -> Result<Self, Self::Error> {
        TrustSemantics::new(
            raw.device,
            raw.task_type,
            raw.state,
            raw.comm_trends,
            raw.comp_trends,
            raw.window,
            raw.extracted_at,
            raw.record_count,
        )
    }
}

impl TrustSemantics {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        device: DeviceId,
        task_type: TaskType,
        state: TrustState,
        comm_trends: CommTrends,
        comp_trends: CompTrends,
        window: Option<TimeWindow>,
        extracted_at: Timestamp,
        record_count: u64,
    ) -> Result<Self, SemanticsInvariantError> {
        if state == TrustState::InsufficientData
            && (comm_trends != CommTrends::NORMAL || comp_trends != CompTrends::NORMAL)
        {
            return Err(SemanticsInvariantError::TrendsWithoutData);
        }
        if let Some(w) = window {
            if w.from > w.to {
                return Err(SemanticsInvariantError::InvertedWindow {
                    from: w.from,
                    to: w.to,
                });
            }
            if record_count == 0 {
                return Err(SemanticsInvariantError::WindowWithoutRecords);
            }
        }
        Ok(TrustSemantics {
            device,
            task_type,
            state,
            comm_trends,
            comp_trends,
            window,
            extracted_at,
            record_count,
        })
    }

    pub fn device(&self) -> &DeviceId {
        &self.device
    }
    pub fn task_type(&self) -> &TaskType {
        &self.task_type
    }
    pub fn state(&self) -> TrustState {
        self.state
    }
    pub fn comm_trends(&self) -> CommTrends {
        self.comm_trends
    }
    pub fn comp_trends(&self) -> CompTrends {
        self.comp_trends
    }
    pub fn window(&self) -> Option<TimeWindow> {
        self.window
    }
    pub fn extracted_at(&self) -> Timestamp {
        self.extracted_at
    }
    pub fn record_count(&self) -> u64 {
        self.record_count
    }

    pub fn trend(&self, metric: Metric) -> Trend {
        match metric {
            Metric::Throughput => self.comm_trends.throughput,
            Metric::LossRate => self.comm_trends.loss_rate,
            Metric::Accuracy => self.comp_trends.accuracy,
            Metric::ProcSpeed => self.comp_trends.proc_speed,
        }
    }

    /// Human-readable rendering in the phrase style devices see, e.g.
    /// `packet loss rate shows a normal trend, throughput shows a decreasing trend`.
    pub fn describe_communication(&self) -> String {
        format!(
            "packet loss rate shows a {} trend, throughput shows a {} trend",
            self.comm_trends.loss_rate.as_str(),
            self.comm_trends.throughput.as_str()
        )
    }

    pub fn describe_computation(&self) -> String {
        format!(
            "accuracy shows a {} trend, task processing speed shows a {} trend",
            self.comp_trends.accuracy.as_str(),
            self.comp_trends.proc_speed.as_str()
        )
    }
}

/// Parses `"1%"`, `"0.01"` or `0.01` into a fraction. Range is checked by the
/// caller.
pub fn parse_fraction(input: &str) -> Result<f64, DomainError> {
    let trimmed = input.trim();
    let err = || DomainError::Unparseable {
        what: "fraction",
        input: input.to_string(),
    };
    if let Some(pct) = trimmed.strip_suffix('%') {
        let v: f64 = pct.trim().parse().map_err(|_| err())?;
        Ok(v / 100.0)
    } else {
        trimmed.parse().map_err(|_| err())
    }
}

/// Parses a clock-rate string such as `"2.91 GHz"` into cycles per second.
pub fn parse_frequency(input: &str) -> Result<f64, DomainError> {
    let err = || DomainError::Unparseable {
        what: "frequency",
        input: input.to_string(),
    };
    let lower = input.trim().to_ascii_lowercase();
    let (num, scale) = if let Some(n) = lower.strip_suffix("ghz") {
        (n, 1e9)
    } else if let Some(n) = lower.strip_suffix("mhz") {
        (n, 1e6)
    } else if let Some(n) = lower.strip_suffix("khz") {
        (n, 1e3)
    } else if let Some(n) = lower.strip_suffix("hz") {
        (n, 1.0)
    } else {
        (lower.as_str(), 1.0)
    };
    let v: f64 = num.trim().parse().map_err(|_| err())?;
    positive("frequency", v * scale)
}

fn fraction_or_percent<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Either {
        Num(f64),
        Text(String),
    }
    match Either::deserialize(d)? {
        Either::Num(v) => Ok(v),
        Either::Text(s) => parse_fraction(&s).map_err(serde::de::Error::custom),
    }
}
