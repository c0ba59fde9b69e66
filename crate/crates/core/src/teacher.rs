//! Server-side teacher agent.
//!
//! Ingestion: resource reports go to the key-value store; each performance
//! record is appended to the history, the collaborator's recent window is
//! re-read, and its semantics leaf is re-extracted.
//!
//! Requests: the task type's leaves are read from the tree, the requester is
//! dropped, stored resources are matched against the task, and only trusted
//! and matching devices are returned. Serving a request reads the memory
//! module only.

use std::collections::HashMap;
use std::num::NonZeroUsize;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DeviceId, PerformanceRecord, ResourceProfile, Task, TaskId, TaskType, Timestamp, TrustSemantics, TrustState};
use crate::matching::{match_candidates, MatchConfig, MatchVerdict, Stage, StageResult};
use crate::memory::{HistoryQuery, HistoryWindow, MemoryError, MemoryModule, RecordId};
use crate::semantics::{SemanticsEngine, SemanticsError};

#[derive(Debug, Error)]
pub enum TeacherError {
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Semantics(#[from] SemanticsError),
}

impl TeacherError {
    pub fn code(&self) -> &'static str {
        match self {
            TeacherError::Memory(e) => e.code(),
            TeacherError::Semantics(SemanticsError::UnsortedInput { .. }) => "unsorted_input",
            TeacherError::Semantics(SemanticsError::HeterogeneousInput) => "heterogeneous_input",
            TeacherError::Semantics(_) => "semantics",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    /// How many of a collaborator's newest records feed one extraction.
    pub history_window_k: usize,
    /// Re-extract on every n-th record per (device, task type); 1 = always.
    pub extract_every: u32,
    /// History retention horizon in ms; `None` keeps everything.
    pub retention_ms: Option<i64>,
    pub matching: MatchConfig,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            history_window_k: 20,
            extract_every: 1,
            retention_ms: None,
            matching: MatchConfig::default(),
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.history_window_k == 0 {
            return Err("teacher.history_window_k must be >= 1".into());
        }
        if self.extract_every == 0 {
            return Err("teacher.extract_every must be >= 1".into());
        }
        self.matching.validate()
    }
}

/// One transferred candidate: its semantics with the match result folded in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub semantics: TrustSemantics,
    pub matched: bool,
    pub stages: Vec<StageResult>,
}

impl Candidate {
    pub fn device(&self) -> &DeviceId {
        self.semantics.device()
    }
}

/// What the teacher sends back to a requesting student.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBundle")]
pub struct CandidateBundle {
    task_id: TaskId,
    candidates: Vec<Candidate>,
    generated_at: Timestamp,
}

#[derive(Deserialize)]
struct RawBundle {
    task_id: TaskId,
    candidates: Vec<Candidate>,
    generated_at: Timestamp,
}

impl TryFrom<RawBundle> for CandidateBundle {
    type Error = String;

    fn try_from(raw: RawBundle) -> Result<Self, String> {
        CandidateBundle::new(raw.task_id, raw.candidates, raw.generated_at)
    }
}

impl CandidateBundle {
    /// Every candidate must be trusted and matched; order is by device id
    /// with no repeats.
    pub fn new(task_id: TaskId, candidates: Vec<Candidate>, generated_at: Timestamp) -> Result<Self, String> {
        for c in &candidates {
            if !c.matched || c.semantics.state() != TrustState::Trusted {
                return Err(format!("candidate {} is not trusted and matched", c.device()));
            }
        }
        if candidates.windows(2).any(|w| w[0].device() >= w[1].device()) {
            return Err("candidates not strictly ordered by device".into());
        }
        Ok(CandidateBundle {
            task_id,
            candidates,
            generated_at,
        })
    }

    pub fn empty(task_id: TaskId, generated_at: Timestamp) -> Self {
        CandidateBundle {
            task_id,
            candidates: Vec::new(),
            generated_at,
        }
    }

    pub fn task_id(&self) -> &TaskId {
        &self.task_id
    }
    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }
    pub fn generated_at(&self) -> Timestamp {
        self.generated_at
    }
    pub fn devices(&self) -> Vec<&DeviceId> {
        self.candidates.iter().map(Candidate::device).collect()
    }
    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
    pub fn len(&self) -> usize {
        self.candidates.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Exclusion {
    Owner,
    NotTrusted(TrustState),
    NoMatch(Stage),
}

/// How one stored device fared during a request.
#[derive(Debug, Clone, PartialEq)]
pub struct Assessment {
    pub semantics: TrustSemantics,
    pub verdict: Option<MatchVerdict>,
    pub excluded: Option<Exclusion>,
}

/// Full trace of a request; `bundle` is what gets transferred.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestTrace {
    pub bundle: CandidateBundle,
    pub assessments: Vec<Assessment>,
    /// Tree entries under the task type, owner included.
    pub retrieved: usize,
}

pub struct Teacher {
    memory: MemoryModule,
    engine: Box<dyn SemanticsEngine>,
    cfg: TeacherConfig,
    pending: Mutex<HashMap<(DeviceId, TaskType), Arc<Mutex<u32>>>>,
}

impl std::fmt::Debug for Teacher {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Teacher")
            .field("engine", &self.engine.name())
            .field("cfg", &self.cfg)
            .field("memory", &self.memory.stats())
            .finish()
    }
}

impl Teacher {
    pub fn new(engine: Box<dyn SemanticsEngine>, cfg: TeacherConfig) -> Self {
        let memory = MemoryModule::with_retention(cfg.retention_ms);
        Self::with_memory(memory, engine, cfg)
    }

    pub fn with_memory(memory: MemoryModule, engine: Box<dyn SemanticsEngine>, cfg: TeacherConfig) -> Self {
        Teacher {
            memory,
            engine,
            cfg,
            pending: Mutex::new(HashMap::new()),
        }
    }

    pub fn memory(&self) -> &MemoryModule {
        &self.memory
    }

    pub fn config(&self) -> &TeacherConfig {
        &self.cfg
    }

    pub fn engine_name(&self) -> &str {
        self.engine.name()
    }

    pub fn handle_resource_report(&self, profile: ResourceProfile) -> Result<(), TeacherError> {
        Ok(self.memory.upsert_resources(profile)?)
    }

    /// Stores the record and refreshes the collaborator's semantics leaf.
    pub fn handle_performance_record(&self, record: PerformanceRecord) -> Result<TrustSemantics, TeacherError> {
        self.ingest(record).map(|(_, ts)| ts)
    }

    pub fn ingest(&self, record: PerformanceRecord) -> Result<(RecordId, TrustSemantics), TeacherError> {
        let device = record.collaborator().clone();
        let task_type = record.task_type().clone();
        let key = (device.clone(), task_type.clone());
        let slot = self.pending.lock().entry(key).or_default().clone();
        // Serializes extraction per (device, task type).
        let mut pending = slot.lock();
        let id = self.memory.append_record(record)?;
        if self.cfg.retention_ms.is_some() {
            self.memory.prune_history();
        }
        *pending += 1;
        let existing = self.memory.get_semantics(&task_type, &device);
        if *pending < self.cfg.extract_every {
            if let Some(existing) = existing {
                return Ok((id, existing));
            }
        } else {
            *pending = 0;
        }
        let ts = self.extract(&device, &task_type)?;
        self.memory.upsert_semantics(ts.clone());
        Ok((id, ts))
    }

    /// Re-extracts every pair with deferred records.
    pub fn flush(&self) -> Result<usize, TeacherError> {
        let keys: Vec<(DeviceId, TaskType)> = self.pending.lock().keys().cloned().collect();
        let mut refreshed = 0;
        for (device, task_type) in keys {
            let slot = self.pending.lock().get(&(device.clone(), task_type.clone())).cloned();
            let Some(slot) = slot else { continue };
            let mut pending = slot.lock();
            if *pending == 0 {
                continue;
            }
            *pending = 0;
            let ts = self.extract(&device, &task_type)?;
            self.memory.upsert_semantics(ts);
            refreshed += 1;
        }
        Ok(refreshed)
    }

    fn window_query(&self, device: &DeviceId, task_type: &TaskType) -> HistoryQuery {
        HistoryQuery {
            collaborator: device.clone(),
            task_type: task_type.clone(),
            window: HistoryWindow::LastK(NonZeroUsize::new(self.cfg.history_window_k).unwrap_or(NonZeroUsize::MIN)),
        }
    }

    /// Extraction timestamp is the newest record in the window, so the leaf
    /// depends only on the stored history.
    fn extract(&self, device: &DeviceId, task_type: &TaskType) -> Result<TrustSemantics, TeacherError> {
        let records = self.memory.query_records(&self.window_query(device, task_type));
        let as_of = records.last().map(|r| r.at()).unwrap_or_default();
        Ok(self.engine.extract(device, task_type, &records, as_of)?)
    }

    pub fn handle_task_request(&self, task: &Task, now: Timestamp) -> CandidateBundle {
        self.evaluate_request(task, now).bundle
    }

    pub fn evaluate_request(&self, task: &Task, now: Timestamp) -> RequestTrace {
        let stored = self.memory.get_semantics_by_task_type(task.task_type());
        let retrieved = stored.len();
        let mut assessments = Vec::with_capacity(stored.len());
        let mut others = Vec::with_capacity(stored.len());
        for ts in stored {
            if ts.device() == task.owner() {
                assessments.push(Assessment {
                    semantics: ts,
                    verdict: None,
                    excluded: Some(Exclusion::Owner),
                });
            } else {
                others.push(ts);
            }
        }
        let devices: Vec<DeviceId> = others.iter().map(|t| t.device().clone()).collect();
        let lookup = self.memory.get_resources(&devices);
        let verdicts = match_candidates(task, &lookup.found, now, &self.cfg.matching);
        let mut by_device: HashMap<DeviceId, MatchVerdict> =
            verdicts.into_iter().map(|v| (v.device.clone(), v)).collect();

        let mut candidates = Vec::new();
        for ts in others {
            let verdict = by_device
                .remove(ts.device())
                .unwrap_or_else(|| missing_profile_verdict(ts.device(), task));
            let excluded = if ts.state() != TrustState::Trusted {
                Some(Exclusion::NotTrusted(ts.state()))
            } else if !verdict.matched {
                Some(Exclusion::NoMatch(verdict.failed_stage().unwrap_or(Stage::Freshness)))
            } else {
                None
            };
            if excluded.is_none() {
                candidates.push(Candidate {
                    semantics: ts.clone(),
                    matched: true,
                    stages: verdict.stages.clone(),
                });
            }
            assessments.push(Assessment {
                semantics: ts,
                verdict: Some(verdict),
                excluded,
            });
        }
        assessments.sort_by(|a, b| a.semantics.device().cmp(b.semantics.device()));
        let bundle = CandidateBundle::new(task.task_id().clone(), candidates, now)
            .expect("tree order is device order");
        RequestTrace {
            bundle,
            assessments,
            retrieved,
        }
    }
}

fn missing_profile_verdict(device: &DeviceId, task: &Task) -> MatchVerdict {
    MatchVerdict {
        device: device.clone(),
        task_id: task.task_id().clone(),
        stages: vec![StageResult {
            stage: Stage::Freshness,
            passed: false,
            carry: 0.0,
            note: "no resource report on record".into(),
        }],
        matched: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{RecordMetrics, Verdict};
    use crate::semantics::{DeterministicEngine, EngineConfig};

    fn dev(s: &str) -> DeviceId {
        DeviceId::new(s).unwrap()
    }

    fn teacher() -> Teacher {
        Teacher::new(Box::new(DeterministicEngine::default()), TeacherConfig::default())
    }

    fn rec(owner: &str, collab: &str, tt: TaskType, at: i64, ok: bool) -> PerformanceRecord {
        PerformanceRecord::new(
            dev(owner),
            dev(collab),
            tt,
            Timestamp(at),
            RecordMetrics {
                throughput_mbps: 100.0,
                loss_rate: 0.01,
                proc_speed_mbps: 2.0,
                accuracy: 0.98,
            },
            if ok { Verdict::Satisfied } else { Verdict::Unsatisfied },
        )
        .unwrap()
    }

    #[test]
    fn first_record_is_cold_start() {
        let t = teacher();
        let ts = t
            .handle_performance_record(rec("a_i", "a_j", TaskType::face_recognition(), 1, true))
            .unwrap();
        assert_eq!(ts.state(), TrustState::InsufficientData);
        assert_eq!(ts.record_count(), 1);
        assert_eq!(t.memory().stats().tree_nodes, 4);
    }

    #[test]
    fn window_caps_at_k() {
        let t = teacher();
        let mut last = None;
        for i in 0..20 {
            last = Some(
                t.handle_performance_record(rec("a_i", "a_j", TaskType::face_recognition(), i * 1000, true))
                    .unwrap(),
            );
        }
        assert_eq!(last.unwrap().record_count(), 20);
        let ts = t
            .handle_performance_record(rec("a_i", "a_j", TaskType::face_recognition(), 20_000, true))
            .unwrap();
        assert_eq!(ts.record_count(), 20);
        assert_eq!(ts.window().unwrap().from, Timestamp(1000));
        assert_eq!(ts.state(), TrustState::Trusted);
    }

    #[test]
    fn duplicate_record_propagates() {
        let t = teacher();
        let r = rec("a_i", "a_j", TaskType::face_recognition(), 1, true);
        t.handle_performance_record(r.clone()).unwrap();
        let err = t.handle_performance_record(r).unwrap_err();
        assert_eq!(err.code(), "duplicate_record");
    }

    #[test]
    fn stale_report_rejected() {
        let t = teacher();
        let p = ResourceProfile::new(dev("a_k"), 1e10, 100.0, 100.0, Timestamp(10)).unwrap();
        t.handle_resource_report(p.clone()).unwrap();
        let err = t.handle_resource_report(p.touched(Timestamp(5))).unwrap_err();
        assert_eq!(err.code(), "stale_update");
        assert_eq!(t.memory().get_resources(&[dev("a_k")]).found, vec![p]);
    }

    #[test]
    fn debounced_extraction_defers_until_nth_record() {
        let cfg = TeacherConfig {
            extract_every: 3,
            ..TeacherConfig::default()
        };
        let t = Teacher::new(Box::new(DeterministicEngine::new(EngineConfig::default()).unwrap()), cfg);
        let fr = TaskType::face_recognition();
        assert_eq!(t.handle_performance_record(rec("a_i", "a_j", fr.clone(), 0, true)).unwrap().record_count(), 1);
        assert_eq!(t.handle_performance_record(rec("a_i", "a_j", fr.clone(), 1, true)).unwrap().record_count(), 1);
        assert_eq!(t.handle_performance_record(rec("a_i", "a_j", fr.clone(), 2, true)).unwrap().record_count(), 3);
        t.handle_performance_record(rec("a_i", "a_j", fr.clone(), 3, true)).unwrap();
        assert_eq!(t.flush().unwrap(), 1);
        assert_eq!(t.memory().get_semantics(&fr, &dev("a_j")).unwrap().record_count(), 4);
    }

    #[test]
    fn unknown_task_type_gives_empty_bundle() {
        let t = teacher();
        let task = Task::new(TaskId::new("x").unwrap(), dev("a_i"), TaskType::text_word_count(), 1.0, 1.0, 1.0).unwrap();
        let b = t.handle_task_request(&task, Timestamp(0));
        assert!(b.is_empty());
        assert_eq!(b.task_id().as_str(), "x");
    }

    #[test]
    fn bundle_rejects_unqualified_candidates() {
        let ts = TrustSemantics::new(
            dev("a_k"),
            TaskType::face_recognition(),
            TrustState::Untrusted,
            crate::domain::CommTrends::NORMAL,
            crate::domain::CompTrends::NORMAL,
            None,
            Timestamp(0),
            0,
        )
        .unwrap();
        let c = Candidate {
            semantics: ts,
            matched: true,
            stages: vec![],
        };
        assert!(CandidateBundle::new(TaskId::new("t").unwrap(), vec![c], Timestamp(0)).is_err());
    }
}
