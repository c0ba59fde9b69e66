//! Chain-of-trust task/collaborator matching.
//!
//! A profile is checked against a task through a fixed chain of stages. The
//! value carried from stage to stage is the estimated elapsed time in seconds;
//! the last stage compares it with the task deadline. The chain stops at the
//! first failing stage.

use serde::{Deserialize, Serialize};

use crate::domain::{DeviceId, ResourceProfile, Task, TaskId, Timestamp, BPS_PER_MBPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    /// Maximum age of a resource report, seconds.
    pub staleness_s: f64,
    /// Add a result-download term to the communication stage.
    pub include_result_return: bool,
    /// Result size as a fraction of the input size.
    pub result_size_factor: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            staleness_s: 300.0,
            include_result_return: false,
            result_size_factor: 0.1,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.staleness_s >= 0.0 && self.staleness_s.is_finite()) {
            return Err("matching.staleness_s must be >= 0".into());
        }
        if !(self.result_size_factor >= 0.0 && self.result_size_factor.is_finite()) {
            return Err("matching.result_size_factor must be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Freshness,
    Storage,
    Communication,
    Computation,
    Deadline,
}

impl Stage {
    pub const CHAIN: [Stage; 5] = [
        Stage::Freshness,
        Stage::Storage,
        Stage::Communication,
        Stage::Computation,
        Stage::Deadline,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub stage: Stage,
    pub passed: bool,
    /// Accumulated elapsed-time estimate after this stage, seconds.
    pub carry: f64,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchVerdict {
    pub device: DeviceId,
    pub task_id: TaskId,
    pub stages: Vec<StageResult>,
    pub matched: bool,
}

impl MatchVerdict {
    /// Elapsed-time estimate at the end of the executed chain.
    pub fn carry(&self) -> f64 {
        self.stages.last().map_or(0.0, |s| s.carry)
    }

    pub fn failed_stage(&self) -> Option<Stage> {
        self.stages.iter().find(|s| !s.passed).map(|s| s.stage)
    }
}

/// Upload time in seconds (plus the optional result download).
pub fn transfer_time_s(task: &Task, profile: &ResourceProfile, cfg: &MatchConfig) -> f64 {
    let rate = profile.bandwidth_mbps() * BPS_PER_MBPS;
    let mut t = task.size_bits() / rate;
    if cfg.include_result_return {
        t += task.size_bits() * cfg.result_size_factor / rate;
    }
    t
}

pub fn compute_time_s(task: &Task, profile: &ResourceProfile) -> f64 {
    task.size_bits() * task.density_cpb() / profile.cpu_cps()
}

pub fn evaluate_chain(task: &Task, profile: &ResourceProfile, now: Timestamp, cfg: &MatchConfig) -> MatchVerdict {
    let mut stages = Vec::with_capacity(Stage::CHAIN.len());
    let mut carry = 0.0;
    for stage in Stage::CHAIN {
        let (passed, note) = match stage {
            Stage::Freshness => {
                let age = now.secs_since(profile.updated_at());
                let ok = age <= cfg.staleness_s;
                (ok, format!("report age {age:.3}s, bound {}s", cfg.staleness_s))
            }
            Stage::Storage => {
                let ok = profile.storage_mb() >= task.size_mb();
                (
                    ok,
                    format!("storage {} MB vs task {} MB", profile.storage_mb(), task.size_mb()),
                )
            }
            Stage::Communication => {
                let t = transfer_time_s(task, profile, cfg);
                carry += t;
                (t.is_finite(), format!("transfer {t:.6}s"))
            }
            Stage::Computation => {
                let t = compute_time_s(task, profile);
                carry += t;
                (t.is_finite(), format!("compute {t:.6}s"))
            }
            Stage::Deadline => {
                let ok = carry <= task.deadline_s();
                (ok, format!("estimate {carry:.6}s vs deadline {}s", task.deadline_s()))
            }
        };
        stages.push(StageResult {
            stage,
            passed,
            carry,
            note,
        });
        if !passed {
            break;
        }
    }
    let matched = stages.len() == Stage::CHAIN.len() && stages.iter().all(|s| s.passed);
    MatchVerdict {
        device: profile.device().clone(),
        task_id: task.task_id().clone(),
        stages,
        matched,
    }
}

/// One verdict per profile, in input order.
pub fn match_candidates(
    task: &Task,
    profiles: &[ResourceProfile],
    now: Timestamp,
    cfg: &MatchConfig,
) -> Vec<MatchVerdict> {
    profiles
        .iter()
        .map(|p| evaluate_chain(task, p, now, cfg))
        .collect()
}
