//! Device-side student agent: picks one collaborator out of a bundle.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{DeviceId, Metric, Trend};
use crate::teacher::{Candidate, CandidateBundle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    #[default]
    TrendAverse,
    FirstMatch,
    RandomSeeded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecisionPolicy {
    pub kind: PolicyKind,
    /// Direction of change the student considers bad, per metric.
    pub adverse: BTreeMap<Metric, Trend>,
    pub seed: u64,
    /// Refuse to pick anyone when every candidate shows an adverse trend.
    pub strict_trends: bool,
}

impl Default for DecisionPolicy {
    fn default() -> Self {
        DecisionPolicy {
            kind: PolicyKind::TrendAverse,
            adverse: default_adverse(),
            seed: 0,
            strict_trends: false,
        }
    }
}

pub fn default_adverse() -> BTreeMap<Metric, Trend> {
    BTreeMap::from([
        (Metric::LossRate, Trend::Increasing),
        (Metric::Throughput, Trend::Decreasing),
        (Metric::Accuracy, Trend::Decreasing),
        (Metric::ProcSpeed, Trend::Decreasing),
    ])
}

impl DecisionPolicy {
    pub fn of_kind(kind: PolicyKind) -> Self {
        DecisionPolicy {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.adverse.len() != Metric::ALL.len() {
            return Err("student.adverse must name all four metrics".into());
        }
        if self.adverse.values().any(|t| *t == Trend::Normal) {
            return Err("student.adverse directions must be increasing or decreasing".into());
        }
        Ok(())
    }

    /// How many of the candidate's trends point the adverse way.
    pub fn adverse_count(&self, c: &Candidate) -> usize {
        self.adverse
            .iter()
            .filter(|(m, dir)| c.semantics.trend(**m) == **dir)
            .count()
    }
}

/// Final pick. `None` only for an empty bundle (or, with `strict_trends`,
/// when every candidate shows an adverse trend).
pub fn decide(bundle: &CandidateBundle, policy: &DecisionPolicy) -> Option<DeviceId> {
    let mut sorted: Vec<&Candidate> = bundle.candidates().iter().collect();
    sorted.sort_by(|a, b| a.device().cmp(b.device()));
    match policy.kind {
        PolicyKind::FirstMatch => sorted.first().map(|c| c.device().clone()),
        PolicyKind::RandomSeeded => {
            if sorted.is_empty() {
                return None;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(policy.seed ^ fnv1a(bundle.task_id().as_str()));
            Some(sorted[rng.random_range(0..sorted.len())].device().clone())
        }
        PolicyKind::TrendAverse => {
            if let Some(clean) = sorted.iter().find(|c| policy.adverse_count(c) == 0) {
                return Some(clean.device().clone());
            }
            if policy.strict_trends {
                return None;
            }
            sorted
                .iter()
                .min_by(|a, b| {
                    policy
                        .adverse_count(a)
                        .cmp(&policy.adverse_count(b))
                        .then_with(|| a.device().cmp(b.device()))
                })
                .map(|c| c.device().clone())
        }
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{CommTrends, CompTrends, TaskId, TaskType, Timestamp, TrustSemantics, TrustState};

    fn cand(d: &str, comm: CommTrends, comp: CompTrends) -> Candidate {
        Candidate {
            semantics: TrustSemantics::new(
                DeviceId::new(d).unwrap(),
                TaskType::video_transcoding(),
                TrustState::Trusted,
                comm,
                comp,
                None,
                Timestamp(0),
                0,
            )
            .unwrap(),
            matched: true,
            stages: vec![],
        }
    }

    fn bundle(c: Vec<Candidate>) -> CandidateBundle {
        CandidateBundle::new(TaskId::new("c2").unwrap(), c, Timestamp(0)).unwrap()
    }

    const LOSS_UP: CommTrends = CommTrends {
        throughput: Trend::Normal,
        loss_rate: Trend::Increasing,
    };

    #[test]
    fn avoids_rising_loss() {
        let b = bundle(vec![
            cand("a_j", LOSS_UP, CompTrends::NORMAL),
            cand("a_k", CommTrends::NORMAL, CompTrends::NORMAL),
        ]);
        assert_eq!(decide(&b, &DecisionPolicy::default()).unwrap().as_str(), "a_k");
        assert_eq!(
            decide(&b, &DecisionPolicy::of_kind(PolicyKind::FirstMatch)).unwrap().as_str(),
            "a_j"
        );
    }

    #[test]
    fn empty_bundle_is_none() {
        for kind in [PolicyKind::TrendAverse, PolicyKind::FirstMatch, PolicyKind::RandomSeeded] {
            assert_eq!(decide(&bundle(vec![]), &DecisionPolicy::of_kind(kind)), None);
        }
    }

    #[test]
    fn all_adverse_falls_back_to_least_adverse() {
        let two = CommTrends {
            throughput: Trend::Decreasing,
            loss_rate: Trend::Increasing,
        };
        let b = bundle(vec![
            cand("x", two, CompTrends::NORMAL),
            cand("y", LOSS_UP, CompTrends::NORMAL),
        ]);
        assert_eq!(decide(&b, &DecisionPolicy::default()).unwrap().as_str(), "y");
        let strict = DecisionPolicy {
            strict_trends: true,
            ..DecisionPolicy::default()
        };
        assert_eq!(decide(&b, &strict), None);
    }

    #[test]
    fn increasing_throughput_is_not_adverse() {
        let up = CommTrends {
            throughput: Trend::Increasing,
            loss_rate: Trend::Decreasing,
        };
        let b = bundle(vec![cand("a", up, CompTrends::NORMAL)]);
        assert_eq!(DecisionPolicy::default().adverse_count(&b.candidates()[0]), 0);
    }

    #[test]
    fn random_policy_is_reproducible() {
        let b = bundle(
            (0..8)
                .map(|i| cand(&format!("d{i}"), CommTrends::NORMAL, CompTrends::NORMAL))
                .collect(),
        );
        let p = DecisionPolicy {
            kind: PolicyKind::RandomSeeded,
            seed: 42,
            ..DecisionPolicy::default()
        };
        let first = decide(&b, &p);
        for _ in 0..5 {
            assert_eq!(decide(&b, &p), first);
        }
        assert!(b.devices().contains(&first.as_ref().unwrap()));
    }

    #[test]
    fn policy_validation() {
        assert!(DecisionPolicy::default().validate().is_ok());
        let mut p = DecisionPolicy::default();
        p.adverse.remove(&Metric::Accuracy);
        assert!(p.validate().is_err());
    }
}
