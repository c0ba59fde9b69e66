//! Deterministic trust-semantics engine.
//!
//! A device's semantics for one task type combine an overall trust state
//! (fraction of satisfied collaborations) with a per-metric trend label.
//! Trends come from the least-squares slope over record index, normalized by
//! the series mean so the label does not depend on the metric's unit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    CommTrends, CompTrends, DeviceId, Metric, PerformanceRecord, SemanticsInvariantError,
    TaskType, TimeWindow, Timestamp, Trend, TrustSemantics, TrustState,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SemanticsError {
    #[error("series is not sorted by timestamp (index {index})")]
    UnsortedInput { index: usize },
    #[error("records span more than one (collaborator, task type) pair")]
    HeterogeneousInput,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Invariant(#[from] SemanticsInvariantError),
    #[error("remote engine: {0}")]
    Remote(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrendConfig {
    pub n_min: usize,
    pub rel_slope_threshold: f64,
    /// Lower bound on the normalizing mean.
    pub abs_floor: f64,
    /// Per-metric overrides of `abs_floor`.
    pub metric_floors: BTreeMap<Metric, f64>,
}

impl Default for TrendConfig {
    fn default() -> Self {
        TrendConfig {
            n_min: 5,
            rel_slope_threshold: 0.10,
            abs_floor: 1e-6,
            metric_floors: BTreeMap::new(),
        }
    }
}

impl TrendConfig {
    pub fn validate(&self) -> Result<(), SemanticsError> {
        if self.n_min < 2 {
            return Err(SemanticsError::InvalidConfig("trend.n_min must be >= 2".into()));
        }
        if !(self.rel_slope_threshold > 0.0 && self.rel_slope_threshold.is_finite()) {
            return Err(SemanticsError::InvalidConfig(
                "trend.rel_slope_threshold must be > 0".into(),
            ));
        }
        let floors = std::iter::once(self.abs_floor).chain(self.metric_floors.values().copied());
        for f in floors {
            if !(f >= 0.0 && f.is_finite()) {
                return Err(SemanticsError::InvalidConfig("trend floors must be >= 0".into()));
            }
        }
        Ok(())
    }

    pub fn floor_for(&self, metric: Metric) -> f64 {
        self.metric_floors.get(&metric).copied().unwrap_or(self.abs_floor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StateConfig {
    pub n_min: usize,
    /// Minimum satisfied fraction for `trusted`.
    pub trust_threshold: f64,
}

impl Default for StateConfig {
    fn default() -> Self {
        StateConfig {
            n_min: 5,
            trust_threshold: 0.8,
        }
    }
}

impl StateConfig {
    pub fn validate(&self) -> Result<(), SemanticsError> {
        if self.n_min < 1 {
            return Err(SemanticsError::InvalidConfig("state.n_min must be >= 1".into()));
        }
        if !(self.trust_threshold > 0.0 && self.trust_threshold <= 1.0) {
            return Err(SemanticsError::InvalidConfig(
                "state.trust_threshold must be in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Least-squares slope of `values` against their index `0..n`.
///
/// Returns 0 for fewer than two points.
pub fn index_slope(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let x_mean = (n - 1) as f64 / 2.0;
    let y_mean = values.iter().sum::<f64>() / n as f64;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (i, &y) in values.iter().enumerate() {
        let dx = i as f64 - x_mean;
        sxy += dx * (y - y_mean);
        sxx += dx * dx;
    }
    sxy / sxx
}

/// Slope scaled to the whole window and divided by the (floored) mean.
pub fn normalized_slope(values: &[f64], abs_floor: f64) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let slope = index_slope(values);
    let mean = values.iter().sum::<f64>() / n as f64;
    let denom = mean.max(abs_floor);
    let span = slope * (n - 1) as f64;
    if denom > 0.0 {
        span / denom
    } else if span == 0.0 {
        0.0
    } else {
        span.signum() * f64::INFINITY
    }
}

fn classify(s: f64, threshold: f64) -> Trend {
    if s > threshold {
        Trend::Increasing
    } else if s < -threshold {
        Trend::Decreasing
    } else {
        Trend::Normal
    }
}

/// Labels a timestamped series. Series shorter than `cfg.n_min` are `normal`.
pub fn detect_trend(series: &[(Timestamp, f64)], cfg: &TrendConfig) -> Result<Trend, SemanticsError> {
    detect_trend_with_floor(series, cfg, cfg.abs_floor)
}

fn detect_trend_with_floor(
    series: &[(Timestamp, f64)],
    cfg: &TrendConfig,
    floor: f64,
) -> Result<Trend, SemanticsError> {
    if let Some(index) = series.windows(2).position(|w| w[1].0 < w[0].0) {
        return Err(SemanticsError::UnsortedInput { index: index + 1 });
    }
    if series.len() < cfg.n_min {
        return Ok(Trend::Normal);
    }
    let values: Vec<f64> = series.iter().map(|&(_, v)| v).collect();
    Ok(classify(normalized_slope(&values, floor), cfg.rel_slope_threshold))
}

/// Overall state from the satisfied fraction. All records must share one
/// collaborator and task type.
pub fn aggregate_state(records: &[PerformanceRecord], cfg: &StateConfig) -> Result<TrustState, SemanticsError> {
    check_homogeneous(records)?;
    if records.len() < cfg.n_min {
        return Ok(TrustState::InsufficientData);
    }
    let satisfied = records.iter().filter(|r| r.verdict().is_satisfied()).count();
    let fraction = satisfied as f64 / records.len() as f64;
    Ok(if fraction >= cfg.trust_threshold {
        TrustState::Trusted
    } else {
        TrustState::Untrusted
    })
}

fn check_homogeneous(records: &[PerformanceRecord]) -> Result<(), SemanticsError> {
    if let Some(first) = records.first() {
        let mixed = records
            .iter()
            .any(|r| r.collaborator() != first.collaborator() || r.task_type() != first.task_type());
        if mixed {
            return Err(SemanticsError::HeterogeneousInput);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub trend: TrendConfig,
    pub state: StateConfig,
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), SemanticsError> {
        self.trend.validate()?;
        self.state.validate()
    }
}

/// Builds the full semantics for `device` on `task_type` from its records
/// (ascending timestamps, already filtered to that pair).
pub fn extract_semantics(
    device: &DeviceId,
    task_type: &TaskType,
    records: &[PerformanceRecord],
    cfg: &EngineConfig,
    now: Timestamp,
) -> Result<TrustSemantics, SemanticsError> {
    if records
        .iter()
        .any(|r| r.collaborator() != device || r.task_type() != task_type)
    {
        return Err(SemanticsError::HeterogeneousInput);
    }
    let state = aggregate_state(records, &cfg.state)?;
    let trend_of = |metric: Metric| -> Result<Trend, SemanticsError> {
        let series: Vec<(Timestamp, f64)> =
            records.iter().map(|r| (r.at(), r.metric(metric))).collect();
        detect_trend_with_floor(&series, &cfg.trend, cfg.trend.floor_for(metric))
    };
    let (comm, comp) = if state == TrustState::InsufficientData {
        // Still surfaces unsorted input.
        trend_of(Metric::Throughput)?;
        (CommTrends::NORMAL, CompTrends::NORMAL)
    } else {
        (
            CommTrends {
                throughput: trend_of(Metric::Throughput)?,
                loss_rate: trend_of(Metric::LossRate)?,
            },
            CompTrends {
                accuracy: trend_of(Metric::Accuracy)?,
                proc_speed: trend_of(Metric::ProcSpeed)?,
            },
        )
    };
    let window = match (records.first(), records.last()) {
        (Some(f), Some(l)) => Some(TimeWindow {
            from: f.at(),
            to: l.at(),
        }),
        _ => None,
    };
    Ok(TrustSemantics::new(
        device.clone(),
        task_type.clone(),
        state,
        comm,
        comp,
        window,
        now,
        records.len() as u64,
    )?)
}

/// Anything that can turn a device's records into trust semantics.
pub trait SemanticsEngine: Send + Sync {
    fn extract(
        &self,
        device: &DeviceId,
        task_type: &TaskType,
        records: &[PerformanceRecord],
        now: Timestamp,
    ) -> Result<TrustSemantics, SemanticsError>;

    fn name(&self) -> &str;
}

/// The reference engine: a pure function of its inputs and config.
#[derive(Debug, Clone, Default)]
pub struct DeterministicEngine {
    cfg: EngineConfig,
}

impl DeterministicEngine {
    pub fn new(cfg: EngineConfig) -> Result<Self, SemanticsError> {
        cfg.validate()?;
        Ok(DeterministicEngine { cfg })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }
}

impl SemanticsEngine for DeterministicEngine {
    fn extract(
        &self,
        device: &DeviceId,
        task_type: &TaskType,
        records: &[PerformanceRecord],
        now: Timestamp,
    ) -> Result<TrustSemantics, SemanticsError> {
        extract_semantics(device, task_type, records, &self.cfg, now)
    }

    fn name(&self) -> &str {
        "deterministic"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{RecordMetrics, Verdict};

    fn series(values: &[f64]) -> Vec<(Timestamp, f64)> {
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| (Timestamp(i as i64 * 1000), v))
            .collect()
    }

    fn rec(i: i64, satisfied: bool, tp: f64, loss: f64) -> PerformanceRecord {
        PerformanceRecord::new(
            DeviceId::new("a_i").unwrap(),
            DeviceId::new("a_j").unwrap(),
            TaskType::face_recognition(),
            Timestamp(i * 1000),
            RecordMetrics {
                throughput_mbps: tp,
                loss_rate: loss,
                proc_speed_mbps: 2.0,
                accuracy: 0.98,
            },
            if satisfied {
                Verdict::Satisfied
            } else {
                Verdict::Unsatisfied
            },
        )
        .unwrap()
    }

    #[test]
    fn flat_series_is_normal() {
        let cfg = TrendConfig::default();
        assert_eq!(detect_trend(&series(&[1.0; 5]), &cfg).unwrap(), Trend::Normal);
    }

    #[test]
    fn rising_loss_is_increasing() {
        let cfg = TrendConfig::default();
        let s = [0.01, 0.02, 0.03, 0.04, 0.05];
        // slope 0.01 over 4 steps, mean 0.03
        assert!((normalized_slope(&s, 1e-6) - 0.01 * 4.0 / 0.03).abs() < 1e-12);
        assert_eq!(detect_trend(&series(&s), &cfg).unwrap(), Trend::Increasing);
    }

    #[test]
    fn falling_throughput_is_decreasing() {
        let cfg = TrendConfig::default();
        let s = [100.0, 95.0, 90.0, 85.0, 80.0];
        assert!((normalized_slope(&s, 1e-6) + 5.0 * 4.0 / 90.0).abs() < 1e-12);
        assert_eq!(detect_trend(&series(&s), &cfg).unwrap(), Trend::Decreasing);
    }

    #[test]
    fn short_series_is_normal() {
        let cfg = TrendConfig::default();
        assert_eq!(
            detect_trend(&series(&[1.0, 50.0, 900.0]), &cfg).unwrap(),
            Trend::Normal
        );
    }

    #[test]
    fn unsorted_series_rejected() {
        let cfg = TrendConfig::default();
        let s = vec![(Timestamp(5), 1.0), (Timestamp(3), 1.0)];
        assert_eq!(
            detect_trend(&s, &cfg).unwrap_err(),
            SemanticsError::UnsortedInput { index: 1 }
        );
    }

    #[test]
    fn zero_mean_uses_floor() {
        let cfg = TrendConfig {
            abs_floor: 0.0,
            ..TrendConfig::default()
        };
        assert_eq!(detect_trend(&series(&[0.0; 6]), &cfg).unwrap(), Trend::Normal);
        let s = [-0.2, -0.1, 0.0, 0.1, 0.2];
        assert_eq!(detect_trend(&series(&s), &cfg).unwrap(), Trend::Increasing);
    }

    #[test]
    fn state_thresholds() {
        let cfg = StateConfig::default();
        let all: Vec<_> = (0..10).map(|i| rec(i, true, 100.0, 0.01)).collect();
        assert_eq!(aggregate_state(&all, &cfg).unwrap(), TrustState::Trusted);
        assert_eq!(
            aggregate_state(&all[..3], &cfg).unwrap(),
            TrustState::InsufficientData
        );
        let seven: Vec<_> = (0..10).map(|i| rec(i, i < 7, 100.0, 0.01)).collect();
        assert_eq!(aggregate_state(&seven, &cfg).unwrap(), TrustState::Untrusted);
        let eight: Vec<_> = (0..10).map(|i| rec(i, i < 8, 100.0, 0.01)).collect();
        assert_eq!(aggregate_state(&eight, &cfg).unwrap(), TrustState::Trusted);
    }

    #[test]
    fn mixed_collaborators_rejected() {
        let mut recs: Vec<_> = (0..5).map(|i| rec(i, true, 100.0, 0.01)).collect();
        recs.push(
            PerformanceRecord::new(
                DeviceId::new("a_i").unwrap(),
                DeviceId::new("a_k").unwrap(),
                TaskType::face_recognition(),
                Timestamp(99),
                RecordMetrics {
                    throughput_mbps: 1.0,
                    loss_rate: 0.0,
                    proc_speed_mbps: 1.0,
                    accuracy: 1.0,
                },
                Verdict::Satisfied,
            )
            .unwrap(),
        );
        assert_eq!(
            aggregate_state(&recs, &StateConfig::default()).unwrap_err(),
            SemanticsError::HeterogeneousInput
        );
    }

    #[test]
    fn degrading_throughput_history() {
        let records: Vec<_> = (0..10)
            .map(|i| rec(i, true, 100.0 - 3.0 * i as f64, 0.01))
            .collect();
        let ts = extract_semantics(
            &DeviceId::new("a_j").unwrap(),
            &TaskType::face_recognition(),
            &records,
            &EngineConfig::default(),
            Timestamp(20_000),
        )
        .unwrap();
        assert_eq!(ts.state(), TrustState::Trusted);
        assert_eq!(ts.comm_trends().loss_rate, Trend::Normal);
        assert_eq!(ts.comm_trends().throughput, Trend::Decreasing);
        assert_eq!(ts.comp_trends(), CompTrends::NORMAL);
        assert_eq!(ts.record_count(), 10);
        assert_eq!(
            ts.window(),
            Some(TimeWindow {
                from: Timestamp(0),
                to: Timestamp(9000)
            })
        );
        assert_eq!(
            ts.describe_communication(),
            "packet loss rate shows a normal trend, throughput shows a decreasing trend"
        );
    }

    #[test]
    fn empty_history_is_insufficient() {
        let ts = extract_semantics(
            &DeviceId::new("a_j").unwrap(),
            &TaskType::face_recognition(),
            &[],
            &EngineConfig::default(),
            Timestamp(0),
        )
        .unwrap();
        assert_eq!(ts.state(), TrustState::InsufficientData);
        assert_eq!(ts.comm_trends(), CommTrends::NORMAL);
        assert_eq!(ts.record_count(), 0);
        assert_eq!(ts.window(), None);
    }

    #[test]
    fn insufficient_state_forces_normal_trends() {
        let cfg = EngineConfig {
            trend: TrendConfig {
                n_min: 2,
                ..TrendConfig::default()
            },
            state: StateConfig {
                n_min: 10,
                ..StateConfig::default()
            },
        };
        let records: Vec<_> = (0..4).map(|i| rec(i, true, 100.0 - 20.0 * i as f64, 0.01)).collect();
        let ts = extract_semantics(
            &DeviceId::new("a_j").unwrap(),
            &TaskType::face_recognition(),
            &records,
            &cfg,
            Timestamp(0),
        )
        .unwrap();
        assert_eq!(ts.state(), TrustState::InsufficientData);
        assert_eq!(ts.comm_trends(), CommTrends::NORMAL);
    }

    #[test]
    fn config_validation() {
        assert!(TrendConfig {
            n_min: 1,
            ..TrendConfig::default()
        }
        .validate()
        .is_err());
        assert!(StateConfig {
            trust_threshold: 0.0,
            ..StateConfig::default()
        }
        .validate()
        .is_err());
        assert!(DeterministicEngine::new(EngineConfig::default()).is_ok());
    }
}
