//! CSV export of simulation results and the run manifest.
//!
//! Column layouts are listed in `docs/csv_schema.md`; bump
//! [`CSV_SCHEMA_VERSION`] whenever one changes.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::simulation::{MethodSummary, MetricsReport, TaskMetrics};

pub const CSV_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// One line of the metrics CSV. `row_kind` is `task` or `aggregate`; columns
/// that do not apply to a kind are left empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub row_kind: String,
    pub method: String,
    pub seed: Option<u64>,
    pub device_count: Option<usize>,
    pub task_index: Option<usize>,
    pub task_id: Option<String>,
    pub owner: Option<String>,
    pub task_type: Option<String>,
    pub retrieved: Option<usize>,
    pub bundle_size: Option<usize>,
    pub evaluation_time_sim_s: Option<f64>,
    pub data_collection_events: Option<u64>,
    pub messages: Option<u64>,
    pub selected: Option<String>,
    pub correct: Option<bool>,
    pub tasks: Option<usize>,
    pub scored_tasks: Option<usize>,
    pub correct_tasks: Option<usize>,
    pub selection_accuracy: Option<f64>,
    pub records_generated: Option<u64>,
    pub records_ingested: Option<u64>,
}

pub const METRICS_HEADER: &str = "row_kind,method,seed,device_count,task_index,task_id,owner,task_type,retrieved,bundle_size,evaluation_time_sim_s,data_collection_events,messages,selected,correct,tasks,scored_tasks,correct_tasks,selection_accuracy,records_generated,records_ingested";

impl MetricsRow {
    fn empty(kind: &str, method: &str) -> Self {
        MetricsRow {
            row_kind: kind.into(),
            method: method.into(),
            seed: None,
            device_count: None,
            task_index: None,
            task_id: None,
            owner: None,
            task_type: None,
            retrieved: None,
            bundle_size: None,
            evaluation_time_sim_s: None,
            data_collection_events: None,
            messages: None,
            selected: None,
            correct: None,
            tasks: None,
            scored_tasks: None,
            correct_tasks: None,
            selection_accuracy: None,
            records_generated: None,
            records_ingested: None,
        }
    }

    pub fn from_task(t: &TaskMetrics) -> Self {
        MetricsRow {
            seed: Some(t.seed),
            device_count: Some(t.device_count),
            task_index: Some(t.task_index),
            task_id: Some(t.task_id.clone()),
            owner: Some(t.owner.to_string()),
            task_type: Some(t.task_type.to_string()),
            retrieved: Some(t.retrieved),
            bundle_size: Some(t.bundle_size),
            evaluation_time_sim_s: Some(t.evaluation_time_sim_s),
            data_collection_events: Some(t.data_collection_events),
            messages: Some(t.messages),
            selected: t.selected.as_ref().map(|d| d.to_string()),
            correct: t.correct,
            ..Self::empty("task", t.method.as_str())
        }
    }

    pub fn from_summary(s: &MethodSummary) -> Self {
        MetricsRow {
            seed: s.seed,
            device_count: Some(s.device_count),
            evaluation_time_sim_s: Some(s.mean_evaluation_time_s),
            data_collection_events: Some(s.data_collection_events),
            tasks: Some(s.tasks),
            scored_tasks: Some(s.scored_tasks),
            correct_tasks: Some(s.correct_tasks),
            selection_accuracy: s.selection_accuracy,
            records_generated: Some(s.records_generated),
            records_ingested: Some(s.records_ingested),
            ..Self::empty("aggregate", s.method.as_str())
        }
    }
}

/// Task rows first, then the aggregate block.
pub fn write_metrics_csv<W: Write>(report: &MetricsReport, out: W) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_writer(out);
    for t in &report.tasks {
        w.serialize(MetricsRow::from_task(t))?;
    }
    for s in &report.summaries {
        w.serialize(MetricsRow::from_summary(s))?;
    }
    if report.tasks.is_empty() && report.summaries.is_empty() {
        w.write_record(METRICS_HEADER.split(','))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: std::io::Read>(input: R) -> Result<Vec<MetricsRow>, ReportError> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationTimeRow {
    pub device_count: usize,
    pub method: String,
    pub mean_evaluation_time_s: f64,
    pub tasks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionRow {
    pub device_count: usize,
    pub method: String,
    pub data_collection_events: u64,
    pub events_per_task: f64,
    pub tasks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub device_count: usize,
    pub method: String,
    /// Empty for the pooled row.
    pub seed: Option<u64>,
    pub scored_tasks: usize,
    pub correct_tasks: usize,
    pub selection_accuracy: Option<f64>,
}

pub const EVALUATION_TIME_CSV: &str = "evaluation_time.csv";
pub const DATA_COLLECTION_CSV: &str = "data_collection.csv";
pub const ACCURACY_CSV: &str = "accuracy.csv";

pub fn evaluation_time_rows(sweep: &[(usize, MetricsReport)]) -> Vec<EvaluationTimeRow> {
    pooled(sweep)
        .map(|(n, s)| EvaluationTimeRow {
            device_count: n,
            method: s.method.as_str().into(),
            mean_evaluation_time_s: s.mean_evaluation_time_s,
            tasks: s.tasks,
        })
        .collect()
}

pub fn collection_rows(sweep: &[(usize, MetricsReport)]) -> Vec<CollectionRow> {
    pooled(sweep)
        .map(|(n, s)| CollectionRow {
            device_count: n,
            method: s.method.as_str().into(),
            data_collection_events: s.data_collection_events,
            events_per_task: if s.tasks == 0 {
                0.0
            } else {
                s.data_collection_events as f64 / s.tasks as f64
            },
            tasks: s.tasks,
        })
        .collect()
}

pub fn accuracy_rows(sweep: &[(usize, MetricsReport)]) -> Vec<AccuracyRow> {
    sweep
        .iter()
        .flat_map(|(n, r)| {
            r.summaries.iter().map(move |s| AccuracyRow {
                device_count: *n,
                method: s.method.as_str().into(),
                seed: s.seed,
                scored_tasks: s.scored_tasks,
                correct_tasks: s.correct_tasks,
                selection_accuracy: s.selection_accuracy,
            })
        })
        .collect()
}

fn pooled(sweep: &[(usize, MetricsReport)]) -> impl Iterator<Item = (usize, &MethodSummary)> {
    sweep
        .iter()
        .flat_map(|(n, r)| r.summaries.iter().filter(|s| s.seed.is_none()).map(move |s| (*n, s)))
}

pub fn write_rows<T: Serialize, W: Write>(rows: &[T], out: W) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub seeds: u32,
    pub config_sha256: String,
    pub csv_schema_version: u32,
    pub engine: String,
    pub outputs: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::{run_scenario, ScenarioConfig};

    fn small() -> ScenarioConfig {
        ScenarioConfig {
            device_count: 6,
            task_count: 12,
            warmup_rounds: 6,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn header_matches_documented_schema() {
        let r = run_scenario(&small()).unwrap();
        let mut buf = Vec::new();
        write_metrics_csv(&r, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), METRICS_HEADER);
    }

    #[test]
    fn rows_round_trip() {
        let r = run_scenario(&small()).unwrap();
        let mut buf = Vec::new();
        write_metrics_csv(&r, &mut buf).unwrap();
        let rows = read_metrics_csv(buf.as_slice()).unwrap();
        assert_eq!(rows.len(), r.tasks.len() + r.summaries.len());
        assert_eq!(rows[0], MetricsRow::from_task(&r.tasks[0]));
        assert_eq!(rows.last().unwrap(), &MetricsRow::from_summary(r.summaries.last().unwrap()));
    }

    #[test]
    fn empty_report_still_has_header() {
        let r = MetricsReport {
            tasks: vec![],
            summaries: vec![],
        };
        let mut buf = Vec::new();
        write_metrics_csv(&r, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().trim_end(), METRICS_HEADER);
    }
}
