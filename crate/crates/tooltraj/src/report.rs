//! Dataset statistics over pipeline records.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tooltraj_core::analytics::{
    compare_refinement, compute_stats_with, dataset_stats, DatasetStats, RefinementComparison, StatsOptions,
};

use crate::io::IoError;
use crate::pipeline::{PipelineRecord, RecordStatus};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub options: StatsOptions,
    /// Retained trajectories.
    pub trajectories: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refined: Option<DatasetStats>,
    /// Drafts of the retained trajectories.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub draft: Option<DatasetStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refinement: Option<RefinementComparison>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_toolset_size: Option<f64>,
}

/// One CSV row per retained trajectory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsRow {
    pub key: String,
    pub segment_id: String,
    pub messages: usize,
    pub distinct_tools: usize,
    pub tool_calls: usize,
    pub rounds: usize,
    pub toolset_size: usize,
    pub draft_messages: Option<usize>,
    pub draft_distinct_tools: Option<usize>,
    pub draft_tool_calls: Option<usize>,
}

pub fn stats_report(records: &[PipelineRecord], count_system: bool, bin_width: usize) -> (StatsReport, Vec<StatsRow>) {
    let options = StatsOptions { count_system };
    let mut refined = Vec::new();
    let mut drafts = Vec::new();
    let mut rows = Vec::new();
    let mut toolset_total = 0usize;
    for rec in records.iter().filter(|r| r.status == RecordStatus::Retained) {
        let Some(t) = &rec.refined else { continue };
        let s = compute_stats_with(t, options);
        let d = rec.draft.as_ref().map(|d| compute_stats_with(d, options));
        let toolset_size = rec.toolset.as_ref().map_or(0, Vec::len);
        toolset_total += toolset_size;
        refined.push(s);
        if let Some(d) = d {
            drafts.push(d);
        }
        rows.push(StatsRow {
            key: rec.key.clone(),
            segment_id: rec.segment.id.clone(),
            messages: s.num_messages,
            distinct_tools: s.num_distinct_tools_called,
            tool_calls: s.num_tool_calls,
            rounds: s.num_rounds,
            toolset_size,
            draft_messages: d.map(|d| d.num_messages),
            draft_distinct_tools: d.map(|d| d.num_distinct_tools_called),
            draft_tool_calls: d.map(|d| d.num_tool_calls),
        });
    }
    let comparable = drafts.len() == refined.len();
    let report = StatsReport {
        options,
        trajectories: refined.len(),
        refined: dataset_stats(&refined, bin_width),
        draft: dataset_stats(&drafts, bin_width),
        refinement: comparable.then(|| compare_refinement(&drafts, &refined).ok()).flatten(),
        mean_toolset_size: (!refined.is_empty()).then(|| toolset_total as f64 / refined.len() as f64),
    };
    (report, rows)
}

pub fn write_table(path: &Path, rows: &[StatsRow]) -> Result<(), IoError> {
    let werr = |e: csv::Error| IoError::Write {
        path: path.to_path_buf(),
        source: e.into(),
    };
    let mut w = csv::Writer::from_path(path).map_err(werr)?;
    if rows.is_empty() {
        w.write_record([
            "key",
            "segment_id",
            "messages",
            "distinct_tools",
            "tool_calls",
            "rounds",
            "toolset_size",
            "draft_messages",
            "draft_distinct_tools",
            "draft_tool_calls",
        ])
        .map_err(werr)?;
    }
    for r in rows {
        w.serialize(r).map_err(werr)?;
    }
    w.flush().map_err(|source| IoError::Write {
        path: path.to_path_buf(),
        source,
    })
}
