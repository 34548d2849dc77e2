//! Per-trajectory counts, dataset aggregates and the before/after
//! refinement comparison.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::trajectory::{Role, Trajectory};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsOptions {
    /// Count the system prompt as a message.
    pub count_system: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryStats {
    pub num_messages: usize,
    pub num_distinct_tools_called: usize,
    pub num_tool_calls: usize,
    /// Messages grouped per user turn.
    pub num_rounds: usize,
}

pub fn compute_stats(t: &Trajectory) -> TrajectoryStats {
    compute_stats_with(t, StatsOptions::default())
}

pub fn compute_stats_with(t: &Trajectory, opts: StatsOptions) -> TrajectoryStats {
    let mut names = BTreeSet::new();
    let mut calls = 0;
    let mut rounds = 0;
    for m in &t.messages {
        if m.role == Role::User {
            rounds += 1;
        }
        if let Some(c) = &m.tool_call {
            calls += 1;
            names.insert(c.name.as_str());
        }
    }
    TrajectoryStats {
        num_messages: t.messages.len() + usize::from(opts.count_system),
        num_distinct_tools_called: names.len(),
        num_tool_calls: calls,
        num_rounds: rounds,
    }
}

/// Means of the three headline dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Means {
    pub messages: f64,
    pub distinct_tools: f64,
    pub tool_calls: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: usize,
    /// Lower bin edge → count. Empty bins are omitted.
    pub bins: BTreeMap<usize, usize>,
}

impl Histogram {
    pub fn build(values: impl IntoIterator<Item = usize>, bin_width: usize) -> Self {
        let bin_width = bin_width.max(1);
        let mut bins = BTreeMap::new();
        for v in values {
            *bins.entry(v / bin_width * bin_width).or_insert(0) += 1;
        }
        Histogram { bin_width, bins }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Range {
    pub min: usize,
    pub max: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub count: usize,
    pub means: Means,
    pub mean_rounds: f64,
    pub messages: Range,
    pub distinct_tools: Range,
    pub tool_calls: Range,
    pub hist_messages: Histogram,
    pub hist_distinct_tools: Histogram,
    pub hist_tool_calls: Histogram,
}

fn mean(values: &[usize]) -> f64 {
    // Integer sum keeps the mean independent of input order.
    let total: u128 = values.iter().map(|&v| v as u128).sum();
    total as f64 / values.len() as f64
}

fn range(values: &[usize]) -> Range {
    Range {
        min: values.iter().copied().min().unwrap_or(0),
        max: values.iter().copied().max().unwrap_or(0),
    }
}

/// `None` for an empty list.
pub fn dataset_stats(stats: &[TrajectoryStats], bin_width: usize) -> Option<DatasetStats> {
    if stats.is_empty() {
        return None;
    }
    let msgs: Vec<usize> = stats.iter().map(|s| s.num_messages).collect();
    let tools: Vec<usize> = stats.iter().map(|s| s.num_distinct_tools_called).collect();
    let calls: Vec<usize> = stats.iter().map(|s| s.num_tool_calls).collect();
    let rounds: Vec<usize> = stats.iter().map(|s| s.num_rounds).collect();
    Some(DatasetStats {
        count: stats.len(),
        means: Means {
            messages: mean(&msgs),
            distinct_tools: mean(&tools),
            tool_calls: mean(&calls),
        },
        mean_rounds: mean(&rounds),
        messages: range(&msgs),
        distinct_tools: range(&tools),
        tool_calls: range(&calls),
        hist_messages: Histogram::build(msgs.iter().copied(), bin_width),
        hist_distinct_tools: Histogram::build(tools.iter().copied(), bin_width),
        hist_tool_calls: Histogram::build(calls.iter().copied(), bin_width),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Increased {
    pub messages: bool,
    pub distinct_tools: bool,
    pub tool_calls: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementComparison {
    pub before: Means,
    pub after: Means,
    pub delta: Means,
    pub increased: Increased,
}

pub fn compare_means(before: Means, after: Means) -> RefinementComparison {
    let delta = Means {
        messages: after.messages - before.messages,
        distinct_tools: after.distinct_tools - before.distinct_tools,
        tool_calls: after.tool_calls - before.tool_calls,
    };
    RefinementComparison {
        before,
        after,
        delta,
        increased: Increased {
            messages: delta.messages > 0.0,
            distinct_tools: delta.distinct_tools > 0.0,
            tool_calls: delta.tool_calls > 0.0,
        },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
#[error("cannot compare an empty list of trajectory statistics")]
pub struct EmptyStats;

pub fn compare_refinement(
    before: &[TrajectoryStats],
    after: &[TrajectoryStats],
) -> Result<RefinementComparison, EmptyStats> {
    let b = dataset_stats(before, 1).ok_or(EmptyStats)?;
    let a = dataset_stats(after, 1).ok_or(EmptyStats)?;
    Ok(compare_means(b.means, a.means))
}
