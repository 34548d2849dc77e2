//! Workflow-extraction output: `<workflow>` blocks carrying a description,
//! step list, execution graph, example actions and tool definitions.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::markup::{self, Found};
use crate::toolschema::{self, ToolCall, ToolDef};

/// Ordered stages of tool names, written `(a)->(b, c)->(d)`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionGraph {
    pub stages: Vec<Vec<String>>,
}

impl ExecutionGraph {
    pub fn nodes(&self) -> impl Iterator<Item = &str> {
        self.stages.iter().flatten().map(String::as_str)
    }
}

impl fmt::Display for ExecutionGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                f.write_str("->")?;
            }
            f.write_str("(")?;
            for (j, node) in stage.iter().enumerate() {
                if j > 0 {
                    f.write_str(", ")?;
                }
                f.write_str(node)?;
            }
            f.write_str(")")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("malformed execution graph: {0}")]
pub struct GraphError(pub String);

fn is_node_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

/// Parses `(a)->(b, c)->..`. A trailing ellipsis stage is ignored;
/// duplicates within a stage collapse to their first occurrence.
pub fn parse_graph(text: &str) -> Result<ExecutionGraph, GraphError> {
    let parts: Vec<&str> = text.trim().split("->").map(str::trim).collect();
    let mut stages = Vec::with_capacity(parts.len());
    for (i, part) in parts.iter().enumerate() {
        let is_last = i + 1 == parts.len();
        if is_last && i > 0 && matches!(*part, ".." | "..." | "\u{2026}") {
            break;
        }
        let inner = part
            .strip_prefix('(')
            .and_then(|p| p.strip_suffix(')'))
            .ok_or_else(|| GraphError(format!("stage `{part}` is not parenthesized")))?;
        let mut stage: Vec<String> = Vec::new();
        for node in inner.split(',').map(str::trim) {
            if !is_node_name(node) {
                return Err(GraphError(format!("bad node name `{node}`")));
            }
            if !stage.iter().any(|n| n == node) {
                stage.push(node.to_string());
            }
        }
        stages.push(stage);
    }
    if stages.is_empty() {
        return Err(GraphError("no stages".into()));
    }
    Ok(ExecutionGraph { stages })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Workflow {
    pub description: String,
    pub steps: Vec<String>,
    pub graph: ExecutionGraph,
    pub actions: Vec<ToolCall>,
    pub tools: Vec<ToolDef>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum WorkflowCode {
    NoWorkflow,
    UnclosedWorkflow,
    MissingSubtag,
    EmptySteps,
    MalformedGraph,
    MalformedActions,
    MalformedToolset,
    GraphNodeUndefined,
    ActionToolUndefined,
}

impl WorkflowCode {
    pub fn as_str(self) -> &'static str {
        match self {
            WorkflowCode::NoWorkflow => "NO_WORKFLOW",
            WorkflowCode::UnclosedWorkflow => "UNCLOSED_WORKFLOW",
            WorkflowCode::MissingSubtag => "MISSING_SUBTAG",
            WorkflowCode::EmptySteps => "EMPTY_STEPS",
            WorkflowCode::MalformedGraph => "MALFORMED_GRAPH",
            WorkflowCode::MalformedActions => "MALFORMED_ACTIONS",
            WorkflowCode::MalformedToolset => "MALFORMED_TOOLSET",
            WorkflowCode::GraphNodeUndefined => "GRAPH_NODE_UNDEFINED",
            WorkflowCode::ActionToolUndefined => "ACTION_TOOL_UNDEFINED",
        }
    }
}

impl fmt::Display for WorkflowCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowDiagnostic {
    /// Zero-based index of the `<workflow>` block in the input.
    pub block: usize,
    pub code: WorkflowCode,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WorkflowBatch {
    pub workflows: Vec<Workflow>,
    pub diagnostics: Vec<WorkflowDiagnostic>,
}

const SUBTAGS: [&str; 5] = ["description", "steps", "execution_graph", "actions", "tools"];

/// Parses every `<workflow>` block. Blocks are independent: a malformed
/// block, or one whose graph or actions reference undefined tools, is
/// reported and dropped while the rest are kept.
pub fn parse_workflows(text: &str) -> WorkflowBatch {
    let mut batch = WorkflowBatch::default();
    let mut from = 0;
    let mut block = 0;
    loop {
        match markup::find_block(text, "workflow", from) {
            Found::Absent => break,
            Found::Unclosed(_) => {
                batch.diagnostics.push(WorkflowDiagnostic {
                    block,
                    code: WorkflowCode::UnclosedWorkflow,
                    detail: "`<workflow>` is never closed".into(),
                });
                break;
            }
            Found::Block(b) => {
                match parse_block(&text[b.body.clone()]) {
                    Ok(w) => {
                        let refs = cross_reference(&w);
                        if refs.is_empty() {
                            batch.workflows.push(w);
                        } else {
                            batch
                                .diagnostics
                                .extend(refs.into_iter().map(|(code, detail)| WorkflowDiagnostic {
                                    block,
                                    code,
                                    detail,
                                }));
                        }
                    }
                    Err((code, detail)) => batch.diagnostics.push(WorkflowDiagnostic { block, code, detail }),
                }
                block += 1;
                from = b.end;
            }
        }
    }
    if block == 0 && batch.diagnostics.is_empty() {
        batch.diagnostics.push(WorkflowDiagnostic {
            block: 0,
            code: WorkflowCode::NoWorkflow,
            detail: "no `<workflow>` block".into(),
        });
    }
    batch
}

fn parse_block(body: &str) -> Result<Workflow, (WorkflowCode, String)> {
    let mut parts: [&str; 5] = [""; 5];
    for (slot, tag) in parts.iter_mut().zip(SUBTAGS) {
        *slot =
            markup::tag_body(body, tag).ok_or_else(|| (WorkflowCode::MissingSubtag, format!("missing `<{tag}>`")))?;
    }
    let [description, steps, graph, actions, tools] = parts;

    let steps = split_steps(steps);
    if steps.is_empty() {
        return Err((WorkflowCode::EmptySteps, "no steps".into()));
    }
    let graph = parse_graph(graph).map_err(|e| (WorkflowCode::MalformedGraph, e.0))?;
    let actions = parse_actions(actions).map_err(|e| (WorkflowCode::MalformedActions, e))?;
    let tools = toolschema::parse_toolset(tools).map_err(|e| (WorkflowCode::MalformedToolset, e.to_string()))?;
    Ok(Workflow {
        description: description.to_string(),
        steps,
        graph,
        actions,
        tools,
    })
}

/// Splits on newlines and on literal `\n` escapes; blank steps are dropped.
pub fn split_steps(text: &str) -> Vec<String> {
    text.split('\n')
        .flat_map(|line| line.split("\\n"))
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

fn parse_actions(text: &str) -> Result<Vec<ToolCall>, String> {
    let cleaned = markup::strip_trailing_commas(text);
    let value: Value = serde_json::from_str(&cleaned).map_err(|e| e.to_string())?;
    serde_json::from_value(value).map_err(|e| e.to_string())
}

fn cross_reference(w: &Workflow) -> Vec<(WorkflowCode, String)> {
    let names: BTreeSet<&str> = w.tools.iter().map(|t| t.name.as_str()).collect();
    let mut out = Vec::new();
    for node in w.graph.nodes() {
        if !names.contains(node) {
            out.push((
                WorkflowCode::GraphNodeUndefined,
                format!("graph node `{node}` has no tool definition"),
            ));
        }
    }
    for action in &w.actions {
        if !names.contains(action.name.as_str()) {
            out.push((
                WorkflowCode::ActionToolUndefined,
                format!("action `{}` has no tool definition", action.name),
            ));
        }
    }
    out
}

/// True iff the graph has at least one non-empty stage and every graph
/// node and action name resolves to a tool of the workflow.
pub fn graph_ok(w: &Workflow) -> bool {
    !w.graph.stages.is_empty() && w.graph.stages.iter().all(|s| !s.is_empty()) && cross_reference(w).is_empty()
}

pub fn serialize_workflow(w: &Workflow) -> String {
    let actions = serde_json::to_string(&w.actions).expect("actions serialize");
    let tools = serde_json::to_string(&w.tools).expect("tools serialize");
    format!(
        "<workflow>\n<description>{}</description>\n<steps>{}</steps>\n<execution_graph>{}</execution_graph>\n<actions>{}</actions>\n<tools>{}</tools>\n</workflow>",
        w.description,
        w.steps.join("\n"),
        w.graph,
        actions,
        tools
    )
}
