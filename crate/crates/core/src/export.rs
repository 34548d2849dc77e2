//! Training-record construction from retained trajectories.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::TextSegment;
use crate::toolschema::{check_call, ToolCall, ToolDef};
use crate::trajectory::{self, validate_turn_order, Message, Role, SerializeError, Trajectory};

/// Fixed instruction paired with every synthesizer training input.
pub const SYNTH_INSTRUCTION: &str = "Turn the following text into multi-turn tool-use trajectories";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallEncoding {
    /// Call carried in a `tool_call` field.
    #[default]
    Structured,
    /// Call embedded in `content` between `<func>` markers.
    InlineMarkup,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub segment_id: String,
    pub run_id: String,
    /// Pipeline stage that produced the exported trajectory.
    pub stage: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftMessage {
    pub role: Role,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call: Option<ToolCall>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub content_after_call: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub tools: Vec<ToolDef>,
    pub messages: Vec<SftMessage>,
    pub metadata: Provenance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub instruction: String,
    pub input: String,
    /// Tool set plus conversation in the tagged grammar, toolsets first.
    pub output: String,
    pub segment_id: String,
    pub run_id: String,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ExportError {
    #[error("trajectory fails turn order: {0}")]
    TurnOrder(String),
    #[error("tool call does not match tool set: {0}")]
    CallCheck(String),
    #[error("segment `{segment}` does not match trajectory source `{trajectory}`")]
    ProvenanceMismatch { segment: String, trajectory: String },
    #[error("record has no system message")]
    MissingSystem,
    #[error("malformed inline call in message {0}")]
    MalformedInlineCall(usize),
    #[error(transparent)]
    Serialize(#[from] SerializeError),
}

fn ensure_valid(t: &Trajectory, tools: &[ToolDef]) -> Result<(), ExportError> {
    if let Some(d) = validate_turn_order(&t.messages).first() {
        return Err(ExportError::TurnOrder(alloc::format!("{d}")));
    }
    for (_, call) in t.calls() {
        if let Some(d) = check_call(call, tools).diagnostics.first() {
            return Err(ExportError::CallCheck(alloc::format!("{d}")));
        }
    }
    Ok(())
}

fn inline_content(m: &Message, call: &ToolCall) -> String {
    let mut s = m.text.clone();
    s.push_str("\n<func>\n");
    s.push_str(&call.to_json());
    s.push_str("\n</func>");
    if !m.text_after_call.is_empty() {
        s.push('\n');
        s.push_str(&m.text_after_call);
    }
    s
}

/// Converts a validated trajectory to a chat record. The system prompt
/// becomes the first message. Turn order and every call are re-checked.
pub fn to_sft(
    t: &Trajectory,
    tools: &[ToolDef],
    run_id: &str,
    encoding: CallEncoding,
) -> Result<SftRecord, ExportError> {
    ensure_valid(t, tools)?;
    let mut messages = Vec::with_capacity(t.messages.len() + 1);
    messages.push(SftMessage {
        role: Role::System,
        content: t.system.clone(),
        tool_call: None,
        content_after_call: String::new(),
    });
    for m in &t.messages {
        let msg = match (&m.tool_call, encoding) {
            (Some(call), CallEncoding::InlineMarkup) => SftMessage {
                role: m.role,
                content: inline_content(m, call),
                tool_call: None,
                content_after_call: String::new(),
            },
            _ => SftMessage {
                role: m.role,
                content: m.text.clone(),
                tool_call: m.tool_call.clone(),
                content_after_call: m.text_after_call.clone(),
            },
        };
        messages.push(msg);
    }
    Ok(SftRecord {
        tools: tools.to_vec(),
        messages,
        metadata: Provenance {
            segment_id: t.source_segment_id.clone(),
            run_id: run_id.into(),
            stage: "refine".into(),
        },
    })
}

fn split_inline(content: &str) -> Option<(&str, &str, &str)> {
    let open = content.find("<func>")?;
    let close = content[open..].find("</func>")? + open;
    let before = &content[..open];
    let before = before.strip_suffix('\n').unwrap_or(before);
    let body = content[open + "<func>".len()..close].trim();
    let after = &content[close + "</func>".len()..];
    let after = after.strip_prefix('\n').unwrap_or(after);
    Some((before, body, after))
}

/// Rebuilds the trajectory an [`SftRecord`] was exported from, in either
/// call encoding.
pub fn from_sft(record: &SftRecord) -> Result<Trajectory, ExportError> {
    let (first, rest) = record.messages.split_first().ok_or(ExportError::MissingSystem)?;
    if first.role != Role::System {
        return Err(ExportError::MissingSystem);
    }
    let mut messages = Vec::with_capacity(rest.len());
    for (i, m) in rest.iter().enumerate() {
        let inline = m.role == Role::Assistant && m.tool_call.is_none() && m.content.contains("<func>");
        let msg = if inline {
            let (before, body, after) = split_inline(&m.content).ok_or(ExportError::MalformedInlineCall(i))?;
            let call = ToolCall::from_json(body).map_err(|_| ExportError::MalformedInlineCall(i))?;
            Message {
                role: m.role,
                text: before.into(),
                tool_call: Some(call),
                text_after_call: after.into(),
            }
        } else {
            Message {
                role: m.role,
                text: m.content.clone(),
                tool_call: m.tool_call.clone(),
                text_after_call: m.content_after_call.clone(),
            }
        };
        messages.push(msg);
    }
    let mut t = Trajectory::new(first.content.clone(), messages);
    t.source_segment_id = record.metadata.segment_id.clone();
    Ok(t)
}

/// Synthesizer training record: the segment text as input and the tool set
/// plus trajectory, in the tagged grammar, as output.
pub fn to_synth_record(
    segment: &TextSegment,
    tools: &[ToolDef],
    t: &Trajectory,
    run_id: &str,
) -> Result<SynthRecord, ExportError> {
    if segment.id != t.source_segment_id {
        return Err(ExportError::ProvenanceMismatch {
            segment: segment.id.clone(),
            trajectory: t.source_segment_id.clone(),
        });
    }
    let output = trajectory::serialize_trajectory(t, true, Some(tools))?;
    Ok(SynthRecord {
        instruction: SYNTH_INSTRUCTION.into(),
        input: segment.text.clone(),
        output,
        segment_id: segment.id.clone(),
        run_id: run_id.into(),
    })
}
