//! Argument grounding and the hallucination judge's verdict.
//!
//! A scalar argument value is grounded when its canonical rendering occurs
//! in the dialogue before the call (system prompt plus every earlier
//! message, calls included), when it is a declared enum member, or when it
//! is structural (boolean, null, empty string).

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use serde_json::{Number, Value};

use crate::markup;
use crate::toolschema::{ParamSchema, ToolDef};
use crate::trajectory::{Message, Trajectory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UngroundedValue {
    /// Index of the assistant message carrying the call.
    pub index: usize,
    pub tool: String,
    /// Argument path, e.g. `filters.city` or `ids[2]`.
    pub path: String,
    pub value: Value,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundingReport {
    pub ungrounded: Vec<UngroundedValue>,
}

impl GroundingReport {
    pub fn is_clean(&self) -> bool {
        self.ungrounded.is_empty()
    }
}

/// Rendering used for substring matching. Integral numbers print without a
/// decimal point; other numbers use the shortest round-trip form.
pub fn render_number(n: &Number) -> String {
    if let Some(f) = n.as_f64().filter(|_| n.is_f64()) {
        if f.is_finite() && f == (f as i64) as f64 && f.abs() < 9.0e15 {
            return format!("{}", f as i64);
        }
    }
    n.to_string()
}

/// Text a message contributes to the grounding context.
pub fn message_context(m: &Message) -> String {
    let mut s = m.text.clone();
    if let Some(call) = &m.tool_call {
        s.push('\n');
        s.push_str(&call.to_json());
    }
    if !m.text_after_call.is_empty() {
        s.push('\n');
        s.push_str(&m.text_after_call);
    }
    s
}

/// Checks every argument value of every call against the context that
/// precedes it.
pub fn ground_check(t: &Trajectory, tools: &[ToolDef]) -> GroundingReport {
    let mut report = GroundingReport::default();
    let mut context = t.system.clone();
    for (index, m) in t.messages.iter().enumerate() {
        if let Some(call) = &m.tool_call {
            let tool = tools.iter().find(|d| d.name == call.name);
            for (name, value) in &call.arguments {
                let schema = tool.and_then(|d| d.param(name));
                walk(value, schema, name, &context, &mut |path, v| {
                    report.ungrounded.push(UngroundedValue {
                        index,
                        tool: call.name.clone(),
                        path,
                        value: v.clone(),
                    })
                });
            }
        }
        context.push('\n');
        context.push_str(&message_context(m));
    }
    report
}

fn walk(
    value: &Value,
    schema: Option<&ParamSchema>,
    path: &str,
    context: &str,
    report: &mut dyn FnMut(String, &Value),
) {
    let in_enum = schema
        .and_then(|s| s.enum_values.as_ref())
        .is_some_and(|members| members.contains(value));
    match value {
        Value::Null | Value::Bool(_) => {}
        Value::String(s) => {
            if !s.is_empty() && !in_enum && !context.contains(s.as_str()) {
                report(path.to_string(), value);
            }
        }
        Value::Number(n) => {
            if !in_enum && !context.contains(render_number(n).as_str()) {
                report(path.to_string(), value);
            }
        }
        Value::Array(items) => {
            let item_schema = schema.and_then(|s| s.items.as_deref());
            for (i, item) in items.iter().enumerate() {
                walk(item, item_schema, &format!("{path}[{i}]"), context, report);
            }
        }
        Value::Object(map) => {
            for (k, v) in map {
                let field = schema.and_then(|s| s.properties.as_ref()).and_then(|p| p.get(k));
                walk(v, field, &format!("{path}.{k}"), context, report);
            }
        }
    }
}

/// Binary rubric scores: tool-call, capability and context hallucination
/// (1 = no hallucination).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    #[serde(rename = "R1")]
    pub r1: u8,
    #[serde(rename = "R2")]
    pub r2: u8,
    #[serde(rename = "R3")]
    pub r3: u8,
}

/// Which rubric scores must be 1 for a trajectory to be kept.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgePolicy {
    #[default]
    RequireAll,
    RequireR1,
}

impl JudgeVerdict {
    pub const PASS: JudgeVerdict = JudgeVerdict { r1: 1, r2: 1, r3: 1 };

    pub fn passes(&self, policy: JudgePolicy) -> bool {
        match policy {
            JudgePolicy::RequireAll => self.r1 == 1 && self.r2 == 1 && self.r3 == 1,
            JudgePolicy::RequireR1 => self.r1 == 1,
        }
    }

    /// Names of the rubrics scored 0.
    pub fn failed(&self) -> Vec<&'static str> {
        [("R1", self.r1), ("R2", self.r2), ("R3", self.r3)]
            .into_iter()
            .filter(|(_, v)| *v == 0)
            .map(|(k, _)| k)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum VerdictError {
    #[error("no JSON object with R1/R2/R3 keys found")]
    NoObject,
    #[error("verdict is missing key {0}")]
    MissingKey(&'static str),
    #[error("verdict key {key} has non-binary value {value}")]
    NonBinary { key: &'static str, value: String },
}

const RUBRIC_KEYS: [&str; 3] = ["R1", "R2", "R3"];

/// Extracts the first JSON object carrying any rubric key from raw judge
/// output (code fences, prose and trailing commas are tolerated). Each of
/// R1, R2, R3 must be present with integer value 0 or 1.
pub fn parse_judge_verdict(text: &str) -> Result<JudgeVerdict, VerdictError> {
    let cleaned = markup::strip_trailing_commas(text);
    for (pos, _) in cleaned.match_indices('{') {
        let Some(Value::Object(obj)) = markup::json_prefix(&cleaned, pos) else {
            continue;
        };
        if !RUBRIC_KEYS.iter().any(|k| obj.contains_key(*k)) {
            continue;
        }
        let mut scores = [0u8; 3];
        for (slot, key) in scores.iter_mut().zip(RUBRIC_KEYS) {
            let v = obj.get(key).ok_or(VerdictError::MissingKey(key))?;
            *slot = match v.as_u64() {
                Some(0) => 0,
                Some(1) => 1,
                _ => {
                    return Err(VerdictError::NonBinary {
                        key,
                        value: v.to_string(),
                    })
                }
            };
        }
        return Ok(JudgeVerdict {
            r1: scores[0],
            r2: scores[1],
            r3: scores[2],
        });
    }
    Err(VerdictError::NoObject)
}

/// Retention rule: no structural diagnostics, every call valid, and either
/// no judge or a verdict with every score 1.
pub fn passes_validation<D>(structural: &[D], calls_ok: bool, verdict: Option<&JudgeVerdict>) -> bool {
    passes_validation_with(structural, calls_ok, verdict, JudgePolicy::RequireAll)
}

pub fn passes_validation_with<D>(
    structural: &[D],
    calls_ok: bool,
    verdict: Option<&JudgeVerdict>,
    policy: JudgePolicy,
) -> bool {
    structural.is_empty() && calls_ok && verdict.is_none_or(|v| v.passes(policy))
}
