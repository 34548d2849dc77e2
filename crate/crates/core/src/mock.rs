//! Deterministic, template-driven stand-in for the chat model.
//!
//! [`mock_generate`] reads the same prompts a real model would get (it finds
//! its inputs under the section headings of [`crate::prompts`]) and answers
//! in the stage's output grammar. Output depends only on
//! `(stage, input, seed)`. With a non-zero fault rate some outputs carry one
//! injected defect of a class the validators are expected to catch; the
//! fault draw is a function of the same triple, so a defect is reproduced
//! on every retry of an identical request.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::corpus::{render_annotation, SegmentAnnotation, DOMAINS, TASKS};
use crate::grounding::JudgeVerdict;
use crate::prompts::{self, section};
use crate::stage::Stage;
use crate::toolschema::{self, InputSchema, ParamSchema, ParamType, ToolCall, ToolDef};
use crate::trajectory::{self, Message, Role, Trajectory};
use crate::workflow::{serialize_workflow, ExecutionGraph, Workflow};

/// Defect classes the mock can inject.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Defect {
    UnclosedTag,
    CrossedTags,
    UnknownTool,
    MissingRequired,
    UngroundedValue,
    VerdictZero,
}

impl Defect {
    pub const ALL: [Defect; 6] = [
        Defect::UnclosedTag,
        Defect::CrossedTags,
        Defect::UnknownTool,
        Defect::MissingRequired,
        Defect::UngroundedValue,
        Defect::VerdictZero,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Defect::UnclosedTag => "unclosed_tag",
            Defect::CrossedTags => "crossed_tags",
            Defect::UnknownTool => "unknown_tool",
            Defect::MissingRequired => "missing_required",
            Defect::UngroundedValue => "ungrounded_value",
            Defect::VerdictZero => "verdict_zero",
        }
    }

    pub fn applies_to(self, stage: Stage) -> bool {
        match self {
            Defect::VerdictZero => stage == Stage::Judge,
            _ => matches!(stage, Stage::Generate | Stage::Refine),
        }
    }

    /// Drop-reason code a validator reports for this defect.
    pub fn reason_code(self) -> &'static str {
        match self {
            Defect::UnclosedTag => "UNCLOSED_TAG",
            Defect::CrossedTags => "CROSSED_TAGS",
            Defect::UnknownTool => "UNKNOWN_TOOL",
            Defect::MissingRequired => "MISSING_REQUIRED",
            Defect::UngroundedValue => "UNGROUNDED_VALUE",
            Defect::VerdictZero => "JUDGE_REJECTED",
        }
    }
}

impl fmt::Display for Defect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("unknown defect `{0}`")]
pub struct UnknownDefect(pub String);

impl FromStr for Defect {
    type Err = UnknownDefect;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Defect::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| UnknownDefect(s.into()))
    }
}

/// Fault injection settings. Empty `stages` / `defects` mean "all".
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultConfig {
    #[serde(default)]
    pub rate: f64,
    #[serde(default)]
    pub stages: Vec<Stage>,
    #[serde(default)]
    pub defects: Vec<Defect>,
}

impl FaultConfig {
    pub fn none() -> Self {
        FaultConfig::default()
    }

    pub fn only(rate: f64, defect: Defect) -> Self {
        FaultConfig {
            rate,
            stages: Vec::new(),
            defects: vec![defect],
        }
    }

    fn candidates(&self, stage: Stage) -> Vec<Defect> {
        if !self.stages.is_empty() && !self.stages.contains(&stage) {
            return Vec::new();
        }
        let pool: &[Defect] = if self.defects.is_empty() {
            &Defect::ALL
        } else {
            &self.defects
        };
        pool.iter().copied().filter(|d| d.applies_to(stage)).collect()
    }
}

fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for b in part.iter().chain(&[0xff]) {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

fn rng_for(stage: Stage, input: &str, seed: u64, stream: &[u8]) -> ChaCha8Rng {
    let h = fnv1a(&[stage.as_str().as_bytes(), input.as_bytes(), &seed.to_le_bytes(), stream]);
    ChaCha8Rng::seed_from_u64(h)
}

/// Fault-free output for `stage`.
pub fn mock_generate(stage: Stage, input: &str, seed: u64) -> String {
    mock_generate_with(stage, input, seed, &FaultConfig::none())
}

/// Output for `stage`, possibly carrying one injected defect.
pub fn mock_generate_with(stage: Stage, input: &str, seed: u64, faults: &FaultConfig) -> String {
    let mut rng = rng_for(stage, input, seed, b"content");
    let defect = pick_defect(stage, input, seed, faults);
    match stage {
        Stage::Annotate => annotate(input, &mut rng),
        Stage::Extract => extract(input, &mut rng),
        Stage::Generate => {
            let tools = prompt_tools(input);
            let source = section(input, prompts::SOURCE_HEADING).unwrap_or(input);
            let t = draft(&tools, source, &mut rng);
            finish_conversation(t, &tools, None, defect, &mut rng)
        }
        Stage::Refine => {
            let mut tools = prompt_tools(input);
            let draft_text = section(input, prompts::TRAJECTORY_HEADING).unwrap_or("");
            let t = refine(&mut tools, draft_text, &mut rng);
            finish_conversation(t, &tools.clone(), Some(&tools), defect, &mut rng)
        }
        Stage::Judge => {
            let mut v = JudgeVerdict::PASS;
            if defect == Some(Defect::VerdictZero) {
                match rng.gen_range(0..3) {
                    0 => v.r1 = 0,
                    1 => v.r2 = 0,
                    _ => v.r3 = 0,
                }
            }
            serde_json::to_string(&v).expect("verdict serializes")
        }
    }
}

/// Defect injected for this request, if any.
pub fn pick_defect(stage: Stage, input: &str, seed: u64, faults: &FaultConfig) -> Option<Defect> {
    if faults.rate <= 0.0 {
        return None;
    }
    let candidates = faults.candidates(stage);
    if candidates.is_empty() {
        return None;
    }
    let mut rng = rng_for(stage, input, seed, b"fault");
    if rng.gen::<f64>() >= faults.rate {
        return None;
    }
    Some(candidates[rng.gen_range(0..candidates.len())])
}

const VERBS: [&str; 24] = [
    "search", "get", "create", "update", "delete", "book", "cancel", "check", "send", "list", "open", "submit",
    "verify", "add", "remove", "set", "schedule", "pay", "login", "upload", "download", "confirm", "select", "track",
];

const NOUNS: [&str; 16] = [
    "order",
    "account",
    "ticket",
    "booking",
    "item",
    "device",
    "report",
    "payment",
    "profile",
    "message",
    "file",
    "appointment",
    "shipment",
    "invoice",
    "room",
    "task",
];

const MARKERS: [&str; 8] = [
    "step",
    "then",
    "next",
    "finally",
    "first",
    "after that",
    "afterwards",
    "once",
];

fn procedural_lines(text: &str) -> Vec<&str> {
    text.split(['\n', '.', ';'])
        .map(str::trim)
        .filter(|s| s.len() > 3)
        .collect()
}

fn procedural_score(text: &str) -> usize {
    let lower = text.to_lowercase();
    let mut score = MARKERS.iter().map(|m| lower.matches(m).count()).sum::<usize>();
    for line in text.lines() {
        let l = line.trim_start();
        let numbered = l.chars().next().is_some_and(|c| c.is_ascii_digit())
            && l.chars()
                .find(|c| !c.is_ascii_digit())
                .is_some_and(|c| c == '.' || c == ')');
        if numbered || l.starts_with("- ") || l.starts_with("* ") {
            score += 1;
        }
    }
    score
}

fn keyword_label(lower: &str, table: &[(&[&str], &'static str)]) -> Option<&'static str> {
    table
        .iter()
        .find(|(words, _)| words.iter().any(|w| lower.contains(w)))
        .map(|(_, label)| *label)
}

fn annotate(input: &str, rng: &mut ChaCha8Rng) -> String {
    let text = section(input, prompts::SOURCE_HEADING).unwrap_or(input);
    if procedural_score(text) < 2 {
        return render_annotation(&SegmentAnnotation::not_multi_step());
    }
    let lower = text.to_lowercase();
    let domain = keyword_label(
        &lower,
        &[
            (&["order", "cart", "shop", "checkout"], "shopping"),
            (&["flight", "hotel", "trip", "train"], "travel_and_transportation"),
            (&["bank", "payment", "invoice", "transfer"], "finance"),
            (&["recipe", "cook", "restaurant"], "food_and_drink"),
            (&["router", "wifi", "sim", "network"], "internet_and_telecom"),
        ],
    )
    .unwrap_or(DOMAINS[rng.gen_range(0..DOMAINS.len())]);
    let platform = keyword_label(
        &lower,
        &[
            (&["phone", "mobile", "app "], "phone"),
            (&["website", "browser", "page"], "operator"),
            (&["robot", "elevator", "machine", "printer"], "machine"),
        ],
    )
    .unwrap_or("computer");
    let task = keyword_label(
        &lower,
        &[
            (&["order", "cart", "checkout"], "ecommerce_and_retail"),
            (&["flight", "hotel", "trip"], "travel_and_transportation"),
            (&["calendar", "meeting", "appointment"], "calendar_management"),
            (&["file", "folder", "upload"], "file_systems"),
            (&["support", "refund", "complaint"], "customer_support"),
        ],
    )
    .unwrap_or(TASKS[rng.gen_range(0..TASKS.len())]);
    let summary = procedural_lines(text)
        .first()
        .map(|s| s.chars().take(120).collect::<String>())
        .unwrap_or_else(|| "Multi-step procedure".into());
    render_annotation(&SegmentAnnotation {
        multi_step: true,
        summary: Some(summary),
        domains: vec![domain.into()],
        platform: Some(platform.into()),
        task_category: Some(task.into()),
    })
}

fn words(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_ascii_alphabetic())
        .filter(|w| w.len() > 2)
        .map(str::to_ascii_lowercase)
        .collect()
}

fn tool_name_for(step: &str, rng: &mut ChaCha8Rng) -> (String, String) {
    let ws = words(step);
    let verb_pos = ws.iter().position(|w| VERBS.contains(&w.as_str()));
    let verb = verb_pos
        .map(|i| ws[i].clone())
        .unwrap_or_else(|| VERBS[rng.gen_range(0..VERBS.len())].into());
    let noun = verb_pos
        .and_then(|i| ws.get(i + 1..))
        .and_then(|rest| {
            rest.iter()
                .find(|w| !matches!(w.as_str(), "the" | "and" | "for" | "your" | "with"))
        })
        .filter(|w| w.len() <= 12)
        .cloned()
        .unwrap_or_else(|| NOUNS[rng.gen_range(0..NOUNS.len())].into());
    (verb, noun)
}

fn make_tool(verb: &str, noun: &str, rng: &mut ChaCha8Rng) -> ToolDef {
    let id = format!("{noun}_id");
    let mut props = alloc::collections::BTreeMap::new();
    props.insert(
        id.clone(),
        ParamSchema::new(ParamType::String, format!("Identifier of the {noun}")),
    );
    let mut required = vec![id];
    match rng.gen_range(0..4) {
        0 => {
            props.insert(
                "limit".into(),
                ParamSchema::new(ParamType::Integer, "Maximum number of results"),
            );
        }
        1 => {
            props.insert(
                "priority".into(),
                ParamSchema::new(ParamType::String, "Handling priority")
                    .with_enum(vec![json!("standard"), json!("express")]),
            );
            required.push("priority".into());
        }
        2 => {
            props.insert(
                "tags".into(),
                ParamSchema::new(ParamType::Array, "Labels to apply")
                    .with_items(ParamSchema::new(ParamType::String, "")),
            );
        }
        _ => {
            props.insert("amount".into(), ParamSchema::new(ParamType::Number, "Amount in USD"));
        }
    }
    if rng.gen_bool(0.5) {
        props.insert(
            "notify".into(),
            ParamSchema::new(ParamType::Boolean, "Send a confirmation"),
        );
    }
    ToolDef {
        name: format!("{verb}_{noun}"),
        description: format!("{} a {noun}", capitalize(verb)),
        input_schema: InputSchema {
            ty: "object".into(),
            properties: props,
            required,
        },
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn extract(input: &str, rng: &mut ChaCha8Rng) -> String {
    let text = section(input, prompts::SOURCE_HEADING).unwrap_or(input);
    let mut steps: Vec<String> = procedural_lines(text)
        .into_iter()
        .take(6)
        .map(|s| s.chars().take(100).collect())
        .collect();
    while steps.len() < 2 {
        steps.push(format!(
            "{} the {}",
            capitalize(VERBS[rng.gen_range(0..VERBS.len())]),
            NOUNS[rng.gen_range(0..NOUNS.len())]
        ));
    }
    let groups: Vec<&[String]> = if steps.len() >= 4 && rng.gen_bool(0.5) {
        let mid = steps.len() / 2;
        vec![&steps[..mid], &steps[mid..]]
    } else {
        vec![&steps[..]]
    };

    let mut out = String::new();
    for group in groups {
        let mut tools: Vec<ToolDef> = Vec::new();
        for step in group {
            let (verb, noun) = tool_name_for(step, rng);
            let mut tool = make_tool(&verb, &noun, rng);
            if tools.iter().any(|t| t.name == tool.name) {
                tool.name = format!("{}_{}", tool.name, tools.len() + 1);
            }
            tools.push(tool);
        }
        let mut stages: Vec<Vec<String>> = Vec::new();
        for t in &tools {
            let n = stages.len();
            match stages.last_mut() {
                Some(last) if last.len() == 1 && n > 1 && rng.gen_bool(0.25) => last.push(t.name.clone()),
                _ => stages.push(vec![t.name.clone()]),
            }
        }
        let actions = tools.iter().map(|t| example_call(t, rng).0).collect();
        let w = Workflow {
            description: group[0].clone(),
            steps: group
                .iter()
                .enumerate()
                .map(|(i, s)| format!("Step{}: {}", i + 1, s))
                .collect(),
            graph: ExecutionGraph { stages },
            actions,
            tools,
        };
        if !out.is_empty() {
            out.push_str("\n\n");
        }
        out.push_str(&serialize_workflow(&w));
    }
    out
}

fn prompt_tools(input: &str) -> Vec<ToolDef> {
    section(input, prompts::TOOLS_HEADING)
        .and_then(|raw| toolschema::parse_toolset(raw).ok())
        .unwrap_or_default()
}

fn fresh_id(noun: &str, rng: &mut ChaCha8Rng) -> String {
    let prefix: String = noun.chars().take(3).collect::<String>().to_ascii_uppercase();
    format!("{prefix}-{}", rng.gen_range(1000..100_000))
}

/// A call with concrete arguments plus the phrases a user would say to
/// supply them.
fn example_call(tool: &ToolDef, rng: &mut ChaCha8Rng) -> (ToolCall, Vec<String>) {
    let mut args = Map::new();
    let mut mentions = Vec::new();
    for (name, schema) in &tool.input_schema.properties {
        let required = tool.input_schema.required.contains(name);
        if !required && rng.gen_bool(0.4) {
            continue;
        }
        let (value, mention) = example_value(name, schema, rng);
        if let Some(m) = mention {
            mentions.push(m);
        }
        args.insert(name.clone(), value);
    }
    (ToolCall::new(tool.name.clone(), args), mentions)
}

fn example_value(name: &str, schema: &ParamSchema, rng: &mut ChaCha8Rng) -> (Value, Option<String>) {
    let label = name.replace('_', " ");
    if let Some(members) = schema.enum_values.as_ref().filter(|m| !m.is_empty()) {
        return (members[rng.gen_range(0..members.len())].clone(), None);
    }
    match schema.ty {
        ParamType::String => {
            let noun = name.trim_end_matches("_id");
            let v = fresh_id(noun, rng);
            (json!(v), Some(format!("{label} {v}")))
        }
        ParamType::Integer => {
            let v = rng.gen_range(2..50);
            (json!(v), Some(format!("{label} {v}")))
        }
        ParamType::Number => {
            let v = f64::from(rng.gen_range(100..10_000)) / 4.0;
            let rendered = crate::grounding::render_number(&serde_json::Number::from_f64(v).expect("finite"));
            (json!(v), Some(format!("{label} {rendered}")))
        }
        ParamType::Boolean => (json!(rng.gen_bool(0.5)), None),
        ParamType::Array => {
            let item = schema
                .items
                .as_deref()
                .cloned()
                .unwrap_or_else(|| ParamSchema::new(ParamType::String, ""));
            let mut elems = Vec::new();
            let mut said = Vec::new();
            for _ in 0..rng.gen_range(1..3) {
                let (v, m) = example_value(name, &item, rng);
                elems.push(v);
                said.extend(m);
            }
            let mention = (!said.is_empty()).then(|| said.join(" and "));
            (Value::Array(elems), mention)
        }
        ParamType::Object => (json!({}), None),
    }
}

fn tool_result(call: &ToolCall, rng: &mut ChaCha8Rng) -> String {
    let mut data = Map::new();
    data.insert("status".into(), json!("success"));
    for (k, v) in &call.arguments {
        data.insert(k.clone(), v.clone());
    }
    data.insert(
        "reference".into(),
        json!(format!("REF{}", rng.gen_range(10_000..99_999))),
    );
    serde_json::to_string(&Value::Object(data)).expect("json")
}

fn readable(name: &str) -> String {
    name.replace('_', " ")
}

/// One user round: request, one or more calls with results, final answer.
fn push_round(messages: &mut Vec<Message>, tools: &[&ToolDef], clarify: bool, rng: &mut ChaCha8Rng) {
    let mut planned = Vec::new();
    let mut mentions = Vec::new();
    for tool in tools {
        let (call, said) = example_call(tool, rng);
        mentions.extend(said);
        planned.push(call);
    }
    let task = tools
        .iter()
        .map(|t| readable(&t.name))
        .collect::<Vec<_>>()
        .join(" and then ");
    if clarify {
        messages.push(Message::user(format!("Can you help me {task}?")));
        messages.push(Message::assistant("Sure. Which details should I use for that request?"));
        messages.push(Message::user(format!("Use {}.", mentions.join(", "))));
    } else if mentions.is_empty() {
        messages.push(Message::user(format!("Please {task}.")));
    } else {
        messages.push(Message::user(format!("Please {task} with {}.", mentions.join(", "))));
    }
    for call in planned {
        let result = tool_result(&call, rng);
        messages.push(Message::assistant_call(
            format!("I'll {} now.", readable(&call.name)),
            call,
        ));
        messages.push(Message::tool(result));
    }
    messages.push(Message::assistant(format!("All done: {task} completed successfully.")));
}

fn draft(tools: &[ToolDef], source: &str, rng: &mut ChaCha8Rng) -> Trajectory {
    let first_line = procedural_lines(source)
        .first()
        .copied()
        .unwrap_or("the described procedure");
    let system = format!(
        "You are an assistant that operates the tools of this service.\nRules:\n- Only act on identifiers the user provides.\n- Confirm before any change that cannot be undone.\n- Follow the documented procedure: {}",
        first_line.chars().take(120).collect::<String>()
    );
    let mut messages = Vec::new();
    let refs: Vec<&ToolDef> = tools.iter().collect();
    if refs.is_empty() {
        messages.push(Message::user("What can you do for me?"));
        messages.push(Message::assistant(
            "I can help with the documented procedure once tools are available.",
        ));
    }
    let mut i = 0;
    while i < refs.len() {
        let take = if i + 1 < refs.len() && rng.gen_bool(0.4) { 2 } else { 1 };
        let clarify = rng.gen_bool(0.25);
        push_round(&mut messages, &refs[i..i + take], clarify, rng);
        i += take;
    }
    Trajectory::new(system, messages)
}

fn refine(tools: &mut Vec<ToolDef>, draft_text: &str, rng: &mut ChaCha8Rng) -> Trajectory {
    let mut t = match trajectory::parse_trajectory(draft_text) {
        Ok(p) => p.trajectory,
        Err(_) => draft(tools, "", rng),
    };
    t.system.push_str("\n- Data schema: every record carries a unique identifier and a status field.\n- Write operations may be performed only once per request.");

    let nouns: BTreeSet<String> = tools
        .iter()
        .filter_map(|t| t.name.split_once('_').map(|(_, n)| n.to_string()))
        .collect();
    let noun = nouns
        .iter()
        .next()
        .cloned()
        .unwrap_or_else(|| NOUNS[rng.gen_range(0..NOUNS.len())].into());
    let mut added = Vec::new();
    for verb in ["verify", "list", "update"] {
        let name = format!("{verb}_{noun}");
        if tools.iter().any(|t| t.name == name) || added.len() == 2 {
            continue;
        }
        let mut tool = make_tool(verb, &noun, rng);
        tool.name = name;
        added.push(tool);
    }
    tools.extend(added.iter().cloned());

    let added_refs: Vec<&ToolDef> = added.iter().collect();
    if !added_refs.is_empty() {
        push_round(&mut t.messages, &added_refs, rng.gen_bool(0.3), rng);
    }
    if let Some(first) = tools.first().cloned() {
        push_round(&mut t.messages, &[&first], false, rng);
    }
    t
}

fn finish_conversation(
    mut t: Trajectory,
    tools: &[ToolDef],
    toolsets: Option<&[ToolDef]>,
    defect: Option<Defect>,
    rng: &mut ChaCha8Rng,
) -> String {
    match defect {
        Some(Defect::UnknownTool) => {
            if let Some(i) = pick_call(&t, rng) {
                let call = t.messages[i].tool_call.as_mut().expect("call");
                call.name = format!("{}_legacy", call.name);
            }
        }
        Some(Defect::MissingRequired) => {
            let candidates: Vec<(usize, String)> = t
                .calls()
                .filter_map(|(i, c)| {
                    let tool = tools.iter().find(|d| d.name == c.name)?;
                    let req = tool
                        .input_schema
                        .required
                        .iter()
                        .find(|r| c.arguments.contains_key(*r))?;
                    Some((i, req.clone()))
                })
                .collect();
            if !candidates.is_empty() {
                let (i, param) = &candidates[rng.gen_range(0..candidates.len())];
                t.messages[*i].tool_call.as_mut().expect("call").arguments.remove(param);
            }
        }
        Some(Defect::UngroundedValue) => {
            let candidates: Vec<(usize, String)> = t
                .calls()
                .filter_map(|(i, c)| {
                    let tool = tools.iter().find(|d| d.name == c.name)?;
                    let (name, _) = tool.input_schema.properties.iter().find(|(n, s)| {
                        s.ty == ParamType::String && s.enum_values.is_none() && c.arguments.contains_key(*n)
                    })?;
                    Some((i, name.clone()))
                })
                .collect();
            if !candidates.is_empty() {
                let (i, param) = &candidates[rng.gen_range(0..candidates.len())];
                let fabricated = format!("UNSEEN-{}", rng.gen_range(10_000_000u32..99_999_999));
                t.messages[*i]
                    .tool_call
                    .as_mut()
                    .expect("call")
                    .arguments
                    .insert(param.clone(), json!(fabricated));
            }
        }
        _ => {}
    }

    let mut text = trajectory::serialize_trajectory(&t, toolsets.is_some(), toolsets)
        .expect("mock trajectories carry no reserved tags");
    match defect {
        Some(Defect::UnclosedTag) => {
            if let Some(pos) = text.rfind("</assistant>") {
                text.truncate(pos);
            }
        }
        Some(Defect::CrossedTags) => {
            if let Some(pos) = text.find("</tool>") {
                text.replace_range(pos..pos + "</tool>".len(), "</assistant>");
            }
        }
        _ => {}
    }
    text
}

fn pick_call(t: &Trajectory, rng: &mut ChaCha8Rng) -> Option<usize> {
    let idx: Vec<usize> = t
        .messages
        .iter()
        .enumerate()
        .filter(|(_, m)| m.role == Role::Assistant && m.has_call())
        .map(|(i, _)| i)
        .collect();
    (!idx.is_empty()).then(|| idx[rng.gen_range(0..idx.len())])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::parse_annotation;
    use crate::grounding::{ground_check, parse_judge_verdict};
    use crate::prompts::{render, PromptSet};
    use crate::toolschema::check_call;
    use crate::trajectory::{parse_with_toolset, validate_turn_order};
    use crate::workflow::parse_workflows;

    const TEXT: &str = "To return an item: 1. Open the order page and search the order.\n2. Select the item, then submit the return form.\n3. Finally track the shipment until the refund arrives.";

    fn prompts() -> PromptSet {
        PromptSet::default()
    }

    #[test]
    fn deterministic() {
        let p = render(&prompts().annotate, &[("text", TEXT)]);
        assert_eq!(
            mock_generate(Stage::Annotate, &p, 7),
            mock_generate(Stage::Annotate, &p, 7)
        );
        let a = parse_annotation(&mock_generate(Stage::Annotate, &p, 7)).unwrap();
        assert!(a.annotation.multi_step);
        assert!(a.warnings.is_empty());
    }

    #[test]
    fn plain_text_is_not_multistep() {
        let p = render(&prompts().annotate, &[("text", "The weather was pleasant all week.")]);
        let a = parse_annotation(&mock_generate(Stage::Annotate, &p, 1)).unwrap();
        assert!(!a.annotation.multi_step);
    }

    #[test]
    fn clean_chain_validates() {
        let ps = prompts();
        for seed in 0..40 {
            let ex = mock_generate(Stage::Extract, &render(&ps.extract, &[("text", TEXT)]), seed);
            let batch = parse_workflows(&ex);
            assert!(batch.diagnostics.is_empty(), "{:?}", batch.diagnostics);
            for w in &batch.workflows {
                let tools_json = toolschema::serialize_toolset(&w.tools);
                let gen_prompt = render(
                    &ps.generate,
                    &[("tools", &tools_json), ("workflow", &w.description), ("text", TEXT)],
                );
                let draft = mock_generate(Stage::Generate, &gen_prompt, seed);
                let parsed = trajectory::parse_trajectory(&draft).unwrap();
                assert!(validate_turn_order(&parsed.trajectory.messages).is_empty());
                let ref_prompt = render(&ps.refine, &[("tools", &tools_json), ("trajectory", &draft)]);
                let refined = mock_generate(Stage::Refine, &ref_prompt, seed);
                let (tools, p) = parse_with_toolset(&refined).unwrap();
                let t = p.trajectory;
                assert!(validate_turn_order(&t.messages).is_empty());
                for (_, c) in t.calls() {
                    assert!(check_call(c, &tools).is_ok(), "{:?}", check_call(c, &tools));
                }
                assert!(ground_check(&t, &tools).is_clean(), "{:?}", ground_check(&t, &tools));
                assert!(t.messages.len() > parsed.trajectory.messages.len());
            }
        }
    }

    #[test]
    fn faults_always_fire_at_rate_one() {
        let ps = prompts();
        let ex = mock_generate(Stage::Extract, &render(&ps.extract, &[("text", TEXT)]), 3);
        let w = &parse_workflows(&ex).workflows[0];
        let tools_json = toolschema::serialize_toolset(&w.tools);
        let prompt = render(
            &ps.generate,
            &[("tools", &tools_json), ("workflow", "w"), ("text", TEXT)],
        );
        for seed in 0..20 {
            let out = mock_generate_with(
                Stage::Generate,
                &prompt,
                seed,
                &FaultConfig::only(1.0, Defect::UnknownTool),
            );
            let t = trajectory::parse_trajectory(&out).unwrap().trajectory;
            assert!(t.calls().any(|(_, c)| !check_call(c, &w.tools).is_ok()));

            let out = mock_generate_with(
                Stage::Generate,
                &prompt,
                seed,
                &FaultConfig::only(1.0, Defect::CrossedTags),
            );
            assert_eq!(
                trajectory::parse_trajectory(&out).unwrap_err().code,
                trajectory::ParseCode::CrossedTags
            );

            let out = mock_generate_with(
                Stage::Generate,
                &prompt,
                seed,
                &FaultConfig::only(1.0, Defect::UnclosedTag),
            );
            assert_eq!(
                trajectory::parse_trajectory(&out).unwrap_err().code,
                trajectory::ParseCode::UnclosedTag
            );

            let out = mock_generate_with(
                Stage::Generate,
                &prompt,
                seed,
                &FaultConfig::only(1.0, Defect::UngroundedValue),
            );
            let t = trajectory::parse_trajectory(&out).unwrap().trajectory;
            assert!(!ground_check(&t, &w.tools).is_clean());

            let out = mock_generate_with(
                Stage::Generate,
                &prompt,
                seed,
                &FaultConfig::only(1.0, Defect::MissingRequired),
            );
            let t = trajectory::parse_trajectory(&out).unwrap().trajectory;
            assert!(t.calls().any(|(_, c)| check_call(c, &w.tools)
                .codes()
                .contains(&crate::toolschema::CallDiagCode::MissingRequired)));
        }
        let v = mock_generate_with(Stage::Judge, "x", 0, &FaultConfig::only(1.0, Defect::VerdictZero));
        assert!(!parse_judge_verdict(&v).unwrap().passes(Default::default()));
    }

    #[test]
    fn stage_filter_limits_faults() {
        let faults = FaultConfig {
            rate: 1.0,
            stages: vec![Stage::Generate],
            defects: vec![],
        };
        assert!(pick_defect(Stage::Refine, "x", 0, &faults).is_none());
        assert!(pick_defect(Stage::Generate, "x", 0, &faults).is_some());
        assert!(pick_defect(Stage::Judge, "x", 0, &FaultConfig::only(1.0, Defect::UnknownTool)).is_none());
    }

    #[test]
    fn defect_names_parse() {
        for d in Defect::ALL {
            assert_eq!(d.as_str().parse::<Defect>().unwrap(), d);
        }
        assert!("bogus".parse::<Defect>().is_err());
    }
}
