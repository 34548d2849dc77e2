//! The tagged conversation grammar:
//!
//! ```text
//! <toolsets>[...]</toolsets>        (optional, refined form only)
//! <system>...</system>
//! <user>...</user>
//! <assistant>... <func>{"name": ..., "arguments": {...}}</func></assistant>
//! <tool>...</tool>
//! ```
//!
//! Whitespace between blocks is insignificant. Block bodies are kept
//! verbatim except for one leading and one trailing newline. The canonical
//! serialized form puts every tag on its own line, so
//! `parse(serialize(t)) == t` for every trajectory whose texts do not contain
//! the reserved tags.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::markup::{self, strip_one_newline};
use crate::toolschema::{self, SchemaError, ToolCall, ToolDef};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::Tool => "tool",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    /// Natural-language content. For assistant messages with a call this is
    /// the text preceding the `<func>` marker.
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call: Option<ToolCall>,
    /// Assistant text written after the `<func>` region, if any.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub text_after_call: String,
}

impl Message {
    fn plain(role: Role, text: impl Into<String>) -> Self {
        Message {
            role,
            text: text.into(),
            tool_call: None,
            text_after_call: String::new(),
        }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Message::plain(Role::User, text)
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Message::plain(Role::Assistant, text)
    }

    pub fn assistant_call(text: impl Into<String>, call: ToolCall) -> Self {
        Message {
            tool_call: Some(call),
            ..Message::plain(Role::Assistant, text)
        }
    }

    pub fn tool(text: impl Into<String>) -> Self {
        Message::plain(Role::Tool, text)
    }

    pub fn has_call(&self) -> bool {
        self.tool_call.is_some()
    }
}

/// A system prompt followed by user/assistant/tool messages.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub system: String,
    pub messages: Vec<Message>,
    #[serde(default)]
    pub source_segment_id: String,
    #[serde(default)]
    pub toolset_ref: String,
}

impl Trajectory {
    pub fn new(system: impl Into<String>, messages: Vec<Message>) -> Self {
        Trajectory {
            system: system.into(),
            messages,
            source_segment_id: String::new(),
            toolset_ref: String::new(),
        }
    }

    /// `(message index, call)` for every assistant call, in order.
    pub fn calls(&self) -> impl Iterator<Item = (usize, &ToolCall)> {
        self.messages
            .iter()
            .enumerate()
            .filter_map(|(i, m)| m.tool_call.as_ref().map(|c| (i, c)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ParseCode {
    UnclosedTag,
    CrossedTags,
    NestedTag,
    UnexpectedClose,
    MultipleFuncInTurn,
    MalformedFuncBody,
    FuncOutsideAssistant,
    MissingSystem,
    DuplicateSystem,
    MisplacedBlock,
    EmptyTrajectory,
    MissingToolsets,
    MalformedToolset,
    StrayText,
}

impl ParseCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ParseCode::UnclosedTag => "UNCLOSED_TAG",
            ParseCode::CrossedTags => "CROSSED_TAGS",
            ParseCode::NestedTag => "NESTED_TAG",
            ParseCode::UnexpectedClose => "UNEXPECTED_CLOSE",
            ParseCode::MultipleFuncInTurn => "MULTIPLE_FUNC_IN_TURN",
            ParseCode::MalformedFuncBody => "MALFORMED_FUNC_BODY",
            ParseCode::FuncOutsideAssistant => "FUNC_OUTSIDE_ASSISTANT",
            ParseCode::MissingSystem => "MISSING_SYSTEM",
            ParseCode::DuplicateSystem => "DUPLICATE_SYSTEM",
            ParseCode::MisplacedBlock => "MISPLACED_BLOCK",
            ParseCode::EmptyTrajectory => "EMPTY_TRAJECTORY",
            ParseCode::MissingToolsets => "MISSING_TOOLSETS",
            ParseCode::MalformedToolset => "MALFORMED_TOOLSET",
            ParseCode::StrayText => "STRAY_TEXT",
        }
    }
}

impl fmt::Display for ParseCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A fatal grammar violation at a byte offset of the input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{code} at byte {offset}: {detail}")]
pub struct ParseError {
    pub code: ParseCode,
    pub offset: usize,
    pub detail: String,
}

impl ParseError {
    fn new(code: ParseCode, offset: usize, detail: impl Into<String>) -> Self {
        ParseError {
            code,
            offset,
            detail: detail.into(),
        }
    }
}

/// Non-fatal finding, e.g. prose outside any block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseWarning {
    pub code: ParseCode,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParsedTrajectory {
    pub trajectory: Trajectory,
    /// Raw body of a leading `<toolsets>` block, if present.
    pub toolsets: Option<String>,
    pub warnings: Vec<ParseWarning>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Tag {
    Toolsets,
    System,
    User,
    Assistant,
    Tool,
    Func,
}

impl Tag {
    const ALL: [Tag; 6] = [
        Tag::Toolsets,
        Tag::System,
        Tag::User,
        Tag::Assistant,
        Tag::Tool,
        Tag::Func,
    ];

    fn name(self) -> &'static str {
        match self {
            Tag::Toolsets => "toolsets",
            Tag::System => "system",
            Tag::User => "user",
            Tag::Assistant => "assistant",
            Tag::Tool => "tool",
            Tag::Func => "func",
        }
    }
}

/// Every literal tag string of the grammar.
pub const RESERVED_TAGS: [&str; 12] = [
    "<toolsets>",
    "</toolsets>",
    "<system>",
    "</system>",
    "<user>",
    "</user>",
    "<assistant>",
    "</assistant>",
    "<tool>",
    "</tool>",
    "<func>",
    "</func>",
];

#[derive(Clone, Copy, Debug)]
struct Token {
    tag: Tag,
    close: bool,
    start: usize,
    end: usize,
}

fn tokenize(text: &str) -> Vec<Token> {
    let bytes = text.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while let Some(rel) = text[i..].find('<') {
        let at = i + rel;
        let close = bytes.get(at + 1) == Some(&b'/');
        let name_start = at + 1 + usize::from(close);
        let hit = Tag::ALL.into_iter().find(|tag| {
            let name = tag.name();
            text[name_start..].starts_with(name) && bytes.get(name_start + name.len()) == Some(&b'>')
        });
        match hit {
            Some(tag) => {
                let end = name_start + tag.name().len() + 1;
                tokens.push(Token {
                    tag,
                    close,
                    start: at,
                    end,
                });
                i = end;
            }
            None => i = at + 1,
        }
    }
    tokens
}

struct RawBlock {
    tag: Tag,
    open: usize,
    body: Range<usize>,
    /// `(open offset, body range, end offset)` of the `<func>` region.
    func: Option<(usize, Range<usize>, usize)>,
}

struct OpenBlock {
    tag: Tag,
    open: usize,
    body_start: usize,
    func_open: Option<Token>,
    func: Option<(usize, Range<usize>, usize)>,
}

fn scan_blocks(text: &str) -> Result<(Vec<RawBlock>, Vec<ParseWarning>), ParseError> {
    let mut blocks = Vec::new();
    let mut warnings = Vec::new();
    let mut current: Option<OpenBlock> = None;
    let mut last_end = 0;

    let note_stray = |from: usize, to: usize, warnings: &mut Vec<ParseWarning>| {
        let gap = &text[from..to];
        if let Some(pos) = gap.find(|c: char| !c.is_whitespace()) {
            warnings.push(ParseWarning {
                code: ParseCode::StrayText,
                offset: from + pos,
            });
        }
    };

    for tok in tokenize(text) {
        let Some(cur) = current.as_mut() else {
            if tok.close {
                return Err(ParseError::new(
                    ParseCode::UnexpectedClose,
                    tok.start,
                    format!("`</{}>` without an open block", tok.tag.name()),
                ));
            }
            if tok.tag == Tag::Func {
                return Err(ParseError::new(
                    ParseCode::FuncOutsideAssistant,
                    tok.start,
                    "`<func>` outside any block",
                ));
            }
            note_stray(last_end, tok.start, &mut warnings);
            current = Some(OpenBlock {
                tag: tok.tag,
                open: tok.start,
                body_start: tok.end,
                func_open: None,
                func: None,
            });
            continue;
        };

        match (tok.tag, tok.close) {
            (Tag::Func, false) => {
                if cur.tag != Tag::Assistant {
                    return Err(ParseError::new(
                        ParseCode::FuncOutsideAssistant,
                        tok.start,
                        format!("`<func>` inside `<{}>`", cur.tag.name()),
                    ));
                }
                if cur.func_open.is_some() {
                    return Err(ParseError::new(
                        ParseCode::NestedTag,
                        tok.start,
                        "`<func>` inside `<func>`",
                    ));
                }
                if cur.func.is_some() {
                    return Err(ParseError::new(
                        ParseCode::MultipleFuncInTurn,
                        tok.start,
                        "second `<func>` in one assistant turn",
                    ));
                }
                cur.func_open = Some(tok);
            }
            (Tag::Func, true) => match cur.func_open.take() {
                Some(open) => cur.func = Some((open.start, open.end..tok.start, tok.end)),
                None => {
                    return Err(ParseError::new(
                        ParseCode::UnexpectedClose,
                        tok.start,
                        "`</func>` without `<func>`",
                    ))
                }
            },
            (tag, false) => {
                return Err(ParseError::new(
                    ParseCode::NestedTag,
                    tok.start,
                    format!("`<{}>` opened inside `<{}>`", tag.name(), cur.tag.name()),
                ));
            }
            (tag, true) if tag == cur.tag && cur.func_open.is_none() => {
                blocks.push(RawBlock {
                    tag,
                    open: cur.open,
                    body: cur.body_start..tok.start,
                    func: cur.func.take(),
                });
                current = None;
                last_end = tok.end;
            }
            (tag, true) => {
                let inner = if cur.func_open.is_some() { Tag::Func } else { cur.tag };
                return Err(ParseError::new(
                    ParseCode::CrossedTags,
                    tok.start,
                    format!("`<{}>` closed by `</{}>`", inner.name(), tag.name()),
                ));
            }
        }
    }

    if let Some(cur) = current {
        return Err(ParseError::new(
            ParseCode::UnclosedTag,
            cur.open,
            format!("`<{}>` is never closed", cur.tag.name()),
        ));
    }
    note_stray(last_end, text.len(), &mut warnings);
    Ok((blocks, warnings))
}

/// Parses the tagged grammar. A leading `<toolsets>` block is returned raw.
pub fn parse_trajectory(text: &str) -> Result<ParsedTrajectory, ParseError> {
    let (blocks, warnings) = scan_blocks(text)?;
    let mut rest = blocks.as_slice();

    let mut toolsets = None;
    if let Some((first, tail)) = rest.split_first() {
        if first.tag == Tag::Toolsets {
            toolsets = Some(text[first.body.clone()].to_string());
            rest = tail;
        }
    }

    let mut system: Option<String> = None;
    let mut messages = Vec::new();
    for block in rest {
        match block.tag {
            Tag::Toolsets => {
                return Err(ParseError::new(
                    ParseCode::MisplacedBlock,
                    block.open,
                    "`<toolsets>` must come first",
                ))
            }
            Tag::System if system.is_some() => {
                return Err(ParseError::new(
                    ParseCode::DuplicateSystem,
                    block.open,
                    "more than one `<system>` block",
                ))
            }
            Tag::System if !messages.is_empty() => {
                return Err(ParseError::new(
                    ParseCode::MisplacedBlock,
                    block.open,
                    "`<system>` after conversation messages",
                ))
            }
            Tag::System => system = Some(strip_one_newline(&text[block.body.clone()]).into()),
            Tag::User => messages.push(Message::user(strip_one_newline(&text[block.body.clone()]))),
            Tag::Tool => messages.push(Message::tool(strip_one_newline(&text[block.body.clone()]))),
            Tag::Assistant => messages.push(assistant_message(text, block)?),
            Tag::Func => unreachable!("func regions are attached to their block"),
        }
    }

    let Some(system) = system else {
        let offset = rest.first().map_or(0, |b| b.open);
        return Err(ParseError::new(ParseCode::MissingSystem, offset, "no `<system>` block"));
    };
    if messages.is_empty() {
        return Err(ParseError::new(
            ParseCode::EmptyTrajectory,
            text.len(),
            "no conversation messages",
        ));
    }
    Ok(ParsedTrajectory {
        trajectory: Trajectory::new(system, messages),
        toolsets,
        warnings,
    })
}

fn assistant_message(text: &str, block: &RawBlock) -> Result<Message, ParseError> {
    let Some((func_open, func_body, func_end)) = block.func.clone() else {
        return Ok(Message::assistant(strip_one_newline(&text[block.body.clone()])));
    };
    let before = strip_one_newline(&text[block.body.start..func_open]);
    let after = strip_one_newline(&text[func_end..block.body.end]);
    let raw = text[func_body].trim();
    let call = parse_call(raw).map_err(|detail| ParseError::new(ParseCode::MalformedFuncBody, func_open, detail))?;
    Ok(Message {
        role: Role::Assistant,
        text: before.into(),
        tool_call: Some(call),
        text_after_call: after.into(),
    })
}

fn parse_call(raw: &str) -> Result<ToolCall, String> {
    let cleaned = markup::strip_trailing_commas(raw);
    let call = ToolCall::from_json(&cleaned).map_err(|e| e.to_string())?;
    if call.name.trim().is_empty() {
        return Err("empty tool name".into());
    }
    Ok(call)
}

/// Parses the refined form: a leading `<toolsets>` block is mandatory and
/// must hold a valid tool set.
pub fn parse_with_toolset(text: &str) -> Result<(Vec<ToolDef>, ParsedTrajectory), ParseError> {
    let parsed = parse_trajectory(text)?;
    let Some(raw) = parsed.toolsets.as_deref() else {
        return Err(ParseError::new(
            ParseCode::MissingToolsets,
            0,
            "no leading `<toolsets>` block",
        ));
    };
    let tools = toolschema::parse_toolset(raw).map_err(|e: SchemaError| {
        let offset = text.find("<toolsets>").unwrap_or(0);
        ParseError::new(ParseCode::MalformedToolset, offset, e.to_string())
    })?;
    Ok((tools, parsed))
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum SerializeError {
    #[error("toolsets requested but no tools supplied")]
    MissingTools,
    #[error("message {0} contains a reserved tag")]
    ReservedMarkup(usize),
    #[error("system prompt contains a reserved tag")]
    ReservedMarkupInSystem,
    #[error("message {0}: only assistant messages may carry a tool call")]
    CallOnNonAssistant(usize),
    #[error("message {0}: system role inside the message list")]
    SystemMessage(usize),
    #[error("message {0}: text after a call but no call")]
    AfterTextWithoutCall(usize),
}

fn has_reserved(s: &str) -> bool {
    RESERVED_TAGS.iter().any(|tag| s.contains(tag))
}

fn push_block(out: &mut String, tag: &str, body: &str) {
    if !out.is_empty() {
        out.push('\n');
    }
    out.push('<');
    out.push_str(tag);
    out.push_str(">\n");
    out.push_str(body);
    out.push_str("\n</");
    out.push_str(tag);
    out.push('>');
}

/// Canonical tagged form. With `include_toolsets` the tool list is emitted
/// first as a `<toolsets>` block.
pub fn serialize_trajectory(
    t: &Trajectory,
    include_toolsets: bool,
    tools: Option<&[ToolDef]>,
) -> Result<String, SerializeError> {
    let mut out = String::new();
    if include_toolsets {
        let tools = tools.ok_or(SerializeError::MissingTools)?;
        push_block(&mut out, "toolsets", &toolschema::serialize_toolset(tools));
    }
    if has_reserved(&t.system) {
        return Err(SerializeError::ReservedMarkupInSystem);
    }
    push_block(&mut out, "system", &t.system);
    for (i, m) in t.messages.iter().enumerate() {
        if has_reserved(&m.text) || has_reserved(&m.text_after_call) {
            return Err(SerializeError::ReservedMarkup(i));
        }
        match (m.role, &m.tool_call) {
            (Role::System, _) => return Err(SerializeError::SystemMessage(i)),
            (Role::Assistant, Some(call)) => {
                let json = call.to_json();
                if has_reserved(&json) {
                    return Err(SerializeError::ReservedMarkup(i));
                }
                let mut body = String::with_capacity(m.text.len() + json.len() + 32);
                body.push_str(&m.text);
                body.push_str("\n<func>\n");
                body.push_str(&json);
                body.push_str("\n</func>");
                if !m.text_after_call.is_empty() {
                    body.push('\n');
                    body.push_str(&m.text_after_call);
                }
                push_block(&mut out, "assistant", &body);
            }
            (_, Some(_)) => return Err(SerializeError::CallOnNonAssistant(i)),
            (role, None) => {
                if !m.text_after_call.is_empty() {
                    return Err(SerializeError::AfterTextWithoutCall(i));
                }
                push_block(&mut out, role.as_str(), &m.text);
            }
        }
    }
    Ok(out)
}

/// State of the turn-order automaton.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TurnFsmState {
    ExpectUser,
    ExpectAssistant,
    ExpectTool,
    ExpectUserOrEnd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TurnCode {
    Empty,
    FirstNotUser,
    ConsecutiveUser,
    ConsecutiveAssistant,
    ToolResponseMissing,
    ToolThenUser,
    UnexpectedTool,
    UnexpectedSystem,
    EndsWithoutAnswer,
}

impl TurnCode {
    pub fn as_str(self) -> &'static str {
        match self {
            TurnCode::Empty => "EMPTY",
            TurnCode::FirstNotUser => "FIRST_NOT_USER",
            TurnCode::ConsecutiveUser => "CONSECUTIVE_USER",
            TurnCode::ConsecutiveAssistant => "CONSECUTIVE_ASSISTANT",
            TurnCode::ToolResponseMissing => "TOOL_RESPONSE_MISSING",
            TurnCode::ToolThenUser => "TOOL_THEN_USER",
            TurnCode::UnexpectedTool => "UNEXPECTED_TOOL",
            TurnCode::UnexpectedSystem => "UNEXPECTED_SYSTEM",
            TurnCode::EndsWithoutAnswer => "ENDS_WITHOUT_ANSWER",
        }
    }
}

impl fmt::Display for TurnCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A turn-order violation between message `prev_index` and `index`.
/// `index == messages.len()` marks a violation at the end of the dialogue.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnDiagnostic {
    pub code: TurnCode,
    pub index: usize,
    pub prev_index: Option<usize>,
}

impl fmt::Display for TurnDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.prev_index {
            Some(prev) => write!(f, "{} between messages {} and {}", self.code, prev, self.index),
            None => write!(f, "{} at message {}", self.code, self.index),
        }
    }
}

fn state_after(m: &Message, current: TurnFsmState) -> TurnFsmState {
    match m.role {
        Role::User | Role::Tool => TurnFsmState::ExpectAssistant,
        Role::Assistant if m.has_call() => TurnFsmState::ExpectTool,
        Role::Assistant => TurnFsmState::ExpectUserOrEnd,
        Role::System => current,
    }
}

/// Runs the turn-order automaton. After a violation the automaton resumes
/// from the state implied by the offending message, so every independent
/// violation is reported.
pub fn validate_turn_order(messages: &[Message]) -> Vec<TurnDiagnostic> {
    use TurnFsmState::*;

    let mut out = Vec::new();
    if messages.is_empty() {
        out.push(TurnDiagnostic {
            code: TurnCode::Empty,
            index: 0,
            prev_index: None,
        });
        return out;
    }

    let mut state = ExpectUser;
    for (i, m) in messages.iter().enumerate() {
        let prev = i.checked_sub(1);
        let prev_role = prev.map(|p| messages[p].role);
        let violation = match (state, m.role) {
            (_, Role::System) => Some(TurnCode::UnexpectedSystem),
            (ExpectUser, Role::User) => None,
            (ExpectUser, _) => Some(TurnCode::FirstNotUser),
            (ExpectAssistant, Role::Assistant) => None,
            (ExpectAssistant, Role::User) if prev_role == Some(Role::Tool) => Some(TurnCode::ToolThenUser),
            (ExpectAssistant, Role::User) => Some(TurnCode::ConsecutiveUser),
            (ExpectAssistant, Role::Tool) => Some(TurnCode::UnexpectedTool),
            (ExpectTool, Role::Tool) => None,
            (ExpectTool, _) => Some(TurnCode::ToolResponseMissing),
            (ExpectUserOrEnd, Role::User) => None,
            (ExpectUserOrEnd, Role::Assistant) => Some(TurnCode::ConsecutiveAssistant),
            (ExpectUserOrEnd, Role::Tool) => Some(TurnCode::UnexpectedTool),
        };
        if let Some(code) = violation {
            out.push(TurnDiagnostic {
                code,
                index: i,
                prev_index: if code == TurnCode::FirstNotUser && i == 0 {
                    None
                } else {
                    prev
                },
            });
        }
        state = state_after(m, state);
    }

    let end = messages.len();
    let end_code = match state {
        ExpectUserOrEnd => None,
        ExpectTool => Some(TurnCode::ToolResponseMissing),
        ExpectAssistant | ExpectUser => Some(TurnCode::EndsWithoutAnswer),
    };
    if let Some(code) = end_code {
        out.push(TurnDiagnostic {
            code,
            index: end,
            prev_index: Some(end - 1),
        });
    }
    out
}
