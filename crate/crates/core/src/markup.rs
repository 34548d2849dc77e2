//! Small helpers shared by the tagged-output parsers.

use alloc::string::String;
use core::ops::Range;

/// A located `<name>…</name>` region.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    /// Offset of the `<` of the opening tag.
    pub open: usize,
    /// Byte range of the body between the tags.
    pub body: Range<usize>,
    /// Offset one past the closing tag.
    pub end: usize,
}

/// Outcome of searching for a tagged block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Found {
    Block(Block),
    /// Opening tag at the given offset with no matching close.
    Unclosed(usize),
    Absent,
}

pub fn open_tag(name: &str) -> String {
    let mut s = String::with_capacity(name.len() + 2);
    s.push('<');
    s.push_str(name);
    s.push('>');
    s
}

pub fn close_tag(name: &str) -> String {
    let mut s = String::with_capacity(name.len() + 3);
    s.push_str("</");
    s.push_str(name);
    s.push('>');
    s
}

/// First `<name>…</name>` at or after `from`. The body ends at the first
/// closing tag; nesting of the same name is not supported.
pub fn find_block(text: &str, name: &str, from: usize) -> Found {
    let open = open_tag(name);
    let close = close_tag(name);
    let Some(rel) = text.get(from..).and_then(|rest| rest.find(&open)) else {
        return Found::Absent;
    };
    let open_at = from + rel;
    let body_start = open_at + open.len();
    match text[body_start..].find(&close) {
        Some(rel_close) => {
            let body_end = body_start + rel_close;
            Found::Block(Block {
                open: open_at,
                body: body_start..body_end,
                end: body_end + close.len(),
            })
        }
        None => Found::Unclosed(open_at),
    }
}

/// Body of the first `<name>` block, trimmed. `None` when absent or unclosed.
pub fn tag_body<'a>(text: &'a str, name: &str) -> Option<&'a str> {
    match find_block(text, name, 0) {
        Found::Block(b) => Some(text[b.body].trim()),
        _ => None,
    }
}

/// Removes at most one leading and one trailing `\n`.
pub fn strip_one_newline(s: &str) -> &str {
    let s = s.strip_prefix('\n').unwrap_or(s);
    s.strip_suffix('\n').unwrap_or(s)
}

/// Drops commas that directly precede `}` or `]` (ignoring whitespace),
/// outside of string literals. Model output frequently carries them.
pub fn strip_trailing_commas(s: &str) -> String {
    let bytes = s.as_bytes();
    let mut out = String::with_capacity(s.len());
    let mut in_string = false;
    let mut escaped = false;
    for (i, ch) in s.char_indices() {
        if in_string {
            out.push(ch);
            if escaped {
                escaped = false;
            } else if ch == '\\' {
                escaped = true;
            } else if ch == '"' {
                in_string = false;
            }
            continue;
        }
        match ch {
            '"' => {
                in_string = true;
                out.push(ch);
            }
            ',' => {
                let next = bytes[i + 1..].iter().copied().find(|b| !b.is_ascii_whitespace());
                if !matches!(next, Some(b'}') | Some(b']')) {
                    out.push(ch);
                }
            }
            _ => out.push(ch),
        }
    }
    out
}

/// Parses the first JSON value that starts at byte `start`, ignoring
/// whatever follows it.
pub fn json_prefix(text: &str, start: usize) -> Option<serde_json::Value> {
    let mut stream = serde_json::Deserializer::from_str(&text[start..]).into_iter::<serde_json::Value>();
    match stream.next() {
        Some(Ok(v)) => Some(v),
        _ => None,
    }
}
