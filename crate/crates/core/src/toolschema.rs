//! OpenAI-format tool definitions and rule-based checking of tool calls
//! against them.

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::markup;

/// JSON type of a tool parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamType {
    String,
    Number,
    Integer,
    Boolean,
    Array,
    Object,
}

impl ParamType {
    pub const ALL: [ParamType; 6] = [
        ParamType::String,
        ParamType::Number,
        ParamType::Integer,
        ParamType::Boolean,
        ParamType::Array,
        ParamType::Object,
    ];

    /// Whether `value` has this JSON type. Integers are numbers; nothing
    /// else is coerced.
    pub fn admits(self, value: &Value) -> bool {
        match self {
            ParamType::String => value.is_string(),
            ParamType::Number => value.is_number(),
            ParamType::Integer => value.is_i64() || value.is_u64(),
            ParamType::Boolean => value.is_boolean(),
            ParamType::Array => value.is_array(),
            ParamType::Object => value.is_object(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSchema {
    #[serde(rename = "type")]
    pub ty: ParamType,
    #[serde(default)]
    pub description: String,
    #[serde(rename = "enum", default, skip_serializing_if = "Option::is_none")]
    pub enum_values: Option<Vec<Value>>,
    /// Element schema for arrays.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub items: Option<Box<ParamSchema>>,
    /// Nested fields for objects. Absent means any map is accepted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub properties: Option<BTreeMap<String, ParamSchema>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub required: Vec<String>,
}

impl ParamSchema {
    pub fn new(ty: ParamType, description: impl Into<String>) -> Self {
        ParamSchema {
            ty,
            description: description.into(),
            enum_values: None,
            items: None,
            properties: None,
            required: Vec::new(),
        }
    }

    pub fn with_enum(mut self, values: Vec<Value>) -> Self {
        self.enum_values = Some(values);
        self
    }

    pub fn with_items(mut self, items: ParamSchema) -> Self {
        self.items = Some(Box::new(items));
        self
    }

    /// Schema reached by following `path` (object keys; `[]` steps into
    /// array items).
    pub fn lookup(&self, path: &[PathStep<'_>]) -> Option<&ParamSchema> {
        let Some((first, rest)) = path.split_first() else {
            return Some(self);
        };
        let next = match first {
            PathStep::Key(k) => self.properties.as_ref()?.get(*k)?,
            PathStep::Index(_) => self.items.as_deref()?,
        };
        next.lookup(rest)
    }
}

/// One step into a structured argument value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathStep<'a> {
    Key(&'a str),
    Index(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputSchema {
    #[serde(rename = "type")]
    pub ty: String,
    #[serde(default)]
    pub properties: BTreeMap<String, ParamSchema>,
    #[serde(default)]
    pub required: Vec<String>,
}

impl Default for InputSchema {
    fn default() -> Self {
        InputSchema {
            ty: "object".into(),
            properties: BTreeMap::new(),
            required: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToolDef {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(rename = "inputSchema", alias = "input_schema", alias = "parameters", default)]
    pub input_schema: InputSchema,
}

impl ToolDef {
    pub fn param(&self, name: &str) -> Option<&ParamSchema> {
        self.input_schema.properties.get(name)
    }
}

/// `{"name": ..., "arguments": {...}}` as emitted inside `<func>` markers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolCall {
    pub name: String,
    pub arguments: Map<String, Value>,
}

impl ToolCall {
    pub fn new(name: impl Into<String>, arguments: Map<String, Value>) -> Self {
        ToolCall {
            name: name.into(),
            arguments,
        }
    }

    /// Compact single-line JSON, `name` before `arguments`.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("tool call serializes")
    }

    pub fn from_json(text: &str) -> Result<ToolCall, serde_json::Error> {
        serde_json::from_str(text)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum SchemaError {
    #[error("malformed tool set: {0}")]
    Malformed(String),
    #[error("tool name `{0}` is empty or contains whitespace")]
    BadName(String),
    #[error("duplicate tool name `{0}`")]
    DuplicateTool(String),
    #[error("tool `{0}`: input schema type must be \"object\"")]
    NotObjectSchema(String),
    #[error("tool `{tool}`: required parameter `{param}` is not declared in properties")]
    RequiredNotDeclared { tool: String, param: String },
    #[error("tool `{tool}`: enum of `{param}` has members that do not match its type")]
    EnumTypeMismatch { tool: String, param: String },
}

impl SchemaError {
    pub fn code(&self) -> &'static str {
        match self {
            SchemaError::Malformed(_) => "MALFORMED_TOOLSET",
            SchemaError::BadName(_) => "BAD_TOOL_NAME",
            SchemaError::DuplicateTool(_) => "DUPLICATE_TOOL",
            SchemaError::NotObjectSchema(_) => "NOT_OBJECT_SCHEMA",
            SchemaError::RequiredNotDeclared { .. } => "REQUIRED_NOT_DECLARED",
            SchemaError::EnumTypeMismatch { .. } => "ENUM_TYPE_MISMATCH",
        }
    }
}

/// Parses a JSON list of tool objects. Accepts the `inputSchema`,
/// `input_schema` and `parameters` spellings and the
/// `{"type":"function","function":{...}}` wrapper. Any prose before the
/// opening `[` is skipped.
pub fn parse_toolset(raw: &str) -> Result<Vec<ToolDef>, SchemaError> {
    let start = raw
        .find('[')
        .ok_or_else(|| SchemaError::Malformed("no JSON list found".into()))?;
    let cleaned = markup::strip_trailing_commas(&raw[start..]);
    let value = markup::json_prefix(&cleaned, 0).ok_or_else(|| SchemaError::Malformed("invalid JSON list".into()))?;
    toolset_from_value(value)
}

pub fn toolset_from_value(value: Value) -> Result<Vec<ToolDef>, SchemaError> {
    let Value::Array(items) = value else {
        return Err(SchemaError::Malformed("tool set is not a list".into()));
    };
    let mut tools = Vec::with_capacity(items.len());
    for item in items {
        let item = match item {
            Value::Object(mut obj)
                if obj.get("type").and_then(Value::as_str) == Some("function")
                    && obj.get("function").is_some_and(Value::is_object) =>
            {
                obj.remove("function").unwrap_or_default()
            }
            other => other,
        };
        let tool: ToolDef = serde_json::from_value(item).map_err(|e| SchemaError::Malformed(e.to_string()))?;
        tools.push(tool);
    }
    validate_toolset(&tools)?;
    Ok(tools)
}

/// Checks the tool-set invariants: unique non-empty names, object input
/// schemas, `required` declared, enum members typed.
pub fn validate_toolset(tools: &[ToolDef]) -> Result<(), SchemaError> {
    let mut seen = BTreeSet::new();
    for tool in tools {
        if tool.name.is_empty() || tool.name.chars().any(char::is_whitespace) {
            return Err(SchemaError::BadName(tool.name.clone()));
        }
        if !seen.insert(tool.name.as_str()) {
            return Err(SchemaError::DuplicateTool(tool.name.clone()));
        }
        if tool.input_schema.ty != "object" {
            return Err(SchemaError::NotObjectSchema(tool.name.clone()));
        }
        check_fields(
            &tool.name,
            "",
            &tool.input_schema.properties,
            &tool.input_schema.required,
        )?;
    }
    Ok(())
}

fn check_fields(
    tool: &str,
    prefix: &str,
    properties: &BTreeMap<String, ParamSchema>,
    required: &[String],
) -> Result<(), SchemaError> {
    if let Some(missing) = required.iter().find(|r| !properties.contains_key(*r)) {
        return Err(SchemaError::RequiredNotDeclared {
            tool: tool.into(),
            param: join_path(prefix, missing),
        });
    }
    for (name, schema) in properties {
        check_param(tool, &join_path(prefix, name), schema)?;
    }
    Ok(())
}

fn check_param(tool: &str, path: &str, schema: &ParamSchema) -> Result<(), SchemaError> {
    if let Some(members) = &schema.enum_values {
        if members.iter().any(|m| !type_conforms(m, &strip_enum(schema))) {
            return Err(SchemaError::EnumTypeMismatch {
                tool: tool.into(),
                param: path.into(),
            });
        }
    }
    if let Some(items) = &schema.items {
        check_param(tool, &format!("{path}[]"), items)?;
    }
    match &schema.properties {
        Some(props) => check_fields(tool, path, props, &schema.required),
        None if !schema.required.is_empty() => Err(SchemaError::RequiredNotDeclared {
            tool: tool.into(),
            param: join_path(path, &schema.required[0]),
        }),
        None => Ok(()),
    }
}

fn strip_enum(schema: &ParamSchema) -> ParamSchema {
    ParamSchema {
        enum_values: None,
        ..schema.clone()
    }
}

fn join_path(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.into()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Canonical on-disk form: pretty JSON list with `inputSchema` keys.
pub fn serialize_toolset(tools: &[ToolDef]) -> String {
    serde_json::to_string_pretty(tools).expect("tool set serializes")
}

/// Diagnostic codes produced by [`check_call`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CallDiagCode {
    UnknownTool,
    MissingRequired,
    UndeclaredArg,
    TypeMismatch,
    EnumViolation,
}

impl CallDiagCode {
    pub const ALL: [CallDiagCode; 5] = [
        CallDiagCode::UnknownTool,
        CallDiagCode::MissingRequired,
        CallDiagCode::UndeclaredArg,
        CallDiagCode::TypeMismatch,
        CallDiagCode::EnumViolation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CallDiagCode::UnknownTool => "UNKNOWN_TOOL",
            CallDiagCode::MissingRequired => "MISSING_REQUIRED",
            CallDiagCode::UndeclaredArg => "UNDECLARED_ARG",
            CallDiagCode::TypeMismatch => "TYPE_MISMATCH",
            CallDiagCode::EnumViolation => "ENUM_VIOLATION",
        }
    }
}

impl fmt::Display for CallDiagCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallDiagnostic {
    pub code: CallDiagCode,
    pub tool: String,
    /// Dotted argument path (`[]` marks array elements); empty for
    /// `UNKNOWN_TOOL`.
    pub param: String,
}

impl fmt::Display for CallDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.param.is_empty() {
            write!(f, "{} ({})", self.code, self.tool)
        } else {
            write!(f, "{} ({}: {})", self.code, self.tool, self.param)
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCheckResult {
    pub diagnostics: Vec<CallDiagnostic>,
}

impl CallCheckResult {
    pub fn is_ok(&self) -> bool {
        self.diagnostics.is_empty()
    }

    pub fn codes(&self) -> BTreeSet<CallDiagCode> {
        self.diagnostics.iter().map(|d| d.code).collect()
    }
}

/// Checks a call against the tool set. Every violated clause is reported,
/// not just the first.
pub fn check_call(call: &ToolCall, tools: &[ToolDef]) -> CallCheckResult {
    let mut result = CallCheckResult::default();
    let Some(tool) = tools.iter().find(|t| t.name == call.name) else {
        result.diagnostics.push(CallDiagnostic {
            code: CallDiagCode::UnknownTool,
            tool: call.name.clone(),
            param: String::new(),
        });
        return result;
    };
    let mut violations = Vec::new();
    object_violations(
        &call.arguments,
        &tool.input_schema.properties,
        &tool.input_schema.required,
        "",
        &mut violations,
    );
    result.diagnostics = violations
        .into_iter()
        .map(|(code, param)| CallDiagnostic {
            code,
            tool: tool.name.clone(),
            param,
        })
        .collect();
    result
}

/// Recursive structural conformance, including enum membership.
pub fn type_conforms(value: &Value, schema: &ParamSchema) -> bool {
    let mut violations = Vec::new();
    value_violations(value, schema, "", &mut violations);
    violations.is_empty()
}

fn object_violations(
    map: &Map<String, Value>,
    properties: &BTreeMap<String, ParamSchema>,
    required: &[String],
    prefix: &str,
    out: &mut Vec<(CallDiagCode, String)>,
) {
    for name in required {
        if !map.contains_key(name) {
            out.push((CallDiagCode::MissingRequired, join_path(prefix, name)));
        }
    }
    for (name, value) in map {
        let path = join_path(prefix, name);
        match properties.get(name) {
            Some(schema) => value_violations(value, schema, &path, out),
            None => out.push((CallDiagCode::UndeclaredArg, path)),
        }
    }
}

fn value_violations(value: &Value, schema: &ParamSchema, path: &str, out: &mut Vec<(CallDiagCode, String)>) {
    if !schema.ty.admits(value) {
        out.push((CallDiagCode::TypeMismatch, path.into()));
        return;
    }
    if let Some(members) = &schema.enum_values {
        if !members.contains(value) {
            out.push((CallDiagCode::EnumViolation, path.into()));
        }
    }
    match value {
        Value::Array(elems) => {
            if let Some(items) = &schema.items {
                let elem_path = format!("{path}[]");
                for elem in elems {
                    value_violations(elem, items, &elem_path, out);
                }
            }
        }
        Value::Object(map) => {
            if let Some(props) = &schema.properties {
                object_violations(map, props, &schema.required, path, out);
            }
        }
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use serde_json::json;

    const FLIGHT: &str = r#"[{"name":"flight_search","description":"Search flights","inputSchema":{"type":"object","properties":{"check_in_date":{"type":"string","description":"Date of travel"}},"required":["check_in_date"]}}]"#;

    fn call(name: &str, args: Value) -> ToolCall {
        ToolCall::new(name, args.as_object().cloned().unwrap())
    }

    #[test]
    fn parses_single_tool() {
        let tools = parse_toolset(FLIGHT).unwrap();
        assert_eq!(tools.len(), 1);
        assert_eq!(tools[0].name, "flight_search");
        assert_eq!(tools[0].input_schema.required, ["check_in_date"]);
        assert_eq!(tools[0].param("check_in_date").unwrap().ty, ParamType::String);
    }

    #[test]
    fn empty_list_is_empty_toolset() {
        assert!(parse_toolset("[]").unwrap().is_empty());
    }

    #[test]
    fn required_must_be_declared() {
        let raw = r#"[{"name":"t","inputSchema":{"type":"object","properties":{},"required":["x"]}}]"#;
        assert!(matches!(
            parse_toolset(raw),
            Err(SchemaError::RequiredNotDeclared { .. })
        ));
    }

    #[test]
    fn rejects_duplicates_and_bad_types() {
        let dup = r#"[{"name":"a"},{"name":"a"}]"#;
        assert_eq!(parse_toolset(dup), Err(SchemaError::DuplicateTool("a".into())));
        let untyped = r#"[{"name":"a","inputSchema":{"type":"object","properties":{"x":{"type":""}}}}]"#;
        assert!(matches!(parse_toolset(untyped), Err(SchemaError::Malformed(_))));
        let not_obj = r#"[{"name":"a","inputSchema":{"type":"array"}}]"#;
        assert_eq!(parse_toolset(not_obj), Err(SchemaError::NotObjectSchema("a".into())));
        let bad_enum =
            r#"[{"name":"a","inputSchema":{"type":"object","properties":{"x":{"type":"integer","enum":["one"]}}}}]"#;
        assert!(matches!(
            parse_toolset(bad_enum),
            Err(SchemaError::EnumTypeMismatch { .. })
        ));
    }

    #[test]
    fn accepts_key_spellings_and_wrapper() {
        let snake = r#"[{"name":"a","input_schema":{"type":"object","properties":{"q":{"type":"string"}}}}]"#;
        let openai = r#"[{"type":"function","function":{"name":"a","parameters":{"type":"object","properties":{"q":{"type":"string"}}}}}]"#;
        let a = parse_toolset(snake).unwrap();
        let b = parse_toolset(openai).unwrap();
        assert_eq!(a, b);
        assert!(serialize_toolset(&a).contains("\"inputSchema\""));
    }

    #[test]
    fn skips_prose_and_trailing_commas() {
        let raw = "All candidate tools in JSON, OPENAI format.\n[{\"name\":\"a\",},]";
        assert_eq!(parse_toolset(raw).unwrap()[0].name, "a");
    }

    #[test]
    fn unknown_tool() {
        let tools = parse_toolset(FLIGHT).unwrap();
        let r = check_call(&call("plan_and_book_trip", json!({})), &tools);
        assert_eq!(r.diagnostics.len(), 1);
        assert_eq!(r.diagnostics[0].code, CallDiagCode::UnknownTool);
    }

    #[test]
    fn missing_required_names_parameter() {
        let tools = parse_toolset(FLIGHT).unwrap();
        let r = check_call(&call("flight_search", json!({})), &tools);
        assert_eq!(
            r.diagnostics,
            [CallDiagnostic {
                code: CallDiagCode::MissingRequired,
                tool: "flight_search".into(),
                param: "check_in_date".into(),
            }]
        );
    }

    #[test]
    fn undeclared_and_mismatch() {
        let tools = parse_toolset(FLIGHT).unwrap();
        let r = check_call(
            &call("flight_search", json!({"check_in_date": 20250101, "seat": "A"})),
            &tools,
        );
        assert_eq!(
            r.codes().into_iter().collect::<Vec<_>>(),
            [CallDiagCode::UndeclaredArg, CallDiagCode::TypeMismatch]
        );
    }

    #[test]
    fn conformance_rules() {
        let num = ParamSchema::new(ParamType::Number, "");
        let int = ParamSchema::new(ParamType::Integer, "");
        assert!(type_conforms(&json!(3), &num));
        assert!(type_conforms(&json!(3.5), &num));
        assert!(!type_conforms(&json!(3.5), &int));
        assert!(!type_conforms(&json!("3"), &int));
        let flags = ParamSchema::new(ParamType::Array, "").with_items(ParamSchema::new(ParamType::Boolean, ""));
        assert!(type_conforms(&json!([true, false]), &flags));
        assert!(!type_conforms(&json!([true, 1]), &flags));
        let any_obj = ParamSchema::new(ParamType::Object, "");
        assert!(type_conforms(&json!({"anything": [1, "x"]}), &any_obj));
        let color = ParamSchema::new(ParamType::String, "").with_enum(vec![json!("red")]);
        assert!(type_conforms(&json!("red"), &color));
        assert!(!type_conforms(&json!("blue"), &color));
    }

    #[test]
    fn nested_paths() {
        let raw = r#"[{"name":"book","inputSchema":{"type":"object","properties":{
            "guest":{"type":"object","properties":{"name":{"type":"string"},"age":{"type":"integer"}},"required":["name"]},
            "rooms":{"type":"array","items":{"type":"string","enum":["single","double"]}}},"required":["guest"]}}]"#;
        let tools = parse_toolset(raw).unwrap();
        let r = check_call(
            &call("book", json!({"guest": {"age": "x", "vip": true}, "rooms": ["suite"]})),
            &tools,
        );
        let got: Vec<(CallDiagCode, &str)> = r.diagnostics.iter().map(|d| (d.code, d.param.as_str())).collect();
        assert_eq!(
            got,
            [
                (CallDiagCode::MissingRequired, "guest.name"),
                (CallDiagCode::TypeMismatch, "guest.age"),
                (CallDiagCode::UndeclaredArg, "guest.vip"),
                (CallDiagCode::EnumViolation, "rooms[]"),
            ]
        );
    }

    #[test]
    fn lookup_follows_path() {
        let tools = parse_toolset(
            r#"[{"name":"t","inputSchema":{"type":"object","properties":{"a":{"type":"array","items":{"type":"object","properties":{"b":{"type":"string","enum":["x"]}}}}}}}]"#,
        )
        .unwrap();
        let a = tools[0].param("a").unwrap();
        let b = a.lookup(&[PathStep::Index(0), PathStep::Key("b")]).unwrap();
        assert_eq!(b.enum_values.as_deref(), Some(&[json!("x")][..]));
    }
}
