//! Generators and independent oracles shared by the property suites.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use proptest::strategy::ValueTree;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use serde_json::{json, Map, Value};

use tooltraj_core::toolschema::{InputSchema, ParamSchema, ParamType, ToolCall, ToolDef};
use tooltraj_core::trajectory::{Message, Role, Trajectory, RESERVED_TAGS};

/// Draws `n` values from `strategy` with a fixed seed.
pub fn sample<S: Strategy>(strategy: S, n: usize, seed: u64) -> Vec<S::Value> {
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    let rng = TestRng::from_seed(RngAlgorithm::ChaCha, &bytes);
    let mut runner = TestRunner::new_with_rng(Config::default(), rng);
    (0..n)
        .map(|_| strategy.new_tree(&mut runner).expect("value tree").current())
        .collect()
}

pub fn has_reserved(s: &str) -> bool {
    RESERVED_TAGS.iter().any(|t| s.contains(t))
}

/// Free text, including newlines, braces and angle brackets, without any
/// grammar tag.
pub fn free_text() -> BoxedStrategy<String> {
    proptest::string::string_regex("[a-zA-Z0-9 .,:;!?'\"{}\\[\\]<>/_\n-]{0,24}")
        .expect("regex")
        .prop_filter("contains a grammar tag", |s| !has_reserved(s))
        .boxed()
}

pub fn ident() -> BoxedStrategy<String> {
    "[a-z][a-z0-9_]{0,10}".boxed()
}

pub fn json_leaf() -> BoxedStrategy<Value> {
    prop_oneof![
        Just(Value::Null),
        any::<bool>().prop_map(Value::Bool),
        any::<i64>().prop_map(Value::from),
        (-1.0e6f64..1.0e6).prop_map(|f| json!(f)),
        free_text().prop_map(Value::String),
    ]
    .boxed()
}

pub fn json_value() -> BoxedStrategy<Value> {
    json_leaf()
        .prop_recursive(2, 12, 3, |inner| {
            prop_oneof![
                prop::collection::vec(inner.clone(), 0..3).prop_map(Value::Array),
                prop::collection::btree_map("[a-z_]{1,6}", inner, 0..3)
                    .prop_map(|m| Value::Object(m.into_iter().collect())),
            ]
        })
        .boxed()
}

pub fn arguments() -> BoxedStrategy<Map<String, Value>> {
    prop::collection::btree_map("[a-z_]{1,8}", json_value(), 0..4)
        .prop_map(|m| m.into_iter().collect())
        .boxed()
}

pub fn tool_call() -> BoxedStrategy<ToolCall> {
    (ident(), arguments()).prop_map(|(n, a)| ToolCall::new(n, a)).boxed()
}

fn after_text() -> BoxedStrategy<String> {
    prop_oneof![2 => Just(String::new()), 1 => free_text()].boxed()
}

/// One user turn: request, zero or more call/result pairs, final answer.
fn round() -> BoxedStrategy<Vec<Message>> {
    let exchange = (free_text(), tool_call(), after_text(), free_text()).prop_map(|(text, call, after, result)| {
        let mut m = Message::assistant_call(text, call);
        m.text_after_call = after;
        [m, Message::tool(result)]
    });
    (free_text(), prop::collection::vec(exchange, 0..3), free_text())
        .prop_map(|(user, exchanges, answer)| {
            let mut out = vec![Message::user(user)];
            for pair in exchanges {
                out.extend(pair);
            }
            out.push(Message::assistant(answer));
            out
        })
        .boxed()
}

/// Trajectories whose role sequence satisfies the turn-order rules.
pub fn valid_trajectory() -> BoxedStrategy<Trajectory> {
    (free_text(), prop::collection::vec(round(), 1..4))
        .prop_map(|(system, rounds)| Trajectory::new(system, rounds.into_iter().flatten().collect()))
        .boxed()
}

/// Message lists with arbitrary roles, for counting oracles.
pub fn any_messages() -> BoxedStrategy<Vec<Message>> {
    let msg = prop_oneof![
        free_text().prop_map(Message::user),
        free_text().prop_map(Message::assistant),
        (free_text(), prop::sample::select(vec!["a", "b", "c", "d"]))
            .prop_map(|(t, n)| Message::assistant_call(t, ToolCall::new(n, Map::new()))),
        free_text().prop_map(Message::tool),
    ];
    prop::collection::vec(msg, 0..20).boxed()
}

// ---------------------------------------------------------------------------
// Turn order

/// Role letter: u user, a plain assistant, c assistant with call, t tool,
/// s system.
pub fn role_letter(m: &Message) -> char {
    match (m.role, m.tool_call.is_some()) {
        (Role::User, _) => 'u',
        (Role::Assistant, true) => 'c',
        (Role::Assistant, false) => 'a',
        (Role::Tool, _) => 't',
        (Role::System, _) => 's',
    }
}

pub fn message_for(letter: char) -> Message {
    match letter {
        'u' => Message::user("u"),
        'a' => Message::assistant("a"),
        'c' => Message::assistant_call("c", ToolCall::new("f", Map::new())),
        't' => Message::tool("t"),
        _ => Message {
            role: Role::System,
            text: "s".into(),
            tool_call: None,
            text_after_call: String::new(),
        },
    }
}

pub fn turn_order_oracle() -> regex::Regex {
    regex::Regex::new("^(u(ct)*a)+$").expect("regex")
}

/// Every word over `alphabet` of length `0..=max_len`.
pub fn all_words(alphabet: &[char], max_len: usize) -> Vec<String> {
    let mut out = vec![String::new()];
    let mut frontier = vec![String::new()];
    for _ in 0..max_len {
        let mut next = Vec::with_capacity(frontier.len() * alphabet.len());
        for w in &frontier {
            for c in alphabet {
                let mut v = w.clone();
                v.push(*c);
                next.push(v);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

// ---------------------------------------------------------------------------
// Schema conformance

fn scalar_value(ty: ParamType) -> BoxedStrategy<Value> {
    match ty {
        ParamType::String => "[a-z]{0,4}".prop_map(Value::String).boxed(),
        ParamType::Integer => (-5i64..5).prop_map(Value::from).boxed(),
        ParamType::Number => prop_oneof![
            (-5i64..5).prop_map(Value::from),
            (-20i32..20).prop_map(|n| json!(f64::from(n) / 4.0)),
        ]
        .boxed(),
        ParamType::Boolean => any::<bool>().prop_map(Value::Bool).boxed(),
        _ => Just(Value::Null).boxed(),
    }
}

fn leaf_schema() -> BoxedStrategy<ParamSchema> {
    let ty = prop::sample::select(vec![
        ParamType::String,
        ParamType::Integer,
        ParamType::Number,
        ParamType::Boolean,
    ]);
    ty.prop_flat_map(|ty| {
        let members = prop::option::weighted(0.3, prop::collection::vec(scalar_value(ty), 1..4));
        members.prop_map(move |m| {
            let mut s = ParamSchema::new(ty, "");
            s.enum_values = m;
            s
        })
    })
    .boxed()
}

fn props_and_required(
    inner: BoxedStrategy<ParamSchema>,
) -> BoxedStrategy<(BTreeMap<String, ParamSchema>, Vec<String>)> {
    prop::collection::btree_map("[a-e]", inner, 0..4)
        .prop_flat_map(|props| {
            let keys: Vec<String> = props.keys().cloned().collect();
            let n = keys.len();
            (Just(props), prop::sample::subsequence(keys, 0..=n))
        })
        .boxed()
}

/// Parameter schemas nested at most three levels deep.
pub fn param_schema() -> BoxedStrategy<ParamSchema> {
    leaf_schema()
        .prop_recursive(2, 16, 3, |inner| {
            prop_oneof![
                inner
                    .clone()
                    .prop_map(|items| ParamSchema::new(ParamType::Array, "").with_items(items)),
                Just(ParamSchema::new(ParamType::Array, "")),
                Just(ParamSchema::new(ParamType::Object, "")),
                props_and_required(inner).prop_map(|(props, required)| {
                    let mut s = ParamSchema::new(ParamType::Object, "");
                    s.properties = Some(props);
                    s.required = required;
                    s
                }),
            ]
        })
        .boxed()
}

pub fn tool_def() -> BoxedStrategy<ToolDef> {
    (ident(), props_and_required(param_schema()))
        .prop_map(|(name, (properties, required))| ToolDef {
            name,
            description: String::new(),
            input_schema: InputSchema {
                ty: "object".into(),
                properties,
                required,
            },
        })
        .boxed()
}

pub fn toolset() -> BoxedStrategy<Vec<ToolDef>> {
    prop::collection::vec(tool_def(), 1..4)
        .prop_map(|mut tools| {
            let mut seen = BTreeSet::new();
            tools.retain(|t| seen.insert(t.name.clone()));
            tools
        })
        .boxed()
}

/// A value that mostly conforms to `schema`, sometimes anything at all.
pub fn value_for(schema: &ParamSchema) -> BoxedStrategy<Value> {
    let conforming: BoxedStrategy<Value> = match schema.ty {
        ParamType::Array => {
            let items = schema
                .items
                .as_deref()
                .cloned()
                .unwrap_or_else(|| ParamSchema::new(ParamType::String, ""));
            prop::collection::vec(value_for(&items), 0..3)
                .prop_map(Value::Array)
                .boxed()
        }
        ParamType::Object => match &schema.properties {
            Some(props) => object_for(props.clone()).prop_map(Value::Object).boxed(),
            None => arguments().prop_map(Value::Object).boxed(),
        },
        ty => match &schema.enum_values {
            Some(m) if !m.is_empty() => prop_oneof![
                4 => prop::sample::select(m.clone()),
                1 => scalar_value(ty),
            ]
            .boxed(),
            _ => scalar_value(ty),
        },
    };
    prop_oneof![6 => conforming, 1 => json_leaf(), 1 => scalar_value(ParamType::Integer)].boxed()
}

fn object_for(props: BTreeMap<String, ParamSchema>) -> BoxedStrategy<Map<String, Value>> {
    let fields: Vec<BoxedStrategy<Option<(String, Value)>>> = props
        .into_iter()
        .map(|(k, s)| prop::option::weighted(0.85, value_for(&s).prop_map(move |v| (k.clone(), v))).boxed())
        .collect();
    let extra = prop::option::weighted(0.1, ("[f-h]", json_leaf()));
    (fields, extra)
        .prop_map(|(fields, extra)| fields.into_iter().flatten().chain(extra).collect())
        .boxed()
}

/// A tool set plus a call that usually targets one of its tools.
pub fn schema_and_call() -> BoxedStrategy<(Vec<ToolDef>, ToolCall)> {
    toolset()
        .prop_flat_map(|tools| {
            let n = tools.len();
            let targets = tools.clone();
            let call = (0..n + 1).prop_flat_map(move |i| match targets.get(i) {
                Some(t) if i < n => {
                    let name = t.name.clone();
                    object_for(t.input_schema.properties.clone())
                        .prop_map(move |args| ToolCall::new(name.clone(), args))
                        .boxed()
                }
                _ => tool_call(),
            });
            (Just(tools), call)
        })
        .boxed()
}

fn json_kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
        Value::Number(n) if n.is_f64() => "number",
        Value::Number(_) => "integer",
    }
}

fn admissible(declared: ParamType) -> &'static [&'static str] {
    match declared {
        ParamType::String => &["string"],
        ParamType::Number => &["number", "integer"],
        ParamType::Integer => &["integer"],
        ParamType::Boolean => &["boolean"],
        ParamType::Array => &["array"],
        ParamType::Object => &["object"],
    }
}

/// Diagnostic code names `check_call` should report.
pub fn conformance_oracle(call: &ToolCall, tools: &[ToolDef]) -> BTreeSet<&'static str> {
    let mut codes = BTreeSet::new();
    match tools.iter().find(|t| t.name == call.name) {
        None => {
            codes.insert("UNKNOWN_TOOL");
        }
        Some(tool) => oracle_object(
            &call.arguments,
            &tool.input_schema.properties,
            &tool.input_schema.required,
            &mut codes,
        ),
    }
    codes
}

fn oracle_object(
    map: &Map<String, Value>,
    props: &BTreeMap<String, ParamSchema>,
    required: &[String],
    codes: &mut BTreeSet<&'static str>,
) {
    if required.iter().any(|r| !map.contains_key(r)) {
        codes.insert("MISSING_REQUIRED");
    }
    for (k, v) in map {
        match props.get(k) {
            None => {
                codes.insert("UNDECLARED_ARG");
            }
            Some(s) => oracle_value(v, s, codes),
        }
    }
}

fn oracle_value(v: &Value, s: &ParamSchema, codes: &mut BTreeSet<&'static str>) {
    if !admissible(s.ty).contains(&json_kind(v)) {
        codes.insert("TYPE_MISMATCH");
        return;
    }
    if let Some(members) = &s.enum_values {
        if !members.iter().any(|m| m == v) {
            codes.insert("ENUM_VIOLATION");
        }
    }
    if let (Value::Array(xs), Some(items)) = (v, s.items.as_deref()) {
        xs.iter().for_each(|x| oracle_value(x, items, codes));
    }
    if let (Value::Object(m), Some(props)) = (v, s.properties.as_ref()) {
        oracle_object(m, props, &s.required, codes);
    }
}

// ---------------------------------------------------------------------------
// Grounding

pub const POOL: [&str; 8] = ["W2575533", "A1", "Paris", "42", "7", "blue", "2.5", "ORD-9"];

fn pool_value() -> BoxedStrategy<Value> {
    prop_oneof![
        prop::sample::select(POOL.to_vec()).prop_map(|s| json!(s)),
        prop::sample::select(vec![42i64, 7, 19]).prop_map(Value::from),
        prop::sample::select(vec![2.5f64, 3.0, 0.125]).prop_map(|f| json!(f)),
        prop::sample::select(vec!["fast", "slow"]).prop_map(|s| json!(s)),
        any::<bool>().prop_map(Value::Bool),
        Just(json!("")),
    ]
    .boxed()
}

fn pool_text() -> BoxedStrategy<String> {
    prop::collection::vec(
        prop_oneof![
            prop::sample::select(POOL.to_vec()),
            prop::sample::select(vec!["the", "order", "ok"])
        ],
        0..4,
    )
    .prop_map(|w| w.join(" "))
    .boxed()
}

fn pool_args() -> BoxedStrategy<Map<String, Value>> {
    let nested = pool_value().prop_recursive(2, 6, 2, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 0..3).prop_map(Value::Array),
            prop::collection::btree_map("[xy]", inner, 0..2).prop_map(|m| Value::Object(m.into_iter().collect())),
        ]
    });
    prop::collection::btree_map(
        prop::sample::select(vec!["id", "mode", "city", "n", "extra"]),
        nested,
        0..4,
    )
    .prop_map(|m| m.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
    .boxed()
}

/// Tool set whose `mode` argument is an enum.
pub fn grounding_tools() -> Vec<ToolDef> {
    let mut properties = BTreeMap::new();
    properties.insert(
        "mode".to_string(),
        ParamSchema::new(ParamType::String, "").with_enum(vec![json!("fast"), json!("slow")]),
    );
    vec![ToolDef {
        name: "op".into(),
        description: String::new(),
        input_schema: InputSchema {
            ty: "object".into(),
            properties,
            required: vec![],
        },
    }]
}

/// Trajectories whose texts and arguments draw on a small shared pool, so
/// both grounded and ungrounded values are common.
pub fn grounding_trajectory() -> BoxedStrategy<Trajectory> {
    let exchange = (
        pool_text(),
        prop::sample::select(vec!["op", "other"]),
        pool_args(),
        pool_text(),
    )
        .prop_map(|(text, name, args, result)| {
            [
                Message::assistant_call(text, ToolCall::new(name, args)),
                Message::tool(result),
            ]
        });
    let round = (pool_text(), prop::collection::vec(exchange, 0..3), pool_text()).prop_map(|(u, ex, a)| {
        let mut out = vec![Message::user(u)];
        out.extend(ex.into_iter().flatten());
        out.push(Message::assistant(a));
        out
    });
    (pool_text(), prop::collection::vec(round, 1..4))
        .prop_map(|(system, rounds)| Trajectory::new(system, rounds.into_iter().flatten().collect()))
        .boxed()
}

pub fn pool_round() -> BoxedStrategy<Vec<Message>> {
    (pool_text(), pool_text())
        .prop_map(|(u, a)| vec![Message::user(u), Message::assistant(a)])
        .boxed()
}

fn oracle_number(n: &serde_json::Number) -> String {
    match n.as_f64() {
        Some(f) if n.is_f64() && f.fract() == 0.0 && f.abs() < 9.0e15 => format!("{}", f as i64),
        _ => n.to_string(),
    }
}

fn oracle_call_json(c: &ToolCall) -> String {
    format!(
        "{{\"name\":{},\"arguments\":{}}}",
        serde_json::to_string(&c.name).unwrap(),
        serde_json::to_string(&c.arguments).unwrap()
    )
}

fn oracle_prefix(t: &Trajectory, upto: usize) -> String {
    let mut s = t.system.clone();
    for m in &t.messages[..upto] {
        s += "\n";
        s += &m.text;
        if let Some(c) = &m.tool_call {
            s += "\n";
            s += &oracle_call_json(c);
        }
        if !m.text_after_call.is_empty() {
            s += "\n";
            s += &m.text_after_call;
        }
    }
    s
}

/// `(message index, argument path, value)` for every value not found in the
/// preceding text, by a naive prefix scan.
pub fn grounding_oracle(t: &Trajectory, tools: &[ToolDef]) -> Vec<(usize, String, Value)> {
    let mut out = Vec::new();
    for (i, m) in t.messages.iter().enumerate() {
        let Some(call) = &m.tool_call else { continue };
        let prefix = oracle_prefix(t, i);
        let tool = tools.iter().find(|d| d.name == call.name);
        for (k, v) in &call.arguments {
            let schema = tool.and_then(|d| d.input_schema.properties.get(k));
            oracle_leaves(v, schema, k.clone(), &prefix, i, &mut out);
        }
    }
    out
}

fn oracle_leaves(
    v: &Value,
    schema: Option<&ParamSchema>,
    path: String,
    prefix: &str,
    i: usize,
    out: &mut Vec<(usize, String, Value)>,
) {
    let enum_member = schema
        .and_then(|s| s.enum_values.as_ref())
        .map(|m| m.contains(v))
        .unwrap_or(false);
    let missing = match v {
        Value::String(s) => !s.is_empty() && !prefix.contains(s.as_str()),
        Value::Number(n) => !prefix.contains(&oracle_number(n)),
        Value::Array(xs) => {
            for (j, x) in xs.iter().enumerate() {
                let items = schema.and_then(|s| s.items.as_deref());
                oracle_leaves(x, items, format!("{path}[{j}]"), prefix, i, out);
            }
            false
        }
        Value::Object(m) => {
            for (k, x) in m {
                let field = schema.and_then(|s| s.properties.as_ref()).and_then(|p| p.get(k));
                oracle_leaves(x, field, format!("{path}.{k}"), prefix, i, out);
            }
            false
        }
        _ => false,
    };
    if missing && !enum_member {
        out.push((i, path, v.clone()));
    }
}

// ---------------------------------------------------------------------------
// Statistics

/// `(messages, distinct tools, calls, rounds)` by a single linear scan.
pub fn stats_oracle(messages: &[Message], count_system: bool) -> (usize, usize, usize, usize) {
    let mut n = if count_system { 1 } else { 0 };
    let mut seen: Vec<&str> = Vec::new();
    let mut calls = 0;
    let mut users = 0;
    for m in messages {
        n += 1;
        if m.role == Role::User {
            users += 1;
        }
        if let Some(c) = &m.tool_call {
            calls += 1;
            if !seen.contains(&c.name.as_str()) {
                seen.push(&c.name);
            }
        }
    }
    (n, seen.len(), calls, users)
}
