//! Lenient ingestion of hand-written or model-generated SOP documents.
//!
//! Accepts the key spellings found in hand-authored SOP files
//! (`"Communication Sturcture"`, `"Agent Specifications"`) alongside the
//! canonical snake_case keys, and a communication structure given either as
//! numbered edge text or as a canonical `{edges, description}` object.

use serde_json::{Map, Value};
use thiserror::Error;

use super::types::{AgentSpec, CommunicationStructure, Edge, Node, Sop};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("no JSON object found in text")]
    NoJsonFound,
    #[error("missing field `{0}`")]
    MissingField(String),
    #[error("type mismatch at `{0}`")]
    TypeMismatch(String),
}

const TEAM_KEYS: &[&str] = &["team", "Team"];
const STRUCTURE_KEYS: &[&str] = &[
    "communication_structure",
    "Communication Sturcture",
    "Communication Structure",
    "communication structure",
];
const AGENTS_KEYS: &[&str] = &["agents", "Agent Specifications", "agent_specifications"];

/// Returns the first balanced JSON object in `text` that parses, tolerating
/// surrounding prose, code fences and raw control characters inside strings.
pub fn extract_json_object(text: &str) -> Result<Value, ParseError> {
    let bytes = text.as_bytes();
    let mut start = 0;
    while let Some(off) = text[start..].find('{') {
        let open = start + off;
        if let Some(close) = matching_brace(bytes, open) {
            let candidate = &text[open..=close];
            let parsed = serde_json::from_str::<Value>(candidate)
                .or_else(|_| serde_json::from_str::<Value>(&escape_raw_controls(candidate)));
            if let Ok(v @ Value::Object(_)) = parsed {
                return Ok(v);
            }
        }
        start = open + 1;
    }
    Err(ParseError::NoJsonFound)
}

fn matching_brace(bytes: &[u8], open: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(open) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

/// Escapes literal newlines, carriage returns and tabs that appear inside
/// string literals; such documents are common in hand-wrapped SOP files.
fn escape_raw_controls(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut in_string = false;
    let mut escaped = false;
    for c in s.chars() {
        if in_string {
            if escaped {
                escaped = false;
                out.push(c);
                continue;
            }
            match c {
                '\\' => {
                    escaped = true;
                    out.push(c);
                }
                '"' => {
                    in_string = false;
                    out.push(c);
                }
                '\n' => out.push_str("\\n"),
                '\r' => out.push_str("\\r"),
                '\t' => out.push_str("\\t"),
                _ => out.push(c),
            }
        } else {
            if c == '"' {
                in_string = true;
            }
            out.push(c);
        }
    }
    out
}

fn lookup<'a>(obj: &'a Map<String, Value>, keys: &[&str]) -> Option<&'a Value> {
    keys.iter().find_map(|k| obj.get(*k))
}

fn as_string(v: &Value, path: &str) -> Result<String, ParseError> {
    v.as_str()
        .map(str::to_string)
        .ok_or_else(|| ParseError::TypeMismatch(path.to_string()))
}

fn string_list(v: &Value, path: &str) -> Result<Vec<String>, ParseError> {
    let arr = v
        .as_array()
        .ok_or_else(|| ParseError::TypeMismatch(path.to_string()))?;
    arr.iter()
        .enumerate()
        .map(|(i, x)| as_string(x, &format!("{path}[{i}]")))
        .collect()
}

/// Parses the first JSON object in `text` as an SOP.
pub fn parse_sop_text(text: &str) -> Result<Sop, ParseError> {
    ingest_sop(&extract_json_object(text)?)
}

/// Maps a fixture-style or canonical JSON value onto an [`Sop`].
pub fn ingest_sop(value: &Value) -> Result<Sop, ParseError> {
    let obj = value
        .as_object()
        .ok_or_else(|| ParseError::TypeMismatch("$".into()))?;

    let team_v = lookup(obj, TEAM_KEYS).ok_or_else(|| ParseError::MissingField("team".into()))?;
    let team = string_list(team_v, "team")?;

    let structure_v = lookup(obj, STRUCTURE_KEYS)
        .ok_or_else(|| ParseError::MissingField("communication_structure".into()))?;
    let communication_structure = ingest_structure(structure_v)?;

    let agents_v = lookup(obj, AGENTS_KEYS).ok_or_else(|| ParseError::MissingField("agents".into()))?;
    let agents_arr = agents_v
        .as_array()
        .ok_or_else(|| ParseError::TypeMismatch("agents".into()))?;
    let agents = agents_arr
        .iter()
        .enumerate()
        .map(|(i, a)| ingest_agent(a, &format!("agents[{i}]")))
        .collect::<Result<Vec<_>, _>>()?;

    Ok(Sop {
        team,
        communication_structure,
        agents,
    })
}

/// Parses one agent specification object; `path` prefixes error locations.
pub fn ingest_agent(v: &Value, path: &str) -> Result<AgentSpec, ParseError> {
    let obj = v
        .as_object()
        .ok_or_else(|| ParseError::TypeMismatch(path.to_string()))?;
    let field = |name: &str| -> Result<String, ParseError> {
        let v = obj
            .get(name)
            .ok_or_else(|| ParseError::MissingField(format!("{path}.{name}")))?;
        as_string(v, &format!("{path}.{name}"))
    };
    let tools = match obj.get("tools") {
        None | Some(Value::Null) => Vec::new(),
        Some(v) => string_list(v, &format!("{path}.tools"))?,
    };
    Ok(AgentSpec {
        name: field("name")?,
        responsibility: field("responsibility")?,
        instruction: field("instruction")?,
        tools,
    })
}

fn ingest_structure(v: &Value) -> Result<CommunicationStructure, ParseError> {
    const PATH: &str = "communication_structure";
    match v {
        Value::String(text) => Ok(CommunicationStructure::parse_text(text)),
        Value::Object(obj) => {
            let edges_v = obj
                .get("edges")
                .ok_or_else(|| ParseError::MissingField(format!("{PATH}.edges")))?;
            let edges_arr = edges_v
                .as_array()
                .ok_or_else(|| ParseError::TypeMismatch(format!("{PATH}.edges")))?;
            let mut edges = Vec::with_capacity(edges_arr.len());
            for (i, e) in edges_arr.iter().enumerate() {
                let p = format!("{PATH}.edges[{i}]");
                let eo = e.as_object().ok_or_else(|| ParseError::TypeMismatch(p.clone()))?;
                let get = |k: &str| -> Result<String, ParseError> {
                    let v = eo
                        .get(k)
                        .ok_or_else(|| ParseError::MissingField(format!("{p}.{k}")))?;
                    as_string(v, &format!("{p}.{k}"))
                };
                let condition = match eo.get("condition") {
                    None | Some(Value::Null) => None,
                    Some(c) => Some(as_string(c, &format!("{p}.condition"))?),
                };
                edges.push(Edge {
                    from: Node::from(get("from")?),
                    to: Node::from(get("to")?),
                    condition,
                });
            }
            let description = match obj.get("description") {
                None | Some(Value::Null) => String::new(),
                Some(d) => as_string(d, &format!("{PATH}.description"))?,
            };
            Ok(CommunicationStructure { edges, description })
        }
        _ => Err(ParseError::TypeMismatch(PATH.into())),
    }
}

/// Renders an SOP in the hand-authored layout: `team`, textual
/// `Communication Structure`, then `Agent Specifications`.
pub fn to_fixture_value(sop: &Sop) -> Value {
    let mut obj = Map::new();
    obj.insert("team".into(), Value::from(sop.team.clone()));
    obj.insert(
        "Communication Structure".into(),
        Value::from(sop.communication_structure.render_text()),
    );
    let agents: Vec<Value> = sop
        .agents
        .iter()
        .map(|a| {
            let mut m = Map::new();
            m.insert("name".into(), Value::from(a.name.clone()));
            m.insert("responsibility".into(), Value::from(a.responsibility.clone()));
            m.insert("instruction".into(), Value::from(a.instruction.clone()));
            m.insert("tools".into(), Value::from(a.tools.clone()));
            Value::Object(m)
        })
        .collect();
    obj.insert("Agent Specifications".into(), Value::Array(agents));
    Value::Object(obj)
}

pub fn to_fixture_text(sop: &Sop) -> String {
    serde_json::to_string_pretty(&to_fixture_value(sop)).expect("json values always serialize")
}
