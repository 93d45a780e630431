//! Recovery of malformed scene-graph documents.
//!
//! Two stages: a deterministic rule pass ([`fix_malformed_json`]) and a
//! language-model pass ([`llm_repair`]) for what the rules cannot fix. The
//! rule list is ordered and append-only; rounds of the full list are applied
//! until the text stops changing, which makes the pass idempotent.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use super::prompts::fix_graph_prompt;
use super::{parse_scene_graph, ParseFailure};
use crate::clients::{fixture_key, ClientError, CommandTransport, FixtureDir, FixtureRecord};

const MAX_ROUNDS: usize = 8;

/// Rule identifiers in application order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepairRule {
    /// Drop code fences and prose before the first `{` / after the last `}`.
    StripWrapper,
    TrailingCommas,
    /// Drop backslashes that start no valid escape; escape raw control characters.
    InvalidEscapes,
    SmartQuotes,
    /// Fold aliased or stray edge keys into `source`/`target`/`relation`.
    RestructureEdges,
    DedupeAttributes,
}

impl RepairRule {
    pub const ORDER: [RepairRule; 6] = [
        RepairRule::StripWrapper,
        RepairRule::TrailingCommas,
        RepairRule::InvalidEscapes,
        RepairRule::SmartQuotes,
        RepairRule::RestructureEdges,
        RepairRule::DedupeAttributes,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RepairRule::StripWrapper => "strip_wrapper",
            RepairRule::TrailingCommas => "trailing_commas",
            RepairRule::InvalidEscapes => "invalid_escapes",
            RepairRule::SmartQuotes => "smart_quotes",
            RepairRule::RestructureEdges => "restructure_edges",
            RepairRule::DedupeAttributes => "dedupe_attributes",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairOutcome {
    pub repaired_text: String,
    pub rules_applied: Vec<RepairRule>,
    pub used_llm: bool,
}

impl RepairOutcome {
    pub fn parses(&self) -> bool {
        parse_scene_graph(&self.repaired_text).is_ok()
    }
}

/// Applies the rule-based repairs. Text that already parses is returned
/// unchanged.
pub fn fix_malformed_json(text: &str) -> RepairOutcome {
    if parse_scene_graph(text).is_ok() {
        return RepairOutcome {
            repaired_text: text.to_string(),
            rules_applied: Vec::new(),
            used_llm: false,
        };
    }
    let mut current = text.to_string();
    let mut applied = BTreeSet::new();
    for _ in 0..MAX_ROUNDS {
        let (next, fired) = repair_round(&current);
        if next == current {
            break;
        }
        applied.extend(fired);
        current = next;
        if parse_scene_graph(&current).is_ok() {
            break;
        }
    }
    RepairOutcome {
        repaired_text: current,
        rules_applied: applied.into_iter().collect(),
        used_llm: false,
    }
}

fn repair_round(text: &str) -> (String, Vec<RepairRule>) {
    let mut fired = Vec::new();
    let mut current = text.to_string();
    let text_rules: [(RepairRule, fn(&str) -> String); 4] = [
        (RepairRule::StripWrapper, strip_wrapper),
        (RepairRule::TrailingCommas, remove_trailing_commas),
        (RepairRule::InvalidEscapes, fix_escapes),
        (RepairRule::SmartQuotes, normalize_smart_quotes),
    ];
    for (rule, apply) in text_rules {
        let next = apply(&current);
        if next != current {
            fired.push(rule);
            current = next;
        }
    }
    if let Ok(mut value) = serde_json::from_str::<Value>(&current) {
        let mut changed = false;
        if restructure_edges(&mut value) {
            fired.push(RepairRule::RestructureEdges);
            changed = true;
        }
        if dedupe_attributes(&mut value) {
            fired.push(RepairRule::DedupeAttributes);
            changed = true;
        }
        if changed {
            current = serde_json::to_string_pretty(&value).expect("json value serializes");
        }
    }
    (current, fired)
}

fn strip_wrapper(s: &str) -> String {
    let Some(start) = s.find('{') else {
        return s.to_string();
    };
    let end = match s.rfind('}') {
        Some(e) if e > start => e + 1,
        _ => s.len(),
    };
    s[start..end].to_string()
}

fn remove_trailing_commas(s: &str) -> String {
    let chars: Vec<char> = s.chars().collect();
    let mut out = String::with_capacity(s.len());
    let mut in_str = false;
    let mut escaped = false;
    for (i, &c) in chars.iter().enumerate() {
        if in_str {
            out.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_str = false;
            }
            continue;
        }
        match c {
            '"' => {
                in_str = true;
                out.push(c);
            }
            ',' => {
                let next = chars[i + 1..].iter().find(|ch| !ch.is_whitespace());
                if !matches!(next, Some(']') | Some('}')) {
                    out.push(c);
                }
            }
            _ => out.push(c),
        }
    }
    out
}

fn fix_escapes(s: &str) -> String {
    let chars: Vec<char> = s.chars().collect();
    let mut out = String::with_capacity(s.len());
    let mut in_str = false;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if !in_str {
            if c == '"' {
                in_str = true;
            }
            out.push(c);
            i += 1;
            continue;
        }
        match c {
            '"' => {
                in_str = false;
                out.push(c);
                i += 1;
            }
            '\\' => match chars.get(i + 1) {
                Some('"' | '\\' | '/' | 'b' | 'f' | 'n' | 'r' | 't') => {
                    out.push(c);
                    out.push(chars[i + 1]);
                    i += 2;
                }
                Some('u')
                    if chars.len() >= i + 6
                        && chars[i + 2..i + 6].iter().all(|h| h.is_ascii_hexdigit()) =>
                {
                    out.extend(&chars[i..i + 6]);
                    i += 6;
                }
                // Stray backslash: keep the character it was meant to escape.
                _ => i += 1,
            },
            '\n' => {
                out.push_str("\\n");
                i += 1;
            }
            '\r' => {
                out.push_str("\\r");
                i += 1;
            }
            '\t' => {
                out.push_str("\\t");
                i += 1;
            }
            c if (c as u32) < 0x20 => {
                out.push_str(&format!("\\u{:04x}", c as u32));
                i += 1;
            }
            _ => {
                out.push(c);
                i += 1;
            }
        }
    }
    out
}

fn is_smart_double(c: char) -> bool {
    matches!(c, '\u{201C}' | '\u{201D}' | '\u{201E}' | '\u{201F}' | '\u{2033}')
}

fn normalize_smart_quotes(s: &str) -> String {
    #[derive(PartialEq)]
    enum State {
        Outside,
        Plain,
        Smart,
    }
    let mut out = String::with_capacity(s.len());
    let mut state = State::Outside;
    let mut escaped = false;
    for c in s.chars() {
        if matches!(c, '\u{2018}' | '\u{2019}' | '\u{201A}' | '\u{201B}') {
            out.push('\'');
            continue;
        }
        match state {
            State::Outside => {
                if c == '"' {
                    state = State::Plain;
                    out.push('"');
                } else if is_smart_double(c) {
                    state = State::Smart;
                    out.push('"');
                } else {
                    out.push(c);
                }
            }
            State::Plain | State::Smart => {
                if escaped {
                    escaped = false;
                    out.push(c);
                } else if c == '\\' {
                    escaped = true;
                    out.push(c);
                } else if c == '"' {
                    state = State::Outside;
                    out.push('"');
                } else if is_smart_double(c) {
                    if state == State::Smart {
                        state = State::Outside;
                        out.push('"');
                    } else {
                        out.push('\'');
                    }
                } else {
                    out.push(c);
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Slot {
    Source,
    Target,
    Relation,
}

fn slot_for(key: &str) -> Option<Slot> {
    match key.to_ascii_lowercase().as_str() {
        "source" | "src" | "from" | "subject" | "head" | "start" | "source_id" | "from_node"
        | "node1" => Some(Slot::Source),
        "target" | "tgt" | "dst" | "to" | "object" | "tail" | "end" | "target_id" | "to_node"
        | "node2" => Some(Slot::Target),
        "relation" | "rel" | "relationship" | "label" | "predicate" | "type" | "edge"
        | "name" => Some(Slot::Relation),
        _ => None,
    }
}

fn endpoint_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Object(m) => m.get("id").and_then(Value::as_str).map(str::to_string),
        _ => None,
    }
}

fn restructure_edges(root: &mut Value) -> bool {
    let Some(obj) = root.as_object_mut() else {
        return false;
    };
    let mut changed = false;
    if !obj.contains_key("edges") {
        for alias in ["relations", "relationships", "links"] {
            if let Some(v) = obj.shift_remove(alias) {
                obj.insert("edges".to_string(), v);
                changed = true;
                break;
            }
        }
    }
    if let Some(Value::Array(edges)) = obj.get_mut("edges") {
        for e in edges.iter_mut() {
            if let Some(fixed) = restructure_edge(e) {
                *e = fixed;
                changed = true;
            }
        }
    }
    changed
}

fn restructure_edge(edge: &Value) -> Option<Value> {
    let build = |s: String, t: String, r: String| {
        let mut m = Map::new();
        m.insert("source".into(), Value::String(s));
        m.insert("target".into(), Value::String(t));
        m.insert("relation".into(), Value::String(r));
        Value::Object(m)
    };
    match edge {
        Value::Array(items) if items.len() == 3 && items.iter().all(Value::is_string) => {
            let s = |i: usize| items[i].as_str().unwrap_or_default().to_string();
            Some(build(s(0), s(2), s(1)))
        }
        Value::Object(map) => {
            let well_formed = ["source", "target", "relation"]
                .iter()
                .all(|k| map.get(*k).is_some_and(Value::is_string));
            if well_formed {
                return None;
            }
            let (mut source, mut target, mut relation) = (None, None, None);
            let mut stray: Vec<(String, String)> = Vec::new();
            for (k, v) in map {
                let value = endpoint_string(v);
                let slot = match slot_for(k) {
                    Some(Slot::Source) => &mut source,
                    Some(Slot::Target) => &mut target,
                    Some(Slot::Relation) => &mut relation,
                    None => {
                        if let Value::String(s) = v {
                            stray.push((k.clone(), s.clone()));
                        }
                        continue;
                    }
                };
                if slot.is_none() {
                    *slot = value;
                }
            }
            // {"person": "backpack", "relation": "carries"}
            if source.is_none() && target.is_none() && stray.len() == 1 {
                let (k, v) = stray.remove(0);
                source = Some(k);
                target = Some(v);
            }
            if relation.is_none() && stray.len() == 1 {
                relation = Some(stray.remove(0).1);
            }
            match (source, target, relation) {
                (Some(s), Some(t), Some(r)) => Some(build(s, t, r)),
                _ => None,
            }
        }
        _ => None,
    }
}

fn dedupe_attributes(root: &mut Value) -> bool {
    let Some(Value::Array(nodes)) = root.get_mut("nodes") else {
        return false;
    };
    let mut changed = false;
    for node in nodes.iter_mut() {
        if let Some(Value::Array(attrs)) = node.get_mut("attributes") {
            let mut seen: Vec<Value> = Vec::with_capacity(attrs.len());
            let before = attrs.len();
            attrs.retain(|a| {
                if seen.contains(a) {
                    false
                } else {
                    seen.push(a.clone());
                    true
                }
            });
            changed |= attrs.len() != before;
        }
    }
    changed
}

/// Client for the language-model repair stage.
///
/// Calls are serialized per client (`&mut self`).
pub trait RepairClient {
    /// `input` is the malformed document, `prompt` the full repair prompt.
    fn fix_graph(&mut self, input: &str, prompt: &str) -> Result<String, ClientError>;
}

/// Replays recorded repairs keyed by the hash of the malformed input.
pub struct ReplayRepairClient {
    fixtures: FixtureDir,
}

impl ReplayRepairClient {
    pub fn new(fixtures: FixtureDir) -> Self {
        Self { fixtures }
    }
}

impl RepairClient for ReplayRepairClient {
    fn fix_graph(&mut self, input: &str, _prompt: &str) -> Result<String, ClientError> {
        let key = fixture_key(input);
        match self.fixtures.load(&key)? {
            Some(rec) => Ok(rec.response),
            None => Err(ClientError::Unavailable(format!(
                "no repair fixture {key} in {}",
                self.fixtures.root().display()
            ))),
        }
    }
}

/// Sends the prompt to an external runtime; optionally records responses as
/// fixtures for later replay.
pub struct LiveRepairClient {
    transport: CommandTransport,
    record_to: Option<FixtureDir>,
}

impl LiveRepairClient {
    pub fn new(transport: CommandTransport, record_to: Option<FixtureDir>) -> Self {
        Self {
            transport,
            record_to,
        }
    }
}

impl RepairClient for LiveRepairClient {
    fn fix_graph(&mut self, input: &str, prompt: &str) -> Result<String, ClientError> {
        let response = self.transport.call(prompt)?;
        if let Some(fx) = &self.record_to {
            fx.store(
                &fixture_key(input),
                &FixtureRecord {
                    request: input.to_string(),
                    response: response.clone(),
                },
            )?;
        }
        Ok(response)
    }
}

/// A client with no backend. Every call fails without being an outage, so
/// documents that need it are recorded as failures.
pub struct NoRepairClient;

impl RepairClient for NoRepairClient {
    fn fix_graph(&mut self, _input: &str, _prompt: &str) -> Result<String, ClientError> {
        Err(ClientError::Disabled("no repair backend configured".into()))
    }
}

#[derive(Debug, Error)]
pub enum RepairError {
    #[error("input is repairable without the language model")]
    NotNeeded,
    #[error("repair model unavailable: {0}")]
    Unavailable(String),
    #[error("repair client error: {0}")]
    Client(ClientError),
    #[error("still unparseable after model and rule repair: {0}")]
    Failed(ParseFailure),
}

/// Language-model repair followed by the rule pass on the model's answer.
///
/// Only valid for text the rule pass alone cannot fix.
pub fn llm_repair(text: &str, client: &mut dyn RepairClient) -> Result<RepairOutcome, RepairError> {
    if parse_scene_graph(text).is_ok() || fix_malformed_json(text).parses() {
        return Err(RepairError::NotNeeded);
    }
    let response = client
        .fix_graph(text, &fix_graph_prompt(text))
        .map_err(|e| match e {
            ClientError::Unavailable(m) => RepairError::Unavailable(m),
            other => RepairError::Client(other),
        })?;
    let cleaned = fix_malformed_json(&response);
    match parse_scene_graph(&cleaned.repaired_text) {
        Ok(_) => Ok(RepairOutcome {
            repaired_text: cleaned.repaired_text,
            rules_applied: cleaned.rules_applied,
            used_llm: true,
        }),
        Err(e) => Err(RepairError::Failed(e)),
    }
}
