//! Textual scene graphs emitted by the vision-language model.
//!
//! A document has the shape
//!
//! ```text
//! { "nodes": [ { "id": "person", "attributes": ["tall", "male"] }, ... ],
//!   "edges": [ { "source": "person", "target": "backpack", "relation": "carries" }, ... ] }
//! ```
//!
//! [`parse_scene_graph`] validates and canonicalizes such a document,
//! [`repair`] recovers malformed generations, and [`transform`] prepares a
//! parsed graph for the graph encoder (attribute expansion, flow reversal).

pub mod prompts;
pub mod repair;
pub mod transform;

use std::collections::HashMap;

use serde_json::Value;
use thiserror::Error;

pub use repair::{
    fix_malformed_json, llm_repair, LiveRepairClient, NoRepairClient, RepairClient, RepairError, RepairOutcome, RepairRule,
    ReplayRepairClient,
};
pub use transform::{expand_attributes, prepare, reverse_flow, TransformError, ATTRIBUTE_RELATION};

/// Identifier of the node every graph is centred on.
pub const PERSON_NODE_ID: &str = "person";

/// Separator between an attribute string and its owner in disambiguated ids.
pub const OWNER_SEPARATOR: char = '#';

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeKind {
    /// A node emitted by the generator.
    Object,
    /// A node created from an attribute string of `owner`.
    Attribute { owner: String, label: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SgNode {
    pub id: String,
    pub attributes: Vec<String>,
    pub kind: NodeKind,
}

impl SgNode {
    pub fn object(id: impl Into<String>, attributes: Vec<String>) -> Self {
        Self {
            id: id.into(),
            attributes,
            kind: NodeKind::Object,
        }
    }

    /// Text that should be embedded for this node: the raw id for objects,
    /// the raw attribute string (without owner suffix) for attribute nodes.
    pub fn text(&self) -> &str {
        match &self.kind {
            NodeKind::Object => &self.id,
            NodeKind::Attribute { label, .. } => label,
        }
    }

    pub fn owner(&self) -> Option<&str> {
        match &self.kind {
            NodeKind::Object => None,
            NodeKind::Attribute { owner, .. } => Some(owner),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    Relation,
    Attribute,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SgEdge {
    pub source: String,
    pub target: String,
    pub relation: String,
    pub kind: EdgeKind,
}

impl SgEdge {
    pub fn relation(
        source: impl Into<String>,
        target: impl Into<String>,
        relation: impl Into<String>,
    ) -> Self {
        Self {
            source: source.into(),
            target: target.into(),
            relation: relation.into(),
            kind: EdgeKind::Relation,
        }
    }
}

/// A validated scene graph.
///
/// `expanded` and `reversed` record which preparation steps have been
/// applied; the encoder expects both.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SceneGraph {
    pub nodes: Vec<SgNode>,
    pub edges: Vec<SgEdge>,
    pub source_image_id: String,
    pub expanded: bool,
    pub reversed: bool,
}

impl SceneGraph {
    pub fn with_image_id(mut self, image_id: impl Into<String>) -> Self {
        self.source_image_id = image_id.into();
        self
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    /// Serializes the graph back into the generator document format.
    /// Only meaningful for graphs that have not been expanded.
    pub fn to_document(&self) -> String {
        let nodes: Vec<Value> = self
            .nodes
            .iter()
            .map(|n| serde_json::json!({ "id": n.id, "attributes": n.attributes }))
            .collect();
        let edges: Vec<Value> = self
            .edges
            .iter()
            .map(|e| {
                serde_json::json!({ "source": e.source, "target": e.target, "relation": e.relation })
            })
            .collect();
        serde_json::to_string_pretty(&serde_json::json!({ "nodes": nodes, "edges": edges }))
            .expect("scene graph serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SchemaViolation {
    NotAnObject,
    MissingKey(&'static str),
    WrongType { expected: &'static str },
    EmptyId,
    EmptyRelation,
    DanglingEndpoint(String),
    NoNodes,
}

impl std::fmt::Display for SchemaViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SchemaViolation::NotAnObject => write!(f, "expected an object"),
            SchemaViolation::MissingKey(k) => write!(f, "missing \"{k}\""),
            SchemaViolation::WrongType { expected } => write!(f, "expected {expected}"),
            SchemaViolation::EmptyId => write!(f, "empty node id"),
            SchemaViolation::EmptyRelation => write!(f, "empty relation"),
            SchemaViolation::DanglingEndpoint(id) => {
                write!(f, "dangling endpoint \"{id}\" references no node")
            }
            SchemaViolation::NoNodes => write!(f, "graph has no nodes"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseFailure {
    #[error("syntax error at line {line}, column {column}: {reason}")]
    Syntax {
        line: usize,
        column: usize,
        reason: String,
    },
    #[error("schema error at {path}: {violation}")]
    Schema {
        path: String,
        violation: SchemaViolation,
    },
}

impl ParseFailure {
    pub fn is_syntax(&self) -> bool {
        matches!(self, ParseFailure::Syntax { .. })
    }

    fn schema(path: impl Into<String>, violation: SchemaViolation) -> Self {
        ParseFailure::Schema {
            path: path.into(),
            violation,
        }
    }
}

/// Parses and validates one generated scene-graph document.
///
/// Canonicalization on success: empty attribute strings are dropped,
/// duplicate attributes are removed (first occurrence wins) and nodes that
/// repeat an id are merged into the first occurrence.
pub fn parse_scene_graph(text: &str) -> Result<SceneGraph, ParseFailure> {
    let value: Value = serde_json::from_str(text).map_err(|e| ParseFailure::Syntax {
        line: e.line(),
        column: e.column(),
        reason: e.to_string(),
    })?;
    graph_from_value(&value)
}

pub(crate) fn graph_from_value(value: &Value) -> Result<SceneGraph, ParseFailure> {
    let root = value
        .as_object()
        .ok_or_else(|| ParseFailure::schema("$", SchemaViolation::NotAnObject))?;
    let nodes_v = root
        .get("nodes")
        .ok_or_else(|| ParseFailure::schema("$", SchemaViolation::MissingKey("nodes")))?;
    let edges_v = root
        .get("edges")
        .ok_or_else(|| ParseFailure::schema("$", SchemaViolation::MissingKey("edges")))?;
    let nodes_arr = nodes_v.as_array().ok_or_else(|| {
        ParseFailure::schema("$.nodes", SchemaViolation::WrongType { expected: "array" })
    })?;
    let edges_arr = edges_v.as_array().ok_or_else(|| {
        ParseFailure::schema("$.edges", SchemaViolation::WrongType { expected: "array" })
    })?;

    let mut nodes: Vec<SgNode> = Vec::with_capacity(nodes_arr.len());
    let mut index: HashMap<String, usize> = HashMap::new();
    for (i, n) in nodes_arr.iter().enumerate() {
        let path = format!("$.nodes[{i}]");
        let obj = n
            .as_object()
            .ok_or_else(|| ParseFailure::schema(&path, SchemaViolation::NotAnObject))?;
        let id = obj
            .get("id")
            .ok_or_else(|| ParseFailure::schema(&path, SchemaViolation::MissingKey("id")))?
            .as_str()
            .ok_or_else(|| {
                ParseFailure::schema(format!("{path}.id"), SchemaViolation::WrongType { expected: "string" })
            })?;
        if id.trim().is_empty() {
            return Err(ParseFailure::schema(format!("{path}.id"), SchemaViolation::EmptyId));
        }
        let attributes = match obj.get("attributes") {
            None | Some(Value::Null) => Vec::new(),
            Some(Value::Array(items)) => {
                let mut out = Vec::with_capacity(items.len());
                for (j, a) in items.iter().enumerate() {
                    let s = a.as_str().ok_or_else(|| {
                        ParseFailure::schema(
                            format!("{path}.attributes[{j}]"),
                            SchemaViolation::WrongType { expected: "string" },
                        )
                    })?;
                    out.push(s.to_string());
                }
                out
            }
            Some(_) => {
                return Err(ParseFailure::schema(
                    format!("{path}.attributes"),
                    SchemaViolation::WrongType { expected: "array" },
                ))
            }
        };
        match index.get(id) {
            Some(&existing) => nodes[existing].attributes.extend(attributes),
            None => {
                index.insert(id.to_string(), nodes.len());
                nodes.push(SgNode::object(id, attributes));
            }
        }
    }
    if nodes.is_empty() {
        return Err(ParseFailure::schema("$.nodes", SchemaViolation::NoNodes));
    }
    for node in &mut nodes {
        let mut seen = std::collections::HashSet::new();
        node.attributes
            .retain(|a| !a.trim().is_empty() && seen.insert(a.clone()));
    }

    let mut edges = Vec::with_capacity(edges_arr.len());
    for (i, e) in edges_arr.iter().enumerate() {
        let path = format!("$.edges[{i}]");
        let obj = e
            .as_object()
            .ok_or_else(|| ParseFailure::schema(&path, SchemaViolation::NotAnObject))?;
        let field = |key: &'static str| -> Result<&str, ParseFailure> {
            obj.get(key)
                .ok_or_else(|| ParseFailure::schema(&path, SchemaViolation::MissingKey(key)))?
                .as_str()
                .ok_or_else(|| {
                    ParseFailure::schema(
                        format!("{path}.{key}"),
                        SchemaViolation::WrongType { expected: "string" },
                    )
                })
        };
        let source = field("source")?;
        let target = field("target")?;
        let relation = field("relation")?;
        if relation.trim().is_empty() {
            return Err(ParseFailure::schema(
                format!("{path}.relation"),
                SchemaViolation::EmptyRelation,
            ));
        }
        for (key, endpoint) in [("source", source), ("target", target)] {
            if !index.contains_key(endpoint) {
                return Err(ParseFailure::schema(
                    format!("{path}.{key}"),
                    SchemaViolation::DanglingEndpoint(endpoint.to_string()),
                ));
            }
        }
        edges.push(SgEdge::relation(source, target, relation));
    }

    Ok(SceneGraph {
        nodes,
        edges,
        ..SceneGraph::default()
    })
}
