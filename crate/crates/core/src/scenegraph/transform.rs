//! Preparation of a parsed graph for message passing.

use std::collections::{HashMap, HashSet};

use thiserror::Error;

use super::{EdgeKind, NodeKind, SceneGraph, SgEdge, SgNode, OWNER_SEPARATOR};

/// Relation label of the edge linking an attribute node to its owner.
pub const ATTRIBUTE_RELATION: &str = "has attribute";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransformError {
    #[error("graph flow is already reversed")]
    DoubleReversal,
    #[error("attributes must be expanded before reversing flow")]
    NotExpanded,
}

/// Turns every attribute into its own node with an edge pointing at the
/// owner (already in message orientation).
///
/// An attribute node takes the attribute string as id. When that string is
/// shared by several owners or equals an object id, every such node is
/// suffixed with its owner (`black#person`).
pub fn expand_attributes(g: &SceneGraph) -> SceneGraph {
    let object_ids: HashSet<&str> = g.nodes.iter().map(|n| n.id.as_str()).collect();
    let mut owners_per_attr: HashMap<&str, usize> = HashMap::new();
    for node in &g.nodes {
        for a in &node.attributes {
            *owners_per_attr.entry(a.as_str()).or_default() += 1;
        }
    }

    let mut out = SceneGraph {
        nodes: g
            .nodes
            .iter()
            .map(|n| SgNode {
                attributes: Vec::new(),
                ..n.clone()
            })
            .collect(),
        edges: g.edges.clone(),
        source_image_id: g.source_image_id.clone(),
        expanded: true,
        reversed: g.reversed,
    };
    let mut taken: HashSet<String> = object_ids.iter().map(|s| s.to_string()).collect();

    for node in &g.nodes {
        for attr in &node.attributes {
            let shared = owners_per_attr[attr.as_str()] > 1 || object_ids.contains(attr.as_str());
            let mut id = if shared {
                format!("{attr}{OWNER_SEPARATOR}{}", node.id)
            } else {
                attr.clone()
            };
            let mut n = 2;
            while taken.contains(&id) {
                id = format!("{attr}{OWNER_SEPARATOR}{}{OWNER_SEPARATOR}{n}", node.id);
                n += 1;
            }
            taken.insert(id.clone());
            out.nodes.push(SgNode {
                id: id.clone(),
                attributes: Vec::new(),
                kind: NodeKind::Attribute {
                    owner: node.id.clone(),
                    label: attr.clone(),
                },
            });
            out.edges.push(SgEdge {
                source: id,
                target: node.id.clone(),
                relation: ATTRIBUTE_RELATION.to_string(),
                kind: EdgeKind::Attribute,
            });
        }
    }
    out
}

/// Flips relation edges to target → source so that messages flow towards
/// the person node. Attribute edges already point at their owner.
pub fn reverse_flow(g: &SceneGraph) -> Result<SceneGraph, TransformError> {
    if g.reversed {
        return Err(TransformError::DoubleReversal);
    }
    if !g.expanded {
        return Err(TransformError::NotExpanded);
    }
    let mut out = g.clone();
    for e in out.edges.iter_mut().filter(|e| e.kind == EdgeKind::Relation) {
        std::mem::swap(&mut e.source, &mut e.target);
    }
    out.reversed = true;
    Ok(out)
}

/// Parse → expand → reverse in one call.
pub fn prepare(g: &SceneGraph) -> SceneGraph {
    let expanded = expand_attributes(g);
    reverse_flow(&expanded).expect("freshly expanded graph is not reversed")
}
