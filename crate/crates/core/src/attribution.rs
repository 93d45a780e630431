//! Attention-path attribution for the two-layer graph encoder.
//!
//! A message edge `e = (u → v)` is credited with the attention mass of every
//! directed path of at most two hops that starts with `e` and ends at the
//! target node:
//!
//! ```text
//! score(e) = α1(e) · Σ_{e2 = (v → t)} α2(e2)  +  α2(e) · [v = t]
//! ```
//!
//! Self-loops are message edges like any other. A node's score is the sum
//! over its outgoing edges; nodes with score zero have no path to the
//! target and are reported as omitted.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gat::{GatError, GraphBatch, GraphEncoder};
use crate::scenegraph::{NodeKind, SceneGraph};
use crate::textembed::NumericGraph;

/// Tolerance of the per-destination attention sum check.
pub const CONSERVATION_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AttributionError {
    #[error("target node {target} out of range for {nodes} nodes")]
    InvalidTarget { target: usize, nodes: usize },
    #[error("layer {layer} attention into node {node} sums to {sum}")]
    Conservation { layer: usize, node: usize, sum: f64 },
    #[error(transparent)]
    Gat(#[from] GatError),
    #[error("result has {result} nodes but the graph has {graph}")]
    Misaligned { result: usize, graph: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeScore {
    pub source: usize,
    pub target: usize,
    pub self_loop: bool,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub image_id: String,
    pub target: usize,
    /// Real edges in graph order, then one self-loop per node.
    pub edge_scores: Vec<EdgeScore>,
    pub node_scores: Vec<f64>,
    pub omitted_nodes: Vec<usize>,
}

impl AttributionResult {
    /// Population variance of the non-zero node scores.
    pub fn score_variance(&self) -> f64 {
        let s: Vec<f64> = self.node_scores.iter().copied().filter(|&v| v != 0.0).collect();
        if s.is_empty() {
            return 0.0;
        }
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s.len() as f64
    }
}

fn check_conservation(batch: &GraphBatch, alpha: &[f64], layer: usize) -> Result<(), AttributionError> {
    for (node, edges) in batch.incoming.iter().enumerate() {
        let sum: f64 = edges.iter().map(|&k| alpha[k]).sum();
        if (sum - 1.0).abs() > CONSERVATION_TOL {
            return Err(AttributionError::Conservation { layer, node, sum });
        }
    }
    Ok(())
}

/// Attributes the node state of `target` (default: the person node).
pub fn gatt_attribute(
    encoder: &GraphEncoder,
    graph: &NumericGraph,
    target: Option<usize>,
) -> Result<AttributionResult, AttributionError> {
    let n = graph.num_nodes();
    let target = target.unwrap_or(graph.person_node_index);
    if target >= n {
        return Err(AttributionError::InvalidTarget { target, nodes: n });
    }
    let batch = GraphBatch::single(graph)?;
    let (a1, a2) = encoder.attention_maps(&batch)?;
    check_conservation(&batch, &a1, 1)?;
    check_conservation(&batch, &a2, 2)?;

    // Second-hop mass from each node into the target.
    let mut reach = vec![0.0; n];
    for &k in &batch.incoming[target] {
        reach[batch.src[k]] += a2[k];
    }
    let mut node_scores = vec![0.0; n];
    let edge_scores: Vec<EdgeScore> = (0..batch.num_edges())
        .map(|k| {
            let (u, v) = (batch.src[k], batch.dst[k]);
            let mut score = a1[k] * reach[v];
            if v == target {
                score += a2[k];
            }
            node_scores[u] += score;
            EdgeScore {
                source: u,
                target: v,
                self_loop: batch.is_self_loop(k),
                score,
            }
        })
        .collect();
    let omitted_nodes = (0..n).filter(|&i| node_scores[i] == 0.0).collect();
    Ok(AttributionResult {
        image_id: graph.source_image_id.clone(),
        target,
        edge_scores,
        node_scores,
        omitted_nodes,
    })
}

fn describe(graph: &SceneGraph, i: usize) -> String {
    let node = &graph.nodes[i];
    match &node.kind {
        NodeKind::Object => {
            if node.attributes.is_empty() {
                node.id.clone()
            } else {
                format!("{} [{}]", node.id, node.attributes.join(", "))
            }
        }
        NodeKind::Attribute { owner, label } => format!("{label} (attribute of {owner})"),
    }
}

/// Text report: one row per contributing node, in the generator's node
/// order, with raw scores.
pub fn render_attribution(result: &AttributionResult, graph: &SceneGraph) -> Result<String, AttributionError> {
    if result.node_scores.len() != graph.nodes.len() {
        return Err(AttributionError::Misaligned {
            result: result.node_scores.len(),
            graph: graph.nodes.len(),
        });
    }
    let mut out = String::new();
    let image = if result.image_id.is_empty() {
        &graph.source_image_id
    } else {
        &result.image_id
    };
    writeln!(out, "image: {image}").unwrap();
    writeln!(out, "target: {}: {}", result.target, graph.nodes[result.target].id).unwrap();
    writeln!(out, "omitted: {}", result.omitted_nodes.len()).unwrap();
    for (i, &score) in result.node_scores.iter().enumerate() {
        if score == 0.0 {
            continue;
        }
        writeln!(out, "{i}: {}\t{score:.6}", describe(graph, i)).unwrap();
    }
    Ok(out)
}

/// Same rows as CSV.
pub fn attribution_csv(result: &AttributionResult, graph: &SceneGraph) -> String {
    let mut out = String::from("image_id,node_index,node,score\n");
    for (i, &score) in result.node_scores.iter().enumerate() {
        if score == 0.0 || i >= graph.nodes.len() {
            continue;
        }
        let label = describe(graph, i).replace('"', "\"\"");
        writeln!(out, "{},{i},\"{label}\",{score:.9}", result.image_id).unwrap();
    }
    out
}
