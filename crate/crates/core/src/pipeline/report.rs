//! Risk report: retrieval metrics per dataset and setting, plus the
//! attributes that contribute most to re-identification.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attribution::AttributionResult;
use crate::evalkit::{CrossDataset, EvalReport, RerankParams};
use crate::scenegraph::{NodeKind, SceneGraph};

/// Score of one contributing node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeAttribution {
    pub index: usize,
    pub node: String,
    /// Attribute string for attribute nodes.
    pub attribute: Option<String>,
    pub owner: Option<String>,
    pub score: f64,
}

/// Attribution of one query, stored one per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub image_id: String,
    pub identity: i64,
    pub target: usize,
    pub omitted: usize,
    /// Nodes with non-zero score, in graph order.
    pub nodes: Vec<NodeAttribution>,
}

impl AttributionRecord {
    pub fn new(result: &AttributionResult, graph: &SceneGraph, identity: i64) -> Self {
        let nodes = result
            .node_scores
            .iter()
            .enumerate()
            .filter(|&(i, &s)| s != 0.0 && i < graph.nodes.len())
            .map(|(i, &score)| {
                let n = &graph.nodes[i];
                let (attribute, owner) = match &n.kind {
                    NodeKind::Object => (None, None),
                    NodeKind::Attribute { owner, label } => (Some(label.clone()), Some(owner.clone())),
                };
                NodeAttribution {
                    index: i,
                    node: n.id.clone(),
                    attribute,
                    owner,
                    score,
                }
            })
            .collect();
        Self {
            image_id: result.image_id.clone(),
            identity,
            target: result.target,
            omitted: result.omitted_nodes.len(),
            nodes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingMetrics {
    #[serde(rename = "R@1")]
    pub rank1: f64,
    #[serde(rename = "R@5")]
    pub rank5: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub valid_queries: usize,
    pub rerank: Option<RerankParams>,
}

impl SettingMetrics {
    fn from_report(r: &EvalReport) -> Self {
        Self {
            rank1: r.rank1,
            rank5: r.rank5,
            map: r.map,
            valid_queries: r.valid_queries,
            rerank: r.rerank,
        }
    }

    fn minus(&self, other: &SettingMetrics) -> SettingMetrics {
        SettingMetrics {
            rank1: self.rank1 - other.rank1,
            rank5: self.rank5 - other.rank5,
            map: self.map - other.map,
            valid_queries: self.valid_queries,
            rerank: self.rerank,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    /// Evaluated dataset.
    pub dataset: String,
    pub cross_dataset: Option<CrossDataset>,
    pub baseline: Option<SettingMetrics>,
    pub reranked: Option<SettingMetrics>,
    /// Cross-dataset minus in-domain metrics on the same dataset, per
    /// setting, when both runs are available.
    pub baseline_delta: Option<SettingMetrics>,
    pub reranked_delta: Option<SettingMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeRisk {
    pub attribute: String,
    pub total_score: f64,
    /// Total divided by the number of queries mentioning the attribute.
    pub mean_score: f64,
    pub queries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub datasets: Vec<DatasetSummary>,
    pub attributed_queries: usize,
    pub shortlist: Vec<AttributeRisk>,
}

/// Sums attribute-node scores across queries, highest total first.
pub fn aggregate_attributes(records: &[AttributionRecord]) -> Vec<AttributeRisk> {
    let mut totals: BTreeMap<&str, (f64, BTreeSet<&str>)> = BTreeMap::new();
    for r in records {
        for n in &r.nodes {
            if let Some(attr) = &n.attribute {
                let entry = totals.entry(attr).or_default();
                entry.0 += n.score;
                entry.1.insert(&r.image_id);
            }
        }
    }
    let mut out: Vec<AttributeRisk> = totals
        .into_iter()
        .map(|(attribute, (total, queries))| AttributeRisk {
            attribute: attribute.to_string(),
            total_score: total,
            mean_score: total / queries.len() as f64,
            queries: queries.len(),
        })
        .collect();
    out.sort_by(|a, b| b.total_score.total_cmp(&a.total_score).then_with(|| a.attribute.cmp(&b.attribute)));
    out
}

type SummaryKey = (String, Option<(String, String)>);

fn key_of(r: &EvalReport) -> SummaryKey {
    (
        r.dataset.clone(),
        r.cross_dataset.as_ref().map(|c| (c.source.clone(), c.target.clone())),
    )
}

/// Builds the report. With several reports for the same dataset and
/// setting, the last one wins. `top_n` bounds the shortlist.
pub fn risk_report(reports: &[EvalReport], attributions: &[AttributionRecord], top_n: usize) -> RiskReport {
    let mut summaries: BTreeMap<SummaryKey, DatasetSummary> = BTreeMap::new();
    for r in reports {
        let s = summaries.entry(key_of(r)).or_insert_with(|| DatasetSummary {
            dataset: r.dataset.clone(),
            cross_dataset: r.cross_dataset.clone(),
            baseline: None,
            reranked: None,
            baseline_delta: None,
            reranked_delta: None,
        });
        let m = SettingMetrics::from_report(r);
        if r.reranked {
            s.reranked = Some(m);
        } else {
            s.baseline = Some(m);
        }
    }
    let in_domain: BTreeMap<String, DatasetSummary> = summaries
        .iter()
        .filter(|((_, cross), _)| cross.is_none())
        .map(|((d, _), s)| (d.clone(), s.clone()))
        .collect();
    for ((dataset, cross), s) in summaries.iter_mut() {
        if cross.is_none() {
            continue;
        }
        if let Some(base) = in_domain.get(dataset) {
            let delta = |a: &Option<SettingMetrics>, b: &Option<SettingMetrics>| match (a, b) {
                (Some(a), Some(b)) => Some(a.minus(b)),
                _ => None,
            };
            s.baseline_delta = delta(&s.baseline, &base.baseline);
            s.reranked_delta = delta(&s.reranked, &base.reranked);
        }
    }
    let mut shortlist = aggregate_attributes(attributions);
    shortlist.truncate(top_n);
    RiskReport {
        datasets: summaries.into_values().collect(),
        attributed_queries: attributions.len(),
        shortlist,
    }
}

fn metrics_row(out: &mut String, label: &str, m: &SettingMetrics) {
    writeln!(out, "| {label} | {:.4} | {:.4} | {:.4} | {} |", m.rank1, m.rank5, m.map, m.valid_queries).unwrap();
}

fn rerank_label(m: &SettingMetrics) -> String {
    match m.rerank {
        Some(p) => format!("re-ranked (k1={}, k2={}, lambda={})", p.k1, p.k2, p.lambda),
        None => "re-ranked".into(),
    }
}

impl RiskReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("# Re-identification risk report\n");
        for s in &self.datasets {
            match &s.cross_dataset {
                Some(c) => writeln!(out, "\n## {} -> {} (cross-dataset)\n", c.source, c.target).unwrap(),
                None => writeln!(out, "\n## {}\n", s.dataset).unwrap(),
            }
            out.push_str("| setting | R@1 | R@5 | mAP | queries |\n|---|---|---|---|---|\n");
            if let Some(m) = &s.baseline {
                metrics_row(&mut out, "baseline", m);
            }
            if let Some(m) = &s.reranked {
                metrics_row(&mut out, &rerank_label(m), m);
            }
            if let Some(m) = &s.baseline_delta {
                metrics_row(&mut out, "baseline, change vs in-domain", m);
            }
            if let Some(m) = &s.reranked_delta {
                metrics_row(&mut out, "re-ranked, change vs in-domain", m);
            }
        }
        out.push_str("\n## Attribute shortlist\n\n");
        if self.shortlist.is_empty() {
            out.push_str("No attributions available.\n");
            return out;
        }
        writeln!(
            out,
            "Attributes with the highest attribution mass over {} queries; candidates for targeted anonymization.\n",
            self.attributed_queries
        )
        .unwrap();
        out.push_str("| rank | attribute | total score | mean score | queries |\n|---|---|---|---|---|\n");
        for (i, a) in self.shortlist.iter().enumerate() {
            writeln!(
                out,
                "| {} | {} | {:.4} | {:.4} | {} |",
                i + 1,
                a.attribute,
                a.total_score,
                a.mean_score,
                a.queries
            )
            .unwrap();
        }
        out
    }
}
