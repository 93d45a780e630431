//! Retrieval evaluation: distances, CMC and mAP under the cross-camera
//! protocol, k-reciprocal re-ranking, reports and embedding tables.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{self, Model, ModelError};
use crate::textembed::NumericGraph;

/// Identity of junk detections: ignored entirely.
pub const JUNK_ID: i64 = -1;
/// Identity of background detections: kept as gallery distractors.
pub const DISTRACTOR_ID: i64 = 0;
/// Ranks reported in the CMC curve.
pub const CMC_RANKS: usize = 20;
/// Identities listed per query in the report.
pub const TOP_IDS: usize = 10;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("feature dimensions differ: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("no query has a valid gallery match")]
    NoValidQueries,
    #[error("train and evaluation identities overlap: {0:?}")]
    IdentityOverlap(Vec<i64>),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("embedding table: {0}")]
    Table(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Squared Euclidean distances between rows of `q` and rows of `g`.
pub fn pairwise_distances(q: ArrayView2<'_, f64>, g: ArrayView2<'_, f64>) -> Result<Array2<f64>, EvalError> {
    if q.ncols() != g.ncols() {
        return Err(EvalError::DimMismatch(q.ncols(), g.ncols()));
    }
    let qn: Vec<f64> = q.rows().into_iter().map(|r| r.dot(&r)).collect();
    let gn: Vec<f64> = g.rows().into_iter().map(|r| r.dot(&r)).collect();
    let mut d = q.dot(&g.t());
    for ((i, j), v) in d.indexed_iter_mut() {
        *v = (qn[i] + gn[j] - 2.0 * *v).max(0.0);
    }
    Ok(d)
}

/// Gallery indices sorted by distance, ties broken by index.
pub fn ranking(row: ndarray::ArrayView1<'_, f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    order
}

/// Per-query outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query: usize,
    /// `None` when the query had no valid positive and was skipped.
    pub average_precision: Option<f64>,
    /// 1-based rank of the first correct match among retained entries.
    pub first_hit: Option<usize>,
    pub num_relevant: usize,
    /// Retained gallery indices in rank order, truncated to [`TOP_IDS`].
    pub top: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmcMap {
    pub rank1: f64,
    pub rank5: f64,
    pub map: f64,
    /// CMC at ranks `1..=CMC_RANKS`.
    pub cmc: Vec<f64>,
    pub valid_queries: usize,
    pub skipped_queries: usize,
    pub per_query: Vec<QueryResult>,
}

/// CMC and mAP. Per query, gallery entries sharing both identity and camera
/// are removed, junk entries are removed, and distractors never count as
/// matches. Queries without any remaining match are skipped and counted.
pub fn cmc_map(
    dist: ArrayView2<'_, f64>,
    q_ids: &[i64],
    g_ids: &[i64],
    q_cams: &[i64],
    g_cams: &[i64],
) -> Result<CmcMap, EvalError> {
    let (nq, ng) = dist.dim();
    if q_ids.len() != nq || q_cams.len() != nq || g_ids.len() != ng || g_cams.len() != ng {
        return Err(EvalError::Shape(format!(
            "{nq}x{ng} distances with {}/{} query and {}/{} gallery labels",
            q_ids.len(),
            q_cams.len(),
            g_ids.len(),
            g_cams.len()
        )));
    }
    let mut hits_at = vec![0usize; CMC_RANKS];
    let mut ap_sum = 0.0;
    let mut valid = 0usize;
    let mut per_query = Vec::with_capacity(nq);
    for qi in 0..nq {
        let (qid, qcam) = (q_ids[qi], q_cams[qi]);
        let kept: Vec<usize> = ranking(dist.row(qi))
            .into_iter()
            .filter(|&g| g_ids[g] != JUNK_ID && !(g_ids[g] == qid && g_cams[g] == qcam))
            .collect();
        let is_match = |g: usize| qid != JUNK_ID && qid != DISTRACTOR_ID && g_ids[g] == qid;
        let num_relevant = kept.iter().filter(|&&g| is_match(g)).count();
        let top = kept.iter().take(TOP_IDS).copied().collect();
        if num_relevant == 0 {
            per_query.push(QueryResult {
                query: qi,
                average_precision: None,
                first_hit: None,
                num_relevant,
                top,
            });
            continue;
        }
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        let mut first_hit = None;
        for (r, &g) in kept.iter().enumerate() {
            if is_match(g) {
                hits += 1;
                precision_sum += hits as f64 / (r + 1) as f64;
                first_hit.get_or_insert(r + 1);
            }
        }
        let ap = precision_sum / num_relevant as f64;
        let first = first_hit.expect("at least one match");
        for (k, slot) in hits_at.iter_mut().enumerate() {
            if first <= k + 1 {
                *slot += 1;
            }
        }
        ap_sum += ap;
        valid += 1;
        per_query.push(QueryResult {
            query: qi,
            average_precision: Some(ap),
            first_hit: Some(first),
            num_relevant,
            top,
        });
    }
    let skipped = nq - valid;
    if skipped > 0 {
        log::warn!("{skipped} of {nq} queries have no valid gallery match and were skipped");
    }
    if valid == 0 {
        return Err(EvalError::NoValidQueries);
    }
    let cmc: Vec<f64> = hits_at.iter().map(|&h| h as f64 / valid as f64).collect();
    Ok(CmcMap {
        rank1: cmc[0],
        rank5: cmc[4],
        map: ap_sum / valid as f64,
        cmc,
        valid_queries: valid,
        skipped_queries: skipped,
        per_query,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RerankParams {
    pub k1: usize,
    pub k2: usize,
    pub lambda: f64,
}

impl Default for RerankParams {
    fn default() -> Self {
        Self {
            k1: 20,
            k2: 6,
            lambda: 0.3,
        }
    }
}

impl RerankParams {
    /// Limits `k1` and `k2` to what a population of `n` points supports.
    pub fn clamped(self, n: usize) -> Self {
        let k1 = self.k1.clamp(1, n.saturating_sub(1).max(1));
        let k2 = self.k2.clamp(1, n.max(1));
        if k1 != self.k1 || k2 != self.k2 {
            log::warn!(
                "re-ranking neighborhood ({}, {}) exceeds {n} points; using ({k1}, {k2})",
                self.k1,
                self.k2
            );
        }
        Self { k1, k2, ..self }
    }
}

/// Indices `r` of the first `k + 1` entries of `rank[i]` whose own first
/// `k + 1` entries contain `i`.
fn reciprocal_neighbors(rank: &[Vec<usize>], i: usize, k: usize) -> Vec<usize> {
    let forward = &rank[i][..(k + 1).min(rank[i].len())];
    forward
        .iter()
        .copied()
        .filter(|&c| rank[c][..(k + 1).min(rank[c].len())].contains(&i))
        .collect()
}

/// k-reciprocal re-ranking of query-to-gallery distances.
///
/// Neighborhoods are built over the joint query and gallery population from
/// pairwise squared distances of the features, normalized per row by the row
/// maximum. The result is `λ · dist_qg + (1 − λ) · jaccard`, so `λ = 1`
/// returns the input unchanged.
pub fn k_reciprocal_rerank(
    dist_qg: ArrayView2<'_, f64>,
    q_feats: ArrayView2<'_, f64>,
    g_feats: ArrayView2<'_, f64>,
    params: RerankParams,
) -> Result<Array2<f64>, EvalError> {
    let (nq, ng) = dist_qg.dim();
    if q_feats.nrows() != nq || g_feats.nrows() != ng {
        return Err(EvalError::Shape(format!(
            "{nq}x{ng} distances for {} queries and {} gallery features",
            q_feats.nrows(),
            g_feats.nrows()
        )));
    }
    let n = nq + ng;
    let RerankParams { k1, k2, lambda } = params.clamped(n);
    let all = ndarray::concatenate(ndarray::Axis(0), &[q_feats, g_feats])
        .map_err(|e| EvalError::Shape(e.to_string()))?;
    let mut original = pairwise_distances(all.view(), all.view())?;
    for mut row in original.rows_mut() {
        let max = row.fold(0.0f64, |a, &b| a.max(b));
        let scale = if max > 0.0 { max } else { 1.0 };
        row.mapv_inplace(|v| v / scale);
    }
    let rank: Vec<Vec<usize>> = (0..n).map(|i| ranking(original.row(i))).collect();
    let half = (k1 as f64 / 2.0).round_ties_even() as usize;

    // Sparse weight rows: sorted (column, weight).
    let mut v: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
    for i in 0..n {
        let base = reciprocal_neighbors(&rank, i, k1);
        let mut expanded = base.clone();
        for &c in &base {
            let cand = reciprocal_neighbors(&rank, c, half);
            let common = cand.iter().filter(|x| base.contains(x)).count();
            if common as f64 > 2.0 / 3.0 * cand.len() as f64 {
                expanded.extend(cand);
            }
        }
        expanded.sort_unstable();
        expanded.dedup();
        let weights: Vec<f64> = expanded.iter().map(|&j| (-original[[i, j]]).exp()).collect();
        let total: f64 = weights.iter().sum();
        v.push(expanded.into_iter().zip(weights.into_iter().map(|w| w / total)).collect());
    }

    if k2 > 1 {
        let mut expanded = Vec::with_capacity(n);
        for i in 0..n {
            let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
            for &j in &rank[i][..k2] {
                for &(c, w) in &v[j] {
                    *acc.entry(c).or_insert(0.0) += w;
                }
            }
            expanded.push(acc.into_iter().map(|(c, w)| (c, w / k2 as f64)).collect());
        }
        v = expanded;
    }

    // Inverted index: column -> rows with a non-zero weight there.
    let mut inverted: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (row, entries) in v.iter().enumerate() {
        for &(c, w) in entries {
            if w != 0.0 {
                inverted[c].push((row, w));
            }
        }
    }

    let mut out = Array2::zeros((nq, ng));
    for i in 0..nq {
        let mut shared = vec![0.0; n];
        for &(c, w) in &v[i] {
            if w == 0.0 {
                continue;
            }
            for &(row, w2) in &inverted[c] {
                shared[row] += w.min(w2);
            }
        }
        for j in 0..ng {
            let s = shared[nq + j];
            let jaccard = 1.0 - s / (2.0 - s);
            out[[i, j]] = lambda * dist_qg[[i, j]] + (1.0 - lambda) * jaccard;
        }
    }
    Ok(out)
}

/// Samples to evaluate, row-aligned.
#[derive(Debug, Clone, Default)]
pub struct EvalSplit {
    pub image_ids: Vec<String>,
    pub ids: Vec<i64>,
    pub cams: Vec<i64>,
    /// `N × visual_dim`; may be `N × 0` in graph-only mode.
    pub visual: Array2<f64>,
    pub graphs: Vec<NumericGraph>,
}

impl EvalSplit {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossDataset {
    pub source: String,
    pub target: String,
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub rerank: Option<RerankParams>,
    /// Set when the checkpoint was trained on a different dataset.
    pub cross_dataset: Option<CrossDataset>,
    /// Training identities; checked for overlap unless cross-dataset.
    pub train_ids: Option<Vec<i64>>,
    pub dataset: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRow {
    pub image_id: String,
    pub identity: i64,
    pub camera: i64,
    pub average_precision: Option<f64>,
    pub first_hit: Option<usize>,
    /// Identities of the top-ranked retained gallery entries.
    pub top_ids: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    #[serde(rename = "R@1")]
    pub rank1: f64,
    #[serde(rename = "R@5")]
    pub rank5: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub cmc: Vec<f64>,
    pub num_queries: usize,
    pub num_gallery: usize,
    pub valid_queries: usize,
    pub skipped_queries: usize,
    pub reranked: bool,
    pub rerank: Option<RerankParams>,
    pub cross_dataset: Option<CrossDataset>,
    pub per_query: Vec<QueryRow>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// One line per query: image id, identity, camera, AP, first hit, top ids.
    pub fn per_query_csv(&self) -> String {
        let mut out = String::from("image_id,identity,camera,average_precision,first_hit,top_ids\n");
        for r in &self.per_query {
            let ap = r.average_precision.map(|v| format!("{v:.6}")).unwrap_or_default();
            let hit = r.first_hit.map(|v| v.to_string()).unwrap_or_default();
            let top: Vec<String> = r.top_ids.iter().map(i64::to_string).collect();
            out.push_str(&format!(
                "{},{},{},{ap},{hit},{}\n",
                r.image_id,
                r.identity,
                r.camera,
                top.join(" ")
            ));
        }
        out
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<(), EvalError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.json")), self.to_json())?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.per_query_csv())?;
        Ok(())
    }
}

/// Builds a report from retrieval embeddings.
pub fn report_from_embeddings(
    query: &EvalSplit,
    q_emb: ArrayView2<'_, f64>,
    gallery: &EvalSplit,
    g_emb: ArrayView2<'_, f64>,
    options: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    let mut dist = pairwise_distances(q_emb, g_emb)?;
    if let Some(p) = options.rerank {
        dist = k_reciprocal_rerank(dist.view(), q_emb, g_emb, p)?;
    }
    let m = cmc_map(dist.view(), &query.ids, &gallery.ids, &query.cams, &gallery.cams)?;
    let per_query = m
        .per_query
        .iter()
        .map(|r| QueryRow {
            image_id: query.image_ids.get(r.query).cloned().unwrap_or_default(),
            identity: query.ids[r.query],
            camera: query.cams[r.query],
            average_precision: r.average_precision,
            first_hit: r.first_hit,
            top_ids: r.top.iter().map(|&g| gallery.ids[g]).collect(),
        })
        .collect();
    Ok(EvalReport {
        dataset: options.dataset.clone(),
        rank1: m.rank1,
        rank5: m.rank5,
        map: m.map,
        cmc: m.cmc,
        num_queries: query.len(),
        num_gallery: gallery.len(),
        valid_queries: m.valid_queries,
        skipped_queries: m.skipped_queries,
        reranked: options.rerank.is_some(),
        rerank: options.rerank,
        cross_dataset: options.cross_dataset.clone(),
        per_query,
    })
}

/// Retrieval embeddings of a split.
pub fn embed_split(model: &Model, split: &EvalSplit) -> Result<Array2<f64>, EvalError> {
    let graphs: Vec<&NumericGraph> = split.graphs.iter().collect();
    let visual = model.config.mode.uses_visual().then(|| split.visual.view());
    Ok(model::chunked_embed(model, visual, &graphs, 256)?)
}

/// Fails if a training identity appears in the query or gallery split.
/// Skipped for cross-dataset runs, whose identity spaces are unrelated.
pub fn check_identity_overlap(query: &EvalSplit, gallery: &EvalSplit, options: &EvalOptions) -> Result<(), EvalError> {
    if options.cross_dataset.is_some() {
        return Ok(());
    }
    let Some(train) = &options.train_ids else {
        return Ok(());
    };
    let train: std::collections::BTreeSet<i64> = train.iter().copied().filter(|&id| id > 0).collect();
    let overlap: std::collections::BTreeSet<i64> = query
        .ids
        .iter()
        .chain(&gallery.ids)
        .copied()
        .filter(|id| train.contains(id))
        .collect();
    if overlap.is_empty() {
        Ok(())
    } else {
        Err(EvalError::IdentityOverlap(overlap.into_iter().collect()))
    }
}

/// Embeds both splits with `model` and scores retrieval.
pub fn evaluate(model: &Model, query: &EvalSplit, gallery: &EvalSplit, options: &EvalOptions) -> Result<EvalReport, EvalError> {
    check_identity_overlap(query, gallery, options)?;
    let q = embed_split(model, query)?;
    let g = embed_split(model, gallery)?;
    report_from_embeddings(query, q.view(), gallery, g.view(), options)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Query => 1,
            Split::Gallery => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Split::Train),
            1 => Some(Split::Query),
            2 => Some(Split::Gallery),
            _ => None,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// One stored retrieval embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub image_id: String,
    pub identity: i64,
    pub camera: i64,
    pub feature: Vec<f64>,
    pub split: Split,
}

const TABLE_MAGIC: &[u8; 8] = b"SGEMBv1\0";

/// Binary table: magic, `u32` dim, `u64` count, then per record a `u16`
/// id length, id bytes, `i64` identity, `i64` camera, `u8` split and `dim`
/// little-endian `f64` values.
pub fn write_embedding_table(path: &Path, records: &[EmbeddingRecord]) -> Result<(), EvalError> {
    let dim = records.first().map_or(0, |r| r.feature.len());
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(TABLE_MAGIC)?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    for r in records {
        if r.feature.len() != dim {
            return Err(EvalError::Table(format!("{} has dimension {}", r.image_id, r.feature.len())));
        }
        let id = r.image_id.as_bytes();
        let len = u16::try_from(id.len()).map_err(|_| EvalError::Table("image id too long".into()))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(id)?;
        w.write_all(&r.identity.to_le_bytes())?;
        w.write_all(&r.camera.to_le_bytes())?;
        w.write_all(&[r.split.code()])?;
        for v in &r.feature {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_embedding_table(path: &Path) -> Result<Vec<EmbeddingRecord>, EvalError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let bad = |m: &str| EvalError::Table(format!("{}: {m}", path.display()));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != TABLE_MAGIC {
        return Err(bad("not an embedding table"));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b4)?;
    let dim = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b8)?;
    let count = u64::from_le_bytes(b8) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        r.read_exact(&mut b2)?;
        let mut id = vec![0u8; u16::from_le_bytes(b2) as usize];
        r.read_exact(&mut id)?;
        let image_id = String::from_utf8(id).map_err(|_| bad("image id is not UTF-8"))?;
        r.read_exact(&mut b8)?;
        let identity = i64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let camera = i64::from_le_bytes(b8);
        let mut s = [0u8; 1];
        r.read_exact(&mut s)?;
        let split = Split::from_code(s[0]).ok_or_else(|| bad("unknown split code"))?;
        let mut feature = Vec::with_capacity(dim);
        for _ in 0..dim {
            r.read_exact(&mut b8)?;
            feature.push(f64::from_le_bytes(b8));
        }
        out.push(EmbeddingRecord {
            image_id,
            identity,
            camera,
            feature,
            split,
        });
    }
    Ok(out)
}
