//! Text embedding of scene-graph nodes and relations.
//!
//! [`numerify_graph`] turns a prepared [`SceneGraph`] into a [`NumericGraph`]:
//! one 384-dim vector per node (embedding of its raw text) and per edge
//! (embedding of its relation label).

use std::collections::HashMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use std::sync::RwLock;

use log::warn;
use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clients::{ClientError, ClientMode, CommandTransport};
use crate::scenegraph::{SceneGraph, PERSON_NODE_ID};

/// Width of every text embedding.
pub const TEXT_DIM: usize = 384;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("cannot embed an empty string")]
    EmptyText,
    #[error("embedder unavailable: {0}")]
    Unavailable(String),
    #[error("embedding has dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("embedding contains non-finite values")]
    NonFinite,
    #[error("graph {0:?} has no \"person\" node")]
    MissingPersonNode(String),
    #[error("graph must be expanded and flow-reversed before embedding")]
    NotPrepared,
    #[error("edge endpoint {0:?} is not a node")]
    UnknownEndpoint(String),
    #[error(transparent)]
    Client(ClientError),
    #[error("fixture store: {0}")]
    Store(String),
}

impl From<ClientError> for EmbedError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Unavailable(m) => EmbedError::Unavailable(m),
            other => EmbedError::Client(other),
        }
    }
}

/// A finite 384-dim text embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TextVector(Vec<f64>);

impl TextVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbedError> {
        if values.len() != TEXT_DIM {
            return Err(EmbedError::Dimension {
                expected: TEXT_DIM,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn zeros() -> Self {
        Self(vec![0.0; TEXT_DIM])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.0[..])
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl TryFrom<Vec<f64>> for TextVector {
    type Error = EmbedError;

    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        TextVector::new(v)
    }
}

impl From<TextVector> for Vec<f64> {
    fn from(v: TextVector) -> Self {
        v.0
    }
}

/// Sentence-embedding backend.
pub trait EmbedClient: Send + Sync {
    fn embed(&self, text: &str) -> Result<TextVector, EmbedError>;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<TextVector>, EmbedError> {
        texts.iter().map(|t| self.embed(t)).collect()
    }

    fn mode(&self) -> ClientMode;
}

/// Embeds one non-empty string.
pub fn embed_text(text: &str, client: &dyn EmbedClient) -> Result<TextVector, EmbedError> {
    if text.is_empty() {
        return Err(EmbedError::EmptyText);
    }
    client.embed(text)
}

/// Deterministic embedder: a unit vector drawn from a generator seeded with
/// a hash of the text.
#[derive(Debug, Clone, Copy)]
pub struct StubEmbedder {
    seed: u64,
}

impl StubEmbedder {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }
}

impl EmbedClient for StubEmbedder {
    fn embed(&self, text: &str) -> Result<TextVector, EmbedError> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(text.as_bytes());
        let digest: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(digest);
        let mut v: Vec<f64> = (0..TEXT_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        TextVector::new(v)
    }

    fn mode(&self) -> ClientMode {
        ClientMode::Stub
    }
}

#[derive(Serialize, Deserialize)]
struct EmbeddingLine {
    text: String,
    vector: TextVector,
}

/// Replays embeddings recorded in a line-delimited store of
/// `{"text": ..., "vector": [...]}` records.
#[derive(Debug, Clone, Default)]
pub struct FixtureEmbedder {
    table: HashMap<String, TextVector>,
}

impl FixtureEmbedder {
    pub fn from_records(records: impl IntoIterator<Item = (String, TextVector)>) -> Self {
        Self {
            table: records.into_iter().collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, EmbedError> {
        Ok(Self::from_records(read_embedding_store(path)?))
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl EmbedClient for FixtureEmbedder {
    fn embed(&self, text: &str) -> Result<TextVector, EmbedError> {
        self.table
            .get(text)
            .cloned()
            .ok_or_else(|| EmbedError::Unavailable(format!("no recorded embedding for {text:?}")))
    }

    fn mode(&self) -> ClientMode {
        ClientMode::Replay
    }
}

/// Reads a line-delimited embedding store.
pub fn read_embedding_store(path: &Path) -> Result<Vec<(String, TextVector)>, EmbedError> {
    let file = std::fs::File::open(path)
        .map_err(|e| EmbedError::Store(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| EmbedError::Store(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EmbeddingLine = serde_json::from_str(&line)
            .map_err(|e| EmbedError::Store(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push((rec.text, rec.vector));
    }
    Ok(out)
}

/// Writes records sorted by text so the store is reproducible.
pub fn write_embedding_store<'a>(
    path: &Path,
    records: impl IntoIterator<Item = (&'a String, &'a TextVector)>,
) -> std::io::Result<()> {
    let mut sorted: Vec<_> = records.into_iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(b.0));
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for (text, vector) in sorted {
        let line = serde_json::to_string(&EmbeddingLine {
            text: text.clone(),
            vector: vector.clone(),
        })
        .expect("record serializes");
        writeln!(w, "{line}")?;
    }
    w.flush()
}

/// Embedder running in an external process. Request: `{"texts": [...]}` on
/// stdin; response: a JSON array of 384-float arrays on stdout.
#[derive(Debug, Clone)]
pub struct LiveEmbedder {
    transport: CommandTransport,
}

impl LiveEmbedder {
    pub fn new(transport: CommandTransport) -> Self {
        Self { transport }
    }
}

impl EmbedClient for LiveEmbedder {
    fn embed(&self, text: &str) -> Result<TextVector, EmbedError> {
        let mut v = self.embed_batch(&[text])?;
        v.pop()
            .ok_or_else(|| EmbedError::Client(ClientError::Protocol("empty response".into())))
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<TextVector>, EmbedError> {
        let request = serde_json::json!({ "texts": texts }).to_string();
        let response = self.transport.call(&request)?;
        let vectors: Vec<Vec<f64>> = serde_json::from_str(&response)
            .map_err(|e| EmbedError::Client(ClientError::Protocol(e.to_string())))?;
        if vectors.len() != texts.len() {
            return Err(EmbedError::Client(ClientError::Protocol(format!(
                "{} vectors for {} texts",
                vectors.len(),
                texts.len()
            ))));
        }
        vectors.into_iter().map(TextVector::new).collect()
    }

    fn mode(&self) -> ClientMode {
        ClientMode::Live
    }
}

/// Memoizes another client by exact string.
pub struct CachedEmbedder<C> {
    inner: C,
    cache: RwLock<HashMap<String, TextVector>>,
}

impl<C: EmbedClient> CachedEmbedder<C> {
    pub fn new(inner: C) -> Self {
        Self {
            inner,
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.cache.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn snapshot(&self) -> HashMap<String, TextVector> {
        self.cache.read().expect("cache lock").clone()
    }
}

impl<C: EmbedClient> EmbedClient for CachedEmbedder<C> {
    fn embed(&self, text: &str) -> Result<TextVector, EmbedError> {
        if let Some(v) = self.cache.read().expect("cache lock").get(text) {
            return Ok(v.clone());
        }
        let v = self.inner.embed(text)?;
        self.cache
            .write()
            .expect("cache lock")
            .insert(text.to_string(), v.clone());
        Ok(v)
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<TextVector>, EmbedError> {
        let missing: Vec<&str> = {
            let cache = self.cache.read().expect("cache lock");
            let mut m: Vec<&str> = texts.iter().copied().filter(|t| !cache.contains_key(*t)).collect();
            m.sort_unstable();
            m.dedup();
            m
        };
        if !missing.is_empty() {
            let fresh = self.inner.embed_batch(&missing)?;
            let mut cache = self.cache.write().expect("cache lock");
            for (t, v) in missing.into_iter().zip(fresh) {
                cache.insert(t.to_string(), v);
            }
        }
        let cache = self.cache.read().expect("cache lock");
        Ok(texts.iter().map(|t| cache[*t].clone()).collect())
    }

    fn mode(&self) -> ClientMode {
        self.inner.mode()
    }
}

/// A scene graph with numeric node and edge features, edges in message
/// orientation (`(src, dst)` means src sends to dst).
#[derive(Debug, Clone, PartialEq)]
pub struct NumericGraph {
    /// `N × 384`, row `i` belongs to node `i`.
    pub node_features: Array2<f64>,
    pub edge_index: Vec<(usize, usize)>,
    /// `E × 384`, row `k` belongs to `edge_index[k]`.
    pub edge_features: Array2<f64>,
    pub person_node_index: usize,
    pub source_image_id: String,
}

impl NumericGraph {
    pub fn num_nodes(&self) -> usize {
        self.node_features.nrows()
    }

    pub fn num_edges(&self) -> usize {
        self.edge_index.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.node_features.ncols()
    }

    pub fn is_consistent(&self) -> bool {
        let n = self.num_nodes();
        self.edge_features.nrows() == self.edge_index.len()
            && self.edge_index.iter().all(|&(s, d)| s < n && d < n)
            && self.person_node_index < n.max(1)
            && (self.edge_index.is_empty() || self.edge_features.ncols() == self.feature_dim())
    }

    /// The same graph with every message edge flipped.
    pub fn flipped(&self) -> NumericGraph {
        NumericGraph {
            edge_index: self.edge_index.iter().map(|&(s, d)| (d, s)).collect(),
            ..self.clone()
        }
    }

    /// Relabels nodes: node `i` moves to position `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> NumericGraph {
        assert_eq!(perm.len(), self.num_nodes());
        let mut features = Array2::zeros(self.node_features.raw_dim());
        for (i, &p) in perm.iter().enumerate() {
            features.row_mut(p).assign(&self.node_features.row(i));
        }
        NumericGraph {
            node_features: features,
            edge_index: self
                .edge_index
                .iter()
                .map(|&(s, d)| (perm[s], perm[d]))
                .collect(),
            edge_features: self.edge_features.clone(),
            person_node_index: perm[self.person_node_index],
            source_image_id: self.source_image_id.clone(),
        }
    }
}

/// How to pick the root when a graph has no `"person"` node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RootPolicy {
    /// Fail with [`EmbedError::MissingPersonNode`].
    #[default]
    Strict,
    /// Use node 0 and log a warning.
    FirstNode,
}

/// Embeds a prepared graph, failing if it has no `"person"` node.
pub fn numerify_graph(g: &SceneGraph, client: &dyn EmbedClient) -> Result<NumericGraph, EmbedError> {
    numerify_graph_with(g, client, RootPolicy::Strict)
}

pub fn numerify_graph_with(
    g: &SceneGraph,
    client: &dyn EmbedClient,
    root: RootPolicy,
) -> Result<NumericGraph, EmbedError> {
    if !(g.expanded && g.reversed) {
        return Err(EmbedError::NotPrepared);
    }
    let person = match (g.node_index(PERSON_NODE_ID), root) {
        (Some(i), _) => i,
        (None, RootPolicy::FirstNode) => {
            warn!(
                "graph {:?} has no person node; using node 0 as root",
                g.source_image_id
            );
            0
        }
        (None, RootPolicy::Strict) => {
            return Err(EmbedError::MissingPersonNode(g.source_image_id.clone()))
        }
    };

    let index: HashMap<&str, usize> = g
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.id.as_str(), i))
        .collect();
    let node_texts: Vec<&str> = g.nodes.iter().map(|n| n.text()).collect();
    let edge_texts: Vec<&str> = g.edges.iter().map(|e| e.relation.as_str()).collect();
    if node_texts.iter().chain(&edge_texts).any(|t| t.is_empty()) {
        return Err(EmbedError::EmptyText);
    }
    let node_vecs = client.embed_batch(&node_texts)?;
    let edge_vecs = client.embed_batch(&edge_texts)?;

    let mut edge_index = Vec::with_capacity(g.edges.len());
    for e in &g.edges {
        let s = *index
            .get(e.source.as_str())
            .ok_or_else(|| EmbedError::UnknownEndpoint(e.source.clone()))?;
        let d = *index
            .get(e.target.as_str())
            .ok_or_else(|| EmbedError::UnknownEndpoint(e.target.clone()))?;
        edge_index.push((s, d));
    }

    Ok(NumericGraph {
        node_features: stack(&node_vecs),
        edge_index,
        edge_features: stack(&edge_vecs),
        person_node_index: person,
        source_image_id: g.source_image_id.clone(),
    })
}

fn stack(rows: &[TextVector]) -> Array2<f64> {
    let mut m = Array2::zeros((rows.len(), TEXT_DIM));
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).assign(&r.view());
    }
    m
}
