//! Visual feature and text embedding stores, and loading a split from the
//! stores into model inputs.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use log::{info, warn};
use ndarray::Array2;

use super::{DatasetManifest, GraphStore, PersonSample, PipelineError};
use crate::evalkit::Split;
use crate::scenegraph::{prepare, SceneGraph};
use crate::textembed::{
    numerify_graph_with, read_embedding_store, write_embedding_store, EmbedClient, FixtureEmbedder, NumericGraph,
    RootPolicy, TextVector,
};
use crate::visual::{
    encode_image, preprocess_file, write_feature_store, AdapterManifest, BackboneAdapter, FixtureBackbone,
    VisualFeature, FEATURE_DATA_FILE, FEATURE_MANIFEST_FILE,
};

const EMBED_CHUNK: usize = 64;

/// Texts the encoder needs for a prepared graph: node texts and relations.
pub fn graph_texts(prepared: &SceneGraph) -> Vec<String> {
    prepared
        .nodes
        .iter()
        .map(|n| n.text().to_string())
        .chain(prepared.edges.iter().map(|e| e.relation.clone()))
        .collect()
}

fn existing_features(dir: &Path, manifest: &AdapterManifest) -> Result<HashMap<String, VisualFeature>, PipelineError> {
    if !dir.join(FEATURE_MANIFEST_FILE).is_file() || !dir.join(FEATURE_DATA_FILE).is_file() {
        return Ok(HashMap::new());
    }
    let store = FixtureBackbone::load(dir)?;
    if store.manifest() != manifest {
        warn!("feature store {} was built by another backbone; rebuilding", dir.display());
        return Ok(HashMap::new());
    }
    Ok(store.into_records())
}

/// Encodes every sample not yet in the store at `dir`. Returns the number of
/// newly encoded images; zero means the store was already complete and was
/// left untouched.
pub fn build_feature_store(
    samples: &[PersonSample],
    adapter: &dyn BackboneAdapter,
    dir: &Path,
) -> Result<usize, PipelineError> {
    let mut features = existing_features(dir, adapter.manifest())?;
    let missing: Vec<&PersonSample> = samples.iter().filter(|s| !features.contains_key(&s.image_id)).collect();
    if missing.is_empty() && dir.join(FEATURE_DATA_FILE).is_file() {
        return Ok(0);
    }
    for sample in &missing {
        let tensor = preprocess_file(&sample.path)?;
        let feature = encode_image(&sample.image_id, &tensor, adapter)?;
        features.insert(sample.image_id.clone(), feature);
    }
    write_feature_store(dir, adapter.manifest(), features.iter())?;
    info!("feature store {}: {} new, {} total", dir.display(), missing.len(), features.len());
    Ok(missing.len())
}

/// Embeds every graph text not yet in the store at `path`. Returns the
/// number of new texts; zero leaves the store untouched.
pub fn build_text_store(
    samples: &[PersonSample],
    graphs: &GraphStore,
    client: &dyn EmbedClient,
    path: &Path,
) -> Result<usize, PipelineError> {
    let mut table: HashMap<String, TextVector> = if path.is_file() {
        read_embedding_store(path)?.into_iter().collect()
    } else {
        HashMap::new()
    };
    let mut needed = BTreeSet::new();
    for sample in samples {
        if let Some(g) = graphs.load(&sample.image_id)? {
            needed.extend(graph_texts(&prepare(&g)));
        }
    }
    let missing: Vec<&str> = needed
        .iter()
        .map(String::as_str)
        .filter(|t| !t.is_empty() && !table.contains_key(*t))
        .collect();
    if missing.is_empty() && path.is_file() {
        return Ok(0);
    }
    for chunk in missing.chunks(EMBED_CHUNK) {
        for (text, vector) in chunk.iter().zip(client.embed_batch(chunk)?) {
            table.insert(text.to_string(), vector);
        }
    }
    write_embedding_store(path, table.iter()).map_err(super::io_err(path))?;
    info!("embedding store {}: {} new, {} total", path.display(), missing.len(), table.len());
    Ok(missing.len())
}

/// Samples of one split with their model inputs, row-aligned.
#[derive(Debug, Clone)]
pub struct LoadedSplit {
    pub samples: Vec<PersonSample>,
    /// `N × visual_dim`, or `N × 0` without a feature store.
    pub visual: Array2<f64>,
    pub graphs: Vec<NumericGraph>,
    /// Prepared scene graphs, aligned with `graphs`.
    pub scene_graphs: Vec<SceneGraph>,
}

impl LoadedSplit {
    pub fn ids(&self) -> Vec<i64> {
        self.samples.iter().map(|s| s.identity).collect()
    }

    pub fn into_eval_split(self) -> crate::evalkit::EvalSplit {
        crate::evalkit::EvalSplit {
            image_ids: self.samples.iter().map(|s| s.image_id.clone()).collect(),
            ids: self.samples.iter().map(|s| s.identity).collect(),
            cams: self.samples.iter().map(|s| s.camera).collect(),
            visual: self.visual,
            graphs: self.graphs,
        }
    }
}

/// Loads a split from the stores. Samples without a stored graph (failed
/// generation) or without a visual feature are dropped with a warning.
/// Graphs lacking a person node are rooted at their first node.
pub fn load_split(
    manifest: &DatasetManifest,
    split: Split,
    graphs: &GraphStore,
    text: &FixtureEmbedder,
    features: Option<&FixtureBackbone>,
) -> Result<LoadedSplit, PipelineError> {
    let mut samples = Vec::new();
    let mut numeric = Vec::new();
    let mut scene_graphs = Vec::new();
    let mut rows: Vec<&VisualFeature> = Vec::new();
    let mut dropped = 0usize;
    for sample in manifest.samples_in(split) {
        let Some(g) = graphs.load(&sample.image_id)? else {
            dropped += 1;
            continue;
        };
        let feature = match features {
            Some(store) => match store.get(&sample.image_id) {
                Some(f) => Some(f),
                None => {
                    dropped += 1;
                    continue;
                }
            },
            None => None,
        };
        let prepared = prepare(&g);
        numeric.push(numerify_graph_with(&prepared, text, RootPolicy::FirstNode)?);
        scene_graphs.push(prepared);
        rows.extend(feature);
        samples.push(sample.clone());
    }
    if dropped > 0 {
        warn!("{split:?}: {dropped} samples without a graph or feature were dropped");
    }
    let dim = features.map_or(0, |f| f.manifest().dim);
    let mut visual = Array2::zeros((samples.len(), dim));
    for (i, f) in rows.iter().enumerate() {
        visual.row_mut(i).assign(&ndarray::ArrayView1::from(f.as_slice()));
    }
    Ok(LoadedSplit {
        samples,
        visual,
        graphs: numeric,
        scene_graphs,
    })
}
