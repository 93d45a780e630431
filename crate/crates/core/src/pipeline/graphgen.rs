//! Scene-graph generation over a dataset with a resumable, idempotent store.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::{io_err, write_atomic, PersonSample, PipelineError};
use crate::clients::{fixture_key, ClientError, CommandTransport, FixtureDir, FixtureRecord};
use crate::scenegraph::prompts::GRAPH_GENERATION_PROMPT;
use crate::scenegraph::{fix_malformed_json, llm_repair, parse_scene_graph, RepairClient, RepairError, SceneGraph};

/// Vision-language generator of scene-graph documents.
pub trait LvlmClient {
    fn describe(&mut self, sample: &PersonSample, prompt: &str) -> Result<String, ClientError>;
}

/// Replays recorded documents keyed by the hash of the image id.
pub struct ReplayLvlm {
    fixtures: FixtureDir,
}

impl ReplayLvlm {
    pub fn new(fixtures: FixtureDir) -> Self {
        Self { fixtures }
    }
}

impl LvlmClient for ReplayLvlm {
    fn describe(&mut self, sample: &PersonSample, _prompt: &str) -> Result<String, ClientError> {
        let key = fixture_key(&sample.image_id);
        match self.fixtures.load(&key)? {
            Some(rec) => Ok(rec.response),
            None => Err(ClientError::Unavailable(format!(
                "no generator fixture for {} in {}",
                sample.image_id,
                self.fixtures.root().display()
            ))),
        }
    }
}

/// External generator. Request on stdin:
/// `{"image_id", "image_path", "prompt"}`; the response is the raw document.
pub struct LiveLvlm {
    transport: CommandTransport,
    record_to: Option<FixtureDir>,
}

impl LiveLvlm {
    pub fn new(transport: CommandTransport, record_to: Option<FixtureDir>) -> Self {
        Self { transport, record_to }
    }
}

impl LvlmClient for LiveLvlm {
    fn describe(&mut self, sample: &PersonSample, prompt: &str) -> Result<String, ClientError> {
        let request = serde_json::json!({
            "image_id": sample.image_id,
            "image_path": sample.path,
            "prompt": prompt,
        });
        let response = self.transport.call(&request.to_string())?;
        if let Some(fx) = &self.record_to {
            fx.store(
                &fixture_key(&sample.image_id),
                &FixtureRecord {
                    request: sample.image_id.clone(),
                    response: response.clone(),
                },
            )?;
        }
        Ok(response)
    }
}

pub const PROGRESS_FILE: &str = "progress.json";

/// Bookkeeping next to the stored documents.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GraphProgress {
    /// Image ids whose document could not be recovered, with the reason.
    pub failed: BTreeMap<String, String>,
    /// Rule names applied per repaired image.
    pub rule_repairs: BTreeMap<String, Vec<String>>,
    pub llm_repairs: BTreeSet<String>,
}

/// One canonical document per image id under a directory.
#[derive(Debug, Clone)]
pub struct GraphStore {
    root: PathBuf,
}

impl GraphStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, image_id: &str) -> PathBuf {
        self.root.join(format!("{image_id}.json"))
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.path(image_id).is_file()
    }

    pub fn save(&self, image_id: &str, graph: &SceneGraph) -> Result<(), PipelineError> {
        write_atomic(&self.path(image_id), graph.to_document().as_bytes())
    }

    /// The stored graph, or `None` if the image has no document.
    pub fn load(&self, image_id: &str) -> Result<Option<SceneGraph>, PipelineError> {
        let path = self.path(image_id);
        if !path.is_file() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        let graph = parse_scene_graph(&text).map_err(|e| PipelineError::Store(format!("{}: {e}", path.display())))?;
        Ok(Some(graph.with_image_id(image_id)))
    }

    pub fn progress(&self) -> Result<GraphProgress, PipelineError> {
        let path = self.root.join(PROGRESS_FILE);
        if !path.is_file() {
            return Ok(GraphProgress::default());
        }
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Store(format!("{}: {e}", path.display())))
    }

    fn save_progress(&self, progress: &GraphProgress) -> Result<(), PipelineError> {
        let text = serde_json::to_string_pretty(progress).expect("progress serializes");
        write_atomic(&self.root.join(PROGRESS_FILE), text.as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GraphGenSummary {
    /// Documents written in this run.
    pub generated: usize,
    /// Documents already present.
    pub cached: usize,
    pub rule_repaired: usize,
    pub llm_repaired: usize,
    /// Images excluded because their document could not be recovered.
    pub failed: usize,
    /// Generator calls made in this run.
    pub client_calls: usize,
}

enum Recovered {
    Graph(SceneGraph, Vec<String>, bool),
    Failed(String),
}

fn recover(text: &str, repair: &mut dyn RepairClient) -> Result<Recovered, ClientError> {
    if let Ok(g) = parse_scene_graph(text) {
        return Ok(Recovered::Graph(g, Vec::new(), false));
    }
    let ruled = fix_malformed_json(text);
    let rules: Vec<String> = ruled.rules_applied.iter().map(|r| r.as_str().to_string()).collect();
    if let Ok(g) = parse_scene_graph(&ruled.repaired_text) {
        return Ok(Recovered::Graph(g, rules, false));
    }
    match llm_repair(text, repair) {
        Ok(out) => {
            let g = parse_scene_graph(&out.repaired_text).expect("llm_repair returns parseable text");
            let rules = out.rules_applied.iter().map(|r| r.as_str().to_string()).collect();
            Ok(Recovered::Graph(g, rules, true))
        }
        Err(RepairError::Unavailable(m)) => Err(ClientError::Unavailable(m)),
        Err(e) => Ok(Recovered::Failed(e.to_string())),
    }
}

/// Generates one document per sample.
///
/// Existing documents and recorded failures are skipped without calling the
/// client. A client outage stops the run with [`PipelineError::Outage`];
/// everything stored so far is kept, so a re-run resumes where it stopped.
pub fn graphgen(
    samples: &[PersonSample],
    lvlm: &mut dyn LvlmClient,
    repair: &mut dyn RepairClient,
    store: &GraphStore,
) -> Result<GraphGenSummary, PipelineError> {
    std::fs::create_dir_all(store.root()).map_err(io_err(store.root()))?;
    let mut progress = store.progress()?;
    let mut summary = GraphGenSummary::default();
    let total = samples.len();
    for (done, sample) in samples.iter().enumerate() {
        let id = &sample.image_id;
        if store.contains(id) {
            summary.cached += 1;
            continue;
        }
        if progress.failed.contains_key(id) {
            summary.failed += 1;
            continue;
        }
        let outage = |e: ClientError| PipelineError::Outage {
            completed: done,
            total,
            message: e.to_string(),
        };
        summary.client_calls += 1;
        let recovered = lvlm
            .describe(sample, GRAPH_GENERATION_PROMPT)
            .and_then(|text| recover(&text, repair));
        let recovered = match recovered {
            Ok(r) => r,
            Err(e) => {
                store.save_progress(&progress)?;
                return Err(outage(e));
            }
        };
        match recovered {
            Recovered::Graph(graph, rules, used_llm) => {
                if !rules.is_empty() {
                    info!("{id}: repaired with {}", rules.join(", "));
                    summary.rule_repaired += usize::from(!used_llm);
                    progress.rule_repairs.insert(id.clone(), rules);
                }
                if used_llm {
                    summary.llm_repaired += 1;
                    progress.llm_repairs.insert(id.clone());
                }
                store.save(id, &graph)?;
                summary.generated += 1;
            }
            Recovered::Failed(reason) => {
                warn!("{id}: excluded, {reason}");
                progress.failed.insert(id.clone(), reason);
                summary.failed += 1;
            }
        }
    }
    store.save_progress(&progress)?;
    Ok(summary)
}
