//! One function per CLI verb, each driven by a [`Config`].

use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use super::{
    build_feature_store, build_text_store, graphgen, io_err, load_split, risk_report, write_atomic, AttributionRecord,
    Config, DatasetManifest, GraphGenSummary, GraphStore, LiveLvlm, LoadedSplit, LvlmClient, PipelineError,
    ReplayLvlm, RiskReport,
};
use crate::attribution::{attribution_csv, gatt_attribute, render_attribution};
use crate::clients::{ClientMode, CommandTransport, FixtureDir};
use crate::evalkit::{
    check_identity_overlap, embed_split, report_from_embeddings, write_embedding_table, CrossDataset, EmbeddingRecord,
    EvalOptions, EvalReport, Split,
};
use crate::model::{self, Model};
use crate::scenegraph::repair::{LiveRepairClient, NoRepairClient, ReplayRepairClient};
use crate::scenegraph::RepairClient;
use crate::textembed::{EmbedClient, FixtureEmbedder, LiveEmbedder, StubEmbedder};
use crate::trainkit::{self, TrainOutcome, TrainOutput, TrainSet};
use crate::visual::{
    AdapterManifest, BackboneAdapter, CommandBackbone, FixtureBackbone, StubBackbone, PREPROCESSING_VERSION,
};

/// Attribution records, one JSON object per line, in the reports directory.
pub const ATTRIBUTIONS_FILE: &str = "attributions.jsonl";
const RISK_REPORT_STEM: &str = "risk_report";
const SHORTLIST_LEN: usize = 20;

fn transport(command: &str, what: &str) -> Result<CommandTransport, PipelineError> {
    CommandTransport::from_command_line(command)
        .ok_or_else(|| PipelineError::Config(format!("{what} is in live mode but its command is empty")))
}

/// Runs ingestion and writes the manifest.
pub fn ingest_stage(cfg: &Config) -> Result<DatasetManifest, PipelineError> {
    let mut manifest = super::ingest(&cfg.data_root, cfg.dataset_kind()?)?;
    manifest.graph_store = Some(cfg.graph_store.clone());
    manifest.feature_store = Some(cfg.feature_store.clone());
    manifest.save(&cfg.manifest)?;
    info!(
        "{}: train {} images / {} ids, query {} / {}, gallery {} / {}",
        manifest.dataset,
        manifest.train.images,
        manifest.train.identities,
        manifest.query.images,
        manifest.query.identities,
        manifest.gallery.images,
        manifest.gallery.identities
    );
    Ok(manifest)
}

fn load_manifest(cfg: &Config) -> Result<DatasetManifest, PipelineError> {
    DatasetManifest::load(&cfg.manifest)
}

/// Generates scene graphs for every sample of the manifest.
pub fn graphgen_stage(cfg: &Config) -> Result<GraphGenSummary, PipelineError> {
    let manifest = load_manifest(cfg)?;
    let mut lvlm: Box<dyn LvlmClient> = match cfg.lvlm_mode {
        ClientMode::Replay => Box::new(ReplayLvlm::new(FixtureDir::new(&cfg.lvlm_fixtures))),
        ClientMode::Live => Box::new(LiveLvlm::new(
            transport(&cfg.lvlm_command, "the scene-graph generator")?,
            Some(FixtureDir::new(&cfg.lvlm_fixtures)),
        )),
        ClientMode::Stub => {
            return Err(PipelineError::Config("the scene-graph generator has no stub mode".into()));
        }
    };
    let mut repair: Box<dyn RepairClient> = match cfg.repair_mode {
        ClientMode::Replay => Box::new(ReplayRepairClient::new(FixtureDir::new(&cfg.repair_fixtures))),
        ClientMode::Live => Box::new(LiveRepairClient::new(
            transport(&cfg.repair_command, "the repair model")?,
            Some(FixtureDir::new(&cfg.repair_fixtures)),
        )),
        ClientMode::Stub => Box::new(NoRepairClient),
    };
    let store = GraphStore::new(&cfg.graph_store);
    graphgen(&manifest.samples, lvlm.as_mut(), repair.as_mut(), &store)
}

fn backbone(cfg: &Config) -> Result<Box<dyn BackboneAdapter>, PipelineError> {
    Ok(match cfg.backbone_mode {
        ClientMode::Stub => Box::new(StubBackbone::new(cfg.seed)),
        ClientMode::Replay => Box::new(FixtureBackbone::load(&cfg.backbone_fixtures)?),
        ClientMode::Live => Box::new(CommandBackbone::new(
            AdapterManifest {
                name: cfg.backbone_name.clone(),
                dim: cfg.backbone_dim,
                preprocessing: PREPROCESSING_VERSION.into(),
            },
            transport(&cfg.backbone_command, "the visual backbone")?,
        )),
    })
}

fn embedder(cfg: &Config) -> Result<Box<dyn EmbedClient>, PipelineError> {
    Ok(match cfg.embedder_mode {
        ClientMode::Stub => Box::new(StubEmbedder::new(cfg.seed)),
        ClientMode::Replay => Box::new(FixtureEmbedder::load(&cfg.embedder_fixtures)?),
        ClientMode::Live => Box::new(LiveEmbedder::new(transport(&cfg.embedder_command, "the text embedder")?)),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EmbedSummary {
    pub features_added: usize,
    pub texts_added: usize,
}

/// Fills the visual feature store (unless graph-only) and the text
/// embedding store. Complete stores are left untouched.
pub fn embed_stage(cfg: &Config) -> Result<EmbedSummary, PipelineError> {
    let manifest = load_manifest(cfg)?;
    let mut summary = EmbedSummary::default();
    if cfg.branch_mode.uses_visual() {
        summary.features_added = build_feature_store(&manifest.samples, backbone(cfg)?.as_ref(), &cfg.feature_store)?;
    }
    let store = GraphStore::new(&cfg.graph_store);
    summary.texts_added = build_text_store(&manifest.samples, &store, embedder(cfg)?.as_ref(), &cfg.embedding_store)?;
    Ok(summary)
}

struct Stores {
    graphs: GraphStore,
    text: FixtureEmbedder,
    features: Option<FixtureBackbone>,
}

fn open_stores(cfg: &Config, visual: bool) -> Result<Stores, PipelineError> {
    Ok(Stores {
        graphs: GraphStore::new(&cfg.graph_store),
        text: FixtureEmbedder::load(&cfg.embedding_store)?,
        features: if visual {
            Some(FixtureBackbone::load(&cfg.feature_store)?)
        } else {
            None
        },
    })
}

fn load(manifest: &DatasetManifest, split: Split, stores: &Stores) -> Result<LoadedSplit, PipelineError> {
    load_split(manifest, split, &stores.graphs, &stores.text, stores.features.as_ref())
}

/// Trains on the manifest's training split, writing checkpoints and the
/// metrics log under the checkpoint directory.
pub fn train_stage(cfg: &Config, resume: bool) -> Result<TrainOutcome, PipelineError> {
    let manifest = load_manifest(cfg)?;
    let train_cfg = cfg.train_config();
    let stores = open_stores(cfg, train_cfg.mode.uses_visual())?;
    let train = load(&manifest, Split::Train, &stores)?;
    let eval_ids: Vec<i64> = manifest
        .samples
        .iter()
        .filter(|s| s.split != Split::Train)
        .map(|s| s.identity)
        .collect();
    trainkit::check_disjoint(&train.ids(), &eval_ids)?;

    let labels_of = manifest.label_map();
    let (mut keep, mut labels) = (Vec::new(), Vec::new());
    for (i, s) in train.samples.iter().enumerate() {
        if let Some(&l) = labels_of.get(&s.identity) {
            keep.push(i);
            labels.push(l);
        }
    }
    let set = TrainSet {
        visual: train.visual.select(ndarray::Axis(0), &keep),
        graphs: keep.iter().map(|&i| train.graphs[i].clone()).collect(),
        labels,
        class_ids: manifest.class_ids(),
    };
    let visual_dim = stores.features.as_ref().map_or(0, |f| f.manifest().dim);
    let model_cfg = model::ModelConfig::standard(visual_dim, set.class_ids.len(), train_cfg.mode);
    let resume_from = if resume {
        trainkit::latest_checkpoint(&cfg.checkpoint_dir)
    } else {
        None
    };
    let mut extra = serde_json::Map::new();
    extra.insert("dataset".into(), manifest.dataset.to_string().into());
    let output = TrainOutput {
        out_dir: Some(&cfg.checkpoint_dir),
        resume_from: resume_from.as_deref(),
        extra,
    };
    Ok(trainkit::train(&set, model_cfg, &train_cfg, &output)?)
}

fn load_model(cfg: &Config, checkpoint: Option<&Path>) -> Result<(Model, model::CheckpointManifest, PathBuf), PipelineError> {
    let dir = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => trainkit::latest_checkpoint(&cfg.checkpoint_dir).ok_or_else(|| {
            PipelineError::Store(format!("no checkpoint under {}", cfg.checkpoint_dir.display()))
        })?,
    };
    let (model, _, manifest) = model::load_checkpoint(&dir)?;
    Ok((model, manifest, dir))
}

/// Overrides for the eval verb.
#[derive(Debug, Clone, Default)]
pub struct EvalFlags {
    pub checkpoint: Option<PathBuf>,
    /// Overrides the config's `rerank` switch.
    pub rerank: Option<bool>,
    /// Forces cross-dataset mode; otherwise inferred from the checkpoint.
    pub cross_dataset: bool,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    /// Report file stem and report; the baseline comes first.
    pub reports: Vec<(String, EvalReport)>,
}

/// Evaluates a checkpoint on the query and gallery splits. Always writes
/// the baseline report, plus a re-ranked one when re-ranking is enabled.
pub fn eval_stage(cfg: &Config, flags: &EvalFlags) -> Result<EvalOutcome, PipelineError> {
    let manifest = load_manifest(cfg)?;
    let (model, ckpt, ckpt_dir) = load_model(cfg, flags.checkpoint.as_deref())?;
    let target = manifest.dataset.to_string();
    let source = ckpt
        .extra
        .get("dataset")
        .and_then(|v| v.as_str())
        .unwrap_or(&target)
        .to_string();
    let cross = (flags.cross_dataset || source != target).then(|| CrossDataset {
        source: source.clone(),
        target: target.clone(),
    });
    let stores = open_stores(cfg, model.config.mode.uses_visual())?;
    let query = load(&manifest, Split::Query, &stores)?;
    let gallery = load(&manifest, Split::Gallery, &stores)?;
    let q_samples = query.samples.clone();
    let g_samples = gallery.samples.clone();
    let (query, gallery) = (query.into_eval_split(), gallery.into_eval_split());

    let mut options = EvalOptions {
        rerank: None,
        cross_dataset: cross.clone(),
        train_ids: Some(ckpt.class_ids.clone()),
        dataset: target.clone(),
    };
    check_identity_overlap(&query, &gallery, &options)?;
    info!("evaluating {} on {target}", ckpt_dir.display());
    let q_emb = embed_split(&model, &query)?;
    let g_emb = embed_split(&model, &gallery)?;

    let stem = match &cross {
        Some(c) => format!("eval_{}_to_{}", c.source, c.target),
        None => format!("eval_{target}"),
    };
    let mut reports = vec![(
        stem.clone(),
        report_from_embeddings(&query, q_emb.view(), &gallery, g_emb.view(), &options)?,
    )];
    if flags.rerank.unwrap_or(cfg.rerank) {
        options.rerank = Some(cfg.rerank_params());
        reports.push((
            format!("{stem}_rerank"),
            report_from_embeddings(&query, q_emb.view(), &gallery, g_emb.view(), &options)?,
        ));
    }
    for (name, report) in &reports {
        report.write(&cfg.reports_dir, name)?;
    }

    let records: Vec<EmbeddingRecord> = q_samples
        .iter()
        .zip(q_emb.rows())
        .chain(g_samples.iter().zip(g_emb.rows()))
        .map(|(s, row)| EmbeddingRecord {
            image_id: s.image_id.clone(),
            identity: s.identity,
            camera: s.camera,
            feature: row.to_vec(),
            split: s.split,
        })
        .collect();
    write_embedding_table(&cfg.reports_dir.join(format!("{stem}_embeddings.bin")), &records)?;
    Ok(EvalOutcome { reports })
}

/// Attributes the named images, or the first `attribution_queries` query
/// images. Writes a text and a CSV rendering per image and the records file.
pub fn attribute_stage(
    cfg: &Config,
    image_ids: &[String],
    checkpoint: Option<&Path>,
) -> Result<Vec<AttributionRecord>, PipelineError> {
    let manifest = load_manifest(cfg)?;
    let (model, _, _) = load_model(cfg, checkpoint)?;
    let stores = open_stores(cfg, false)?;
    let mut pool = load(&manifest, Split::Query, &stores)?;
    if !image_ids.is_empty() {
        for split in [Split::Gallery, Split::Train] {
            let more = load(&manifest, split, &stores)?;
            pool.samples.extend(more.samples);
            pool.graphs.extend(more.graphs);
            pool.scene_graphs.extend(more.scene_graphs);
        }
    }
    let chosen: Vec<usize> = if image_ids.is_empty() {
        (0..pool.samples.len().min(cfg.attribution_queries)).collect()
    } else {
        image_ids
            .iter()
            .map(|id| {
                pool.samples
                    .iter()
                    .position(|s| &s.image_id == id)
                    .ok_or_else(|| PipelineError::Store(format!("no stored graph for image {id:?}")))
            })
            .collect::<Result<_, _>>()?
    };
    let dir = cfg.reports_dir.join("attributions");
    let mut records = Vec::new();
    for i in chosen {
        let (sample, graph, scene) = (&pool.samples[i], &pool.graphs[i], &pool.scene_graphs[i]);
        let result = gatt_attribute(&model.encoder, graph, None)?;
        write_atomic(
            &dir.join(format!("{}.txt", sample.image_id)),
            render_attribution(&result, scene)?.as_bytes(),
        )?;
        write_atomic(
            &dir.join(format!("{}.csv", sample.image_id)),
            attribution_csv(&result, scene).as_bytes(),
        )?;
        records.push(AttributionRecord::new(&result, scene, sample.identity));
    }
    let mut lines = String::new();
    for r in &records {
        lines.push_str(&serde_json::to_string(r).expect("record serializes"));
        lines.push('\n');
    }
    write_atomic(&cfg.reports_dir.join(ATTRIBUTIONS_FILE), lines.as_bytes())?;
    Ok(records)
}

/// Collects every evaluation report and the attribution records in the
/// reports directory into the risk report (Markdown and JSON).
pub fn report_stage(cfg: &Config) -> Result<RiskReport, PipelineError> {
    let dir = &cfg.reports_dir;
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == "json")
                && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("eval_"))
        })
        .collect();
    paths.sort();
    let mut reports = Vec::new();
    for p in &paths {
        let text = std::fs::read_to_string(p).map_err(io_err(p))?;
        reports.push(EvalReport::from_json(&text).map_err(|e| PipelineError::Store(format!("{}: {e}", p.display())))?);
    }
    let attributions_path = dir.join(ATTRIBUTIONS_FILE);
    let mut attributions = Vec::new();
    if attributions_path.is_file() {
        let text = std::fs::read_to_string(&attributions_path).map_err(io_err(&attributions_path))?;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            attributions.push(
                serde_json::from_str(line)
                    .map_err(|e| PipelineError::Store(format!("{}: {e}", attributions_path.display())))?,
            );
        }
    }
    let report = risk_report(&reports, &attributions, SHORTLIST_LEN);
    write_atomic(&dir.join(format!("{RISK_REPORT_STEM}.md")), report.to_markdown().as_bytes())?;
    write_atomic(&dir.join(format!("{RISK_REPORT_STEM}.json")), report.to_json().as_bytes())?;
    Ok(report)
}
