//! Dataset ingestion, store building, configuration, orchestration of the
//! training and evaluation stages, and risk reporting.

mod config;
mod dataset;
mod graphgen;
mod report;
mod stages;
mod stores;
mod synth;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use config::Config;
pub use dataset::{
    ingest, parse_cuhk03_filename, parse_market_filename, DatasetKind, DatasetManifest, PersonSample, SplitCounts,
};
pub use graphgen::{
    graphgen, GraphGenSummary, GraphProgress, GraphStore, LiveLvlm, LvlmClient, ReplayLvlm, PROGRESS_FILE,
};
pub use report::{
    aggregate_attributes, risk_report, AttributeRisk, AttributionRecord, DatasetSummary, NodeAttribution, RiskReport,
    SettingMetrics,
};
pub use stages::{
    attribute_stage, embed_stage, eval_stage, graphgen_stage, ingest_stage, report_stage, train_stage, EmbedSummary,
    EvalFlags, EvalOutcome, ATTRIBUTIONS_FILE,
};
pub use stores::{build_feature_store, build_text_store, graph_texts, load_split, LoadedSplit};
pub use synth::{synthesize, SynthConfig, SynthTruth, TRUTH_FILE};

use crate::attribution::AttributionError;
use crate::clients::ClientError;
use crate::evalkit::EvalError;
use crate::model::ModelError;
use crate::textembed::EmbedError;
use crate::trainkit::TrainError;
use crate::visual::VisualError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("file name {0:?} does not follow the <pid>_c<cam>s<seq>_<frame>_<box> convention")]
    FilenameFormat(String),
    #[error("missing dataset directory {0}")]
    MissingDirectory(PathBuf),
    #[error("duplicate image id {0:?}")]
    DuplicateImageId(String),
    #[error("train and test identities overlap: {0:?}")]
    IdentityOverlap(Vec<i64>),
    #[error("query identities absent from the gallery: {0:?}")]
    QueryNotInGallery(Vec<i64>),
    #[error("client outage after {completed} of {total} images ({message}); re-run to resume")]
    Outage {
        completed: usize,
        total: usize,
        message: String,
    },
    #[error("configuration: {0}")]
    Config(String),
    #[error("store: {0}")]
    Store(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Visual(#[from] VisualError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `contents` through a temporary file so readers never see a
/// partial document.
pub(crate) fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}
