//! Flat key/value configuration. Every key has a default; relative paths
//! resolve against the directory of the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{io_err, DatasetKind, PipelineError};
use crate::clients::ClientMode;
use crate::evalkit::RerankParams;
use crate::fusion::BranchMode;
use crate::trainkit::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// `market1501` or `cuhk03np`.
    pub dataset: String,
    pub data_root: PathBuf,
    pub manifest: PathBuf,
    pub graph_store: PathBuf,
    /// Text embedding store (one JSON record per line).
    pub embedding_store: PathBuf,
    /// Visual feature store directory.
    pub feature_store: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub reports_dir: PathBuf,
    pub seed: u64,

    pub lvlm_mode: ClientMode,
    pub lvlm_fixtures: PathBuf,
    pub lvlm_command: String,
    pub repair_mode: ClientMode,
    pub repair_fixtures: PathBuf,
    pub repair_command: String,
    pub embedder_mode: ClientMode,
    /// Recorded embeddings used in replay mode.
    pub embedder_fixtures: PathBuf,
    pub embedder_command: String,
    pub backbone_mode: ClientMode,
    /// Recorded feature store used in replay mode.
    pub backbone_fixtures: PathBuf,
    pub backbone_command: String,
    pub backbone_name: String,
    pub backbone_dim: usize,

    /// `joint`, `visual-only` or `graph-only`.
    pub branch_mode: BranchMode,
    pub batch_size: usize,
    pub instances_per_id: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub lambda_center: f64,
    pub margin: f64,
    pub smoothing: f64,
    pub center_lr: f64,
    /// 0 derives steps per epoch from the training set size.
    pub steps_per_epoch: usize,
    /// 0 means no step limit.
    pub max_steps: u64,
    /// 0 keeps every checkpoint.
    pub keep_checkpoints: usize,

    pub rerank: bool,
    pub k1: usize,
    pub k2: usize,
    pub lambda_rr: f64,
    /// Queries attributed by the `attribute` stage when no image is named.
    pub attribution_queries: usize,
}

impl Default for Config {
    fn default() -> Self {
        let train = TrainConfig::default();
        let rr = RerankParams::default();
        let work = PathBuf::from("work");
        Self {
            dataset: "market1501".into(),
            data_root: PathBuf::from("data/market1501"),
            manifest: work.join("manifest.json"),
            graph_store: work.join("graphs"),
            embedding_store: work.join("text_embeddings.jsonl"),
            feature_store: work.join("features"),
            checkpoint_dir: work.join("train"),
            reports_dir: work.join("reports"),
            seed: 0,
            lvlm_mode: ClientMode::Replay,
            lvlm_fixtures: PathBuf::from("fixtures/lvlm"),
            lvlm_command: String::new(),
            repair_mode: ClientMode::Replay,
            repair_fixtures: PathBuf::from("fixtures/repair"),
            repair_command: String::new(),
            embedder_mode: ClientMode::Stub,
            embedder_fixtures: PathBuf::from("fixtures/text_embeddings.jsonl"),
            embedder_command: String::new(),
            backbone_mode: ClientMode::Stub,
            backbone_fixtures: PathBuf::from("fixtures/features"),
            backbone_command: String::new(),
            backbone_name: "external-backbone".into(),
            backbone_dim: crate::visual::STUB_DIM,
            branch_mode: train.mode,
            batch_size: train.batch_size,
            instances_per_id: train.instances_per_id,
            epochs: train.epochs,
            base_lr: train.base_lr,
            warmup_epochs: train.warmup_epochs,
            decay_epochs: train.decay_epochs,
            decay_factor: train.decay_factor,
            lambda_center: train.lambda_center,
            margin: train.margin,
            smoothing: train.smoothing,
            center_lr: train.center_lr,
            steps_per_epoch: 0,
            max_steps: 0,
            keep_checkpoints: train.keep_checkpoints,
            rerank: true,
            k1: rr.k1,
            k2: rr.k2,
            lambda_rr: rr.lambda,
            attribution_queries: 20,
        }
    }
}

impl Config {
    /// Parses a config document; relative paths are resolved against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, PipelineError> {
        let mut cfg: Config = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    /// Every key with its current value.
    pub fn dump(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.data_root,
            &mut self.manifest,
            &mut self.graph_store,
            &mut self.embedding_store,
            &mut self.feature_store,
            &mut self.checkpoint_dir,
            &mut self.reports_dir,
            &mut self.lvlm_fixtures,
            &mut self.repair_fixtures,
            &mut self.embedder_fixtures,
            &mut self.backbone_fixtures,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.dataset_kind()?;
        self.train_config().validate()?;
        if !(0.0..=1.0).contains(&self.lambda_rr) {
            return Err(PipelineError::Config(format!("lambda_rr {} outside [0, 1]", self.lambda_rr)));
        }
        if self.k1 == 0 || self.k2 == 0 {
            return Err(PipelineError::Config("k1 and k2 must be positive".into()));
        }
        Ok(())
    }

    pub fn dataset_kind(&self) -> Result<DatasetKind, PipelineError> {
        self.dataset.parse().map_err(PipelineError::Config)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            instances_per_id: self.instances_per_id,
            epochs: self.epochs,
            base_lr: self.base_lr,
            warmup_epochs: self.warmup_epochs,
            decay_epochs: self.decay_epochs.clone(),
            decay_factor: self.decay_factor,
            seed: self.seed,
            lambda_center: self.lambda_center,
            margin: self.margin,
            smoothing: self.smoothing,
            center_lr: self.center_lr,
            steps_per_epoch: (self.steps_per_epoch > 0).then_some(self.steps_per_epoch),
            max_steps: (self.max_steps > 0).then_some(self.max_steps),
            mode: self.branch_mode,
            keep_checkpoints: self.keep_checkpoints,
        }
    }

    pub fn rerank_params(&self) -> RerankParams {
        RerankParams {
            k1: self.k1,
            k2: self.k2,
            lambda: self.lambda_rr,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_round_trips_every_default() {
        let cfg = Config::default();
        let text = cfg.dump();
        assert!(text.contains("lambda_rr = 0.3"));
        assert!(text.contains("branch_mode = \"joint\""));
        let back: Config = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let cfg = Config::from_toml("data_root = \"data\"\nseed = 3\n", Path::new("/srv/run")).unwrap();
        assert_eq!(cfg.data_root, PathBuf::from("/srv/run/data"));
        assert_eq!(cfg.manifest, PathBuf::from("/srv/run/work/manifest.json"));
        assert_eq!(cfg.seed, 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            Config::from_toml("learning_rate = 1.0", Path::new(".")),
            Err(PipelineError::Config(_))
        ));
    }
}
