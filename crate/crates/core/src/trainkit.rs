//! Identity-balanced batch sampling, learning-rate schedule and the
//! training loop with per-epoch checkpoints and a per-step metrics log.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::BranchMode;
use crate::losses::LossConfig;
use crate::model::{self, BatchInput, CheckpointManifest, Model, ModelConfig, ModelError};
use crate::nn::Adam;
use crate::textembed::NumericGraph;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("need {needed} identities per batch, only {available} available")]
    InsufficientIdentities { needed: usize, available: usize },
    #[error("train and evaluation identities overlap: {0:?}")]
    IdentityOverlap(Vec<i64>),
    #[error("training data: {0}")]
    Data(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub instances_per_id: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    /// Epochs after which the rate drops by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub seed: u64,
    pub lambda_center: f64,
    pub margin: f64,
    pub smoothing: f64,
    pub center_lr: f64,
    /// Steps per epoch; `None` means `max(1, samples / batch_size)`.
    pub steps_per_epoch: Option<usize>,
    /// Stop after this many steps in total, ending the current epoch early.
    pub max_steps: Option<u64>,
    pub mode: BranchMode,
    /// Checkpoints to keep on disk; 0 keeps all.
    pub keep_checkpoints: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            instances_per_id: 4,
            epochs: 120,
            base_lr: 0.00035,
            warmup_epochs: 10,
            decay_epochs: vec![40, 70],
            decay_factor: 0.1,
            seed: 0,
            lambda_center: 0.0005,
            margin: 0.3,
            smoothing: 0.1,
            center_lr: 0.5,
            steps_per_epoch: None,
            max_steps: None,
            mode: BranchMode::Joint,
            keep_checkpoints: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return err("epochs must be at least 1".into());
        }
        if self.instances_per_id < 2 {
            return err("instances per identity must be at least 2".into());
        }
        if self.batch_size == 0 || self.batch_size % self.instances_per_id != 0 {
            return err(format!(
                "batch size {} is not a multiple of {}",
                self.batch_size, self.instances_per_id
            ));
        }
        if self.batch_size / self.instances_per_id < 2 {
            return err("a batch needs at least two identities".into());
        }
        if !(self.base_lr > 0.0) {
            return err("base learning rate must be positive".into());
        }
        if !(self.center_lr >= 0.0) {
            return err("center learning rate must be non-negative".into());
        }
        Ok(())
    }

    pub fn identities_per_batch(&self) -> usize {
        self.batch_size / self.instances_per_id
    }

    pub fn loss_config(&self, num_classes: usize) -> LossConfig {
        LossConfig {
            margin: self.margin,
            lambda_center: self.lambda_center,
            smoothing: self.smoothing,
            num_classes,
        }
    }
}

/// Learning rate for a 1-based epoch: linear warm-up from `base / 100` to
/// `base` over the warm-up epochs, then step decay at each milestone passed.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let epoch = epoch.max(1);
    let base = cfg.base_lr;
    if cfg.warmup_epochs > 0 && epoch <= cfg.warmup_epochs {
        let frac = if cfg.warmup_epochs == 1 {
            1.0
        } else {
            (epoch - 1) as f64 / (cfg.warmup_epochs - 1) as f64
        };
        return base * (0.01 + 0.99 * frac);
    }
    let passed = cfg.decay_epochs.iter().filter(|&&m| epoch > m).count();
    base * cfg.decay_factor.powi(passed as i32)
}

/// Sample indices grouped by dense identity label.
#[derive(Debug, Clone, Default)]
pub struct PkIndex {
    by_label: BTreeMap<usize, Vec<usize>>,
}

impl PkIndex {
    pub fn new(labels: &[usize]) -> Self {
        let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            by_label.entry(l).or_default().push(i);
        }
        Self { by_label }
    }

    pub fn num_identities(&self) -> usize {
        self.by_label.len()
    }
}

/// Draws `B / K` distinct identities and `K` samples of each, with
/// replacement only for identities holding fewer than `K` samples.
pub fn pk_sample<R: Rng>(index: &PkIndex, batch_size: usize, k: usize, rng: &mut R) -> Result<Vec<usize>, TrainError> {
    if k == 0 || batch_size % k != 0 {
        return Err(TrainError::Config(format!("batch size {batch_size} is not a multiple of {k}")));
    }
    let p = batch_size / k;
    let labels: Vec<usize> = index.by_label.keys().copied().collect();
    if labels.len() < p {
        return Err(TrainError::InsufficientIdentities {
            needed: p,
            available: labels.len(),
        });
    }
    let mut out = Vec::with_capacity(batch_size);
    for label in labels.choose_multiple(rng, p) {
        let pool = &index.by_label[label];
        if pool.len() >= k {
            out.extend(pool.choose_multiple(rng, k).copied());
        } else {
            out.extend((0..k).map(|_| pool[rng.gen_range(0..pool.len())]));
        }
    }
    Ok(out)
}

/// Fails when any identity appears on both sides.
pub fn check_disjoint(train_ids: &[i64], eval_ids: &[i64]) -> Result<(), TrainError> {
    let train: BTreeSet<i64> = train_ids.iter().copied().collect();
    let overlap: Vec<i64> = eval_ids
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .intersection(&train)
        .copied()
        .collect();
    if overlap.is_empty() {
        Ok(())
    } else {
        Err(TrainError::IdentityOverlap(overlap))
    }
}

/// Precomputed training inputs, row-aligned.
#[derive(Debug, Clone)]
pub struct TrainSet {
    /// `N × visual_dim`; may have zero columns in graph-only mode.
    pub visual: Array2<f64>,
    pub graphs: Vec<NumericGraph>,
    /// Dense labels `0..P`.
    pub labels: Vec<usize>,
    /// Raw identity of each dense label.
    pub class_ids: Vec<i64>,
}

impl TrainSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn validate(&self, mode: BranchMode) -> Result<(), TrainError> {
        let n = self.len();
        if mode.uses_visual() && self.visual.nrows() != n {
            return Err(TrainError::Data(format!("{} visual rows for {n} samples", self.visual.nrows())));
        }
        if mode.uses_graph() && self.graphs.len() != n {
            return Err(TrainError::Data(format!("{} graphs for {n} samples", self.graphs.len())));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.class_ids.len()) {
            return Err(TrainError::Data(format!("label {bad} has no identity entry")));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    #[serde(rename = "L_triplet")]
    pub triplet: f64,
    #[serde(rename = "L_center")]
    pub center: f64,
    #[serde(rename = "L_id")]
    pub id: f64,
    #[serde(rename = "L_total")]
    pub total: f64,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "ckpt";

pub fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(CHECKPOINT_DIR).join(format!("epoch_{epoch}"))
}

/// Most recent `epoch_<n>` checkpoint under `out_dir`.
pub fn latest_checkpoint(out_dir: &Path) -> Option<PathBuf> {
    let entries = std::fs::read_dir(out_dir.join(CHECKPOINT_DIR)).ok()?;
    entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let n: usize = name.strip_prefix("epoch_")?.parse().ok()?;
            e.path().join(model::MANIFEST_FILE).exists().then_some((n, e.path()))
        })
        .max_by_key(|(n, _)| *n)
        .map(|(_, p)| p)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<MetricRecord>,
    pub last_checkpoint: Option<PathBuf>,
}

/// Where training writes, and what it resumes from.
#[derive(Debug, Clone, Default)]
pub struct TrainOutput<'a> {
    pub out_dir: Option<&'a Path>,
    pub resume_from: Option<&'a Path>,
    /// Free-form provenance stored in every checkpoint manifest.
    pub extra: serde_json::Map<String, serde_json::Value>,
}

/// Runs the training loop. Model parameters are initialized from
/// `cfg.seed`; the batch sampler draws from a separate stream whose position
/// is saved with each checkpoint so that resumed runs continue identically.
pub fn train(set: &TrainSet, model_cfg: ModelConfig, cfg: &TrainConfig, output: &TrainOutput<'_>) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    set.validate(cfg.mode)?;
    if model_cfg.mode != cfg.mode {
        return Err(TrainError::Config("model and training branch modes differ".into()));
    }
    if model_cfg.num_classes != set.class_ids.len() {
        return Err(TrainError::Config(format!(
            "model has {} classes, data has {}",
            model_cfg.num_classes,
            set.class_ids.len()
        )));
    }
    let loss_cfg = cfg.loss_config(set.class_ids.len());
    loss_cfg.validate().map_err(|e| TrainError::Config(e.to_string()))?;
    let index = PkIndex::new(&set.labels);
    if index.num_identities() < cfg.identities_per_batch() {
        return Err(TrainError::InsufficientIdentities {
            needed: cfg.identities_per_batch(),
            available: index.num_identities(),
        });
    }

    let mut sampler = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5341_4d50_4c45);
    let (mut model, mut adam, start_epoch, mut step) = match output.resume_from {
        Some(dir) => {
            let (m, a, man) = model::load_checkpoint(dir)?;
            if man.seed != cfg.seed {
                return Err(TrainError::Config(format!(
                    "checkpoint seed {} differs from configured seed {}",
                    man.seed, cfg.seed
                )));
            }
            if man.model != model_cfg {
                return Err(TrainError::Config("checkpoint geometry differs from the configured model".into()));
            }
            sampler.set_word_pos(man.rng_word_pos);
            (m, a, man.epoch + 1, man.step)
        }
        None => {
            let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            (Model::init(&mut init_rng, model_cfg), Adam::default(), 1, 0)
        }
    };

    let mut metrics_file = match output.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join(METRICS_FILE);
            let file = if output.resume_from.is_some() {
                truncate_metrics(&path, step)?;
                std::fs::OpenOptions::new().append(true).create(true).open(&path)
            } else {
                std::fs::File::create(&path)
            };
            Some((file.map_err(io_err(&path))?, path))
        }
        None => None,
    };

    let steps_per_epoch = cfg
        .steps_per_epoch
        .unwrap_or_else(|| (set.len() / cfg.batch_size).max(1));
    let mut metrics = Vec::new();
    let mut last_checkpoint = None;
    let graph_refs: Vec<&NumericGraph> = set.graphs.iter().collect();

    'epochs: for epoch in start_epoch..=cfg.epochs {
        let lr = lr_at(epoch, cfg);
        for _ in 0..steps_per_epoch {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let batch = pk_sample(&index, cfg.batch_size, cfg.instances_per_id, &mut sampler)?;
            let labels: Vec<usize> = batch.iter().map(|&i| set.labels[i]).collect();
            let visual = cfg
                .mode
                .uses_visual()
                .then(|| set.visual.select(Axis(0), &batch));
            let graphs: Vec<&NumericGraph> = if cfg.mode.uses_graph() {
                batch.iter().map(|&i| graph_refs[i]).collect()
            } else {
                Vec::new()
            };
            let input = BatchInput {
                visual: visual.as_ref().map(|v| v.view()),
                graphs: &graphs,
                batch_size: batch.len(),
            };
            let losses = model.train_step(&mut adam, &input, &labels, &loss_cfg, lr, cfg.center_lr)?;
            step += 1;
            let rec = MetricRecord {
                step,
                epoch,
                lr,
                triplet: losses.parts.triplet,
                center: losses.parts.center,
                id: losses.parts.id,
                total: losses.total,
            };
            if let Some((f, path)) = metrics_file.as_mut() {
                let line = serde_json::to_string(&rec).expect("record serializes");
                writeln!(f, "{line}").map_err(io_err(path))?;
            }
            metrics.push(rec);
        }
        if let Some(dir) = output.out_dir {
            let path = checkpoint_path(dir, epoch);
            let manifest = CheckpointManifest {
                epoch,
                step,
                seed: cfg.seed,
                rng_word_pos: sampler.get_word_pos(),
                model: model.config,
                negative_slope: model.encoder.layer1.negative_slope,
                tensors: model.tensor_manifest(),
                adam_beta1: adam.beta1,
                adam_beta2: adam.beta2,
                adam_eps: adam.eps,
                adam_step: adam.step,
                class_ids: set.class_ids.clone(),
                extra: output.extra.clone(),
            };
            if let Some((f, path)) = metrics_file.as_mut() {
                f.flush().map_err(io_err(path))?;
            }
            model::save_checkpoint(&path, &model, &adam, &manifest)?;
            log::info!("epoch {epoch}: checkpoint {}", path.display());
            prune_checkpoints(dir, epoch, cfg.keep_checkpoints)?;
            last_checkpoint = Some(path);
        }
    }
    Ok(TrainOutcome {
        model,
        metrics,
        last_checkpoint,
    })
}

/// Drops metric lines past `step` so a resumed run appends cleanly.
fn truncate_metrics(path: &Path, step: u64) -> Result<(), TrainError> {
    let Ok(text) = std::fs::read_to_string(path) else {
        return Ok(());
    };
    let mut kept = String::new();
    for line in text.lines() {
        let Ok(rec) = serde_json::from_str::<MetricRecord>(line) else {
            continue;
        };
        if rec.step <= step {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept).map_err(io_err(path))
}

fn prune_checkpoints(out_dir: &Path, current: usize, keep: usize) -> Result<(), TrainError> {
    if keep == 0 || current <= keep {
        return Ok(());
    }
    let old = checkpoint_path(out_dir, current - keep);
    if old.exists() {
        std::fs::remove_dir_all(&old).map_err(io_err(&old))?;
    }
    Ok(())
}

/// Reads a metrics log.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>, TrainError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| TrainError::Data(format!("{}: {e}", path.display()))))
        .collect()
}
