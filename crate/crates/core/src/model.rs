//! The full trainable network (graph encoder, fusion, head, class centers),
//! one optimization step, and the on-disk parameter archive.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{self, BranchMode, FusionError, FusionParams, HeadMode, HeadParams, EMBED_DIM};
use crate::gat::{GatError, GraphBatch, GraphEncoder, GRAPH_DIM, HIDDEN_DIM};
use crate::losses::{self, LossConfig, LossError, LossParts};
use crate::nn::{Adam, Params, Role, TensorMut, TensorRef};
use crate::textembed::{NumericGraph, TEXT_DIM};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Gat(#[from] GatError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("batch input: {0}")]
    Input(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Network geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub visual_dim: usize,
    pub text_dim: usize,
    pub hidden_dim: usize,
    pub graph_dim: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub mode: BranchMode,
}

impl ModelConfig {
    pub fn standard(visual_dim: usize, num_classes: usize, mode: BranchMode) -> Self {
        Self {
            visual_dim,
            text_dim: TEXT_DIM,
            hidden_dim: HIDDEN_DIM,
            graph_dim: GRAPH_DIM,
            embed_dim: EMBED_DIM,
            num_classes,
            mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: GraphEncoder,
    pub fusion: FusionParams,
    pub head: HeadParams,
    /// `P × embed_dim`, optimized by plain SGD outside Adam.
    pub centers: Array2<f64>,
}

/// Inputs of one batch. `visual` is `B × visual_dim`.
pub struct BatchInput<'a> {
    pub visual: Option<ArrayView2<'a, f64>>,
    pub graphs: &'a [&'a NumericGraph],
    pub batch_size: usize,
}

impl BatchInput<'_> {
    fn check(&self, mode: BranchMode) -> Result<(), ModelError> {
        if mode.uses_visual() {
            let v = self.visual.ok_or_else(|| ModelError::Input("visual features required".into()))?;
            if v.nrows() != self.batch_size {
                return Err(ModelError::Input(format!("{} visual rows for batch {}", v.nrows(), self.batch_size)));
            }
        }
        if mode.uses_graph() && self.graphs.len() != self.batch_size {
            return Err(ModelError::Input(format!("{} graphs for batch {}", self.graphs.len(), self.batch_size)));
        }
        Ok(())
    }
}

struct Forward {
    graph_batch: Option<GraphBatch>,
    encoder_cache: Option<crate::gat::EncoderCache>,
    fusion_input: Array2<f64>,
    fused: Array2<f64>,
}

/// Loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub parts: LossParts,
    pub total: f64,
}

/// Full step gradients: the model-shaped container plus the loss values.
pub struct StepGradients {
    pub grads: Model,
    pub losses: StepLosses,
    pub batch_stats: fusion::BatchStats,
}

impl Model {
    pub fn init<R: Rng>(rng: &mut R, config: ModelConfig) -> Self {
        let encoder = GraphEncoder::init(rng, config.text_dim, config.hidden_dim, config.graph_dim, config.text_dim);
        let fusion = FusionParams::init(rng, config.mode, config.visual_dim, config.graph_dim, config.embed_dim);
        let head = HeadParams::init(rng, config.embed_dim, config.num_classes);
        Self {
            config,
            encoder,
            fusion,
            head,
            centers: Array2::zeros((config.num_classes, config.embed_dim)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            encoder: self.encoder.zeros_like(),
            fusion: self.fusion.zeros_like(),
            head: self.head.zeros_like(),
            centers: Array2::zeros(self.centers.raw_dim()),
        }
    }

    fn forward(&self, input: &BatchInput<'_>) -> Result<Forward, ModelError> {
        input.check(self.config.mode)?;
        let (graph_batch, encoder_cache, graph_out) = if self.config.mode.uses_graph() {
            let gb = GraphBatch::union(input.graphs)?;
            let (out, cache) = self.encoder.forward(&gb)?;
            (Some(gb), Some(cache), Some(out))
        } else {
            (None, None, None)
        };
        let fusion_input = self
            .fusion
            .assemble(input.visual, graph_out.as_ref().map(|g| g.view()))?;
        let fused = self.fusion.forward(fusion_input.view());
        Ok(Forward {
            graph_batch,
            encoder_cache,
            fusion_input,
            fused,
        })
    }

    /// Pre-batch-norm fused features.
    pub fn fused_features(&self, input: &BatchInput<'_>) -> Result<Array2<f64>, ModelError> {
        Ok(self.forward(input)?.fused)
    }

    /// Unit-length retrieval embeddings (eval-mode batch norm).
    pub fn embed(&self, input: &BatchInput<'_>) -> Result<Array2<f64>, ModelError> {
        let fused = self.fused_features(input)?;
        Ok(fusion::retrieval_embedding(&self.head, fused.view())?)
    }

    /// Loss values and gradients of every parameter for one batch; does not
    /// modify the model.
    pub fn gradients(
        &self,
        input: &BatchInput<'_>,
        labels: &[usize],
        cfg: &LossConfig,
    ) -> Result<StepGradients, ModelError> {
        let fwd = self.forward(input)?;
        let head_out = self.head.forward(fwd.fused.view(), HeadMode::Train)?;
        let logits = head_out.logits.as_ref().expect("training mode");

        let trip = losses::triplet_batch_hard(fwd.fused.view(), labels, cfg.margin)?;
        let center = losses::center_loss(fwd.fused.view(), labels, self.centers.view())?;
        let id = losses::id_loss(logits.view(), labels, cfg.smoothing)?;
        let parts = LossParts {
            triplet: trip.value,
            center: center.value,
            id: id.value,
        };

        let mut grads = self.zeros_like();
        let mut d_fused = self.head.backward(&head_out, id.grad.view(), &mut grads.head);
        d_fused += &trip.grad;
        d_fused.scaled_add(cfg.lambda_center, &center.grad_features);
        if let Some(d_graph) = self
            .fusion
            .backward(fwd.fusion_input.view(), d_fused.view(), &mut grads.fusion)
        {
            let gb = fwd.graph_batch.as_ref().expect("graph branch active");
            let cache = fwd.encoder_cache.as_ref().expect("graph branch active");
            self.encoder.backward(gb, cache, d_graph.view(), &mut grads.encoder);
        }
        // Center gradient of the unweighted center loss.
        grads.centers = center.grad_centers;
        Ok(StepGradients {
            grads,
            losses: StepLosses {
                parts,
                total: parts.total(cfg.lambda_center),
            },
            batch_stats: head_out.stats.expect("training mode"),
        })
    }

    /// One optimization step: Adam on the network, SGD on the centers,
    /// running-statistics update.
    pub fn train_step(
        &mut self,
        adam: &mut Adam,
        input: &BatchInput<'_>,
        labels: &[usize],
        cfg: &LossConfig,
        lr: f64,
        center_lr: f64,
    ) -> Result<StepLosses, ModelError> {
        let step = self.gradients(input, labels, cfg)?;
        adam.update(self, &step.grads, lr);
        self.centers.scaled_add(-center_lr, &step.grads.centers);
        self.head.update_running(&step.batch_stats);
        Ok(step.losses)
    }

    pub fn tensor_manifest(&self) -> Vec<TensorInfo> {
        self.tensors()
            .into_iter()
            .map(|t| TensorInfo {
                name: t.name,
                role: t.role,
                shape: t.shape,
            })
            .collect()
    }
}

impl Params for Model {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut v = self.encoder.tensors();
        v.extend(self.fusion.tensors());
        v.extend(self.head.tensors());
        v.push(crate::nn::t2("centers".into(), Role::Buffer, &self.centers));
        v
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut v = self.encoder.tensors_mut();
        v.extend(self.fusion.tensors_mut());
        v.extend(self.head.tensors_mut());
        v.push(crate::nn::m2("centers".into(), Role::Buffer, &mut self.centers));
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub role: Role,
    pub shape: Vec<usize>,
}

pub const PARAMS_FILE: &str = "params.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything recorded next to the parameter archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub epoch: usize,
    pub step: u64,
    pub seed: u64,
    /// Sampler stream position, in 32-bit words, to resume the batch stream.
    pub rng_word_pos: u128,
    pub model: ModelConfig,
    pub negative_slope: f64,
    pub tensors: Vec<TensorInfo>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub adam_step: u64,
    /// Raw dataset identity of each dense class index.
    pub class_ids: Vec<i64>,
    /// Free-form provenance (visual adapter name, dataset, and so on).
    #[serde(default)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

fn write_f64s(path: &Path, chunks: impl Iterator<Item = f64>) -> std::io::Result<()> {
    let bytes: Vec<u8> = chunks.flat_map(f64::to_le_bytes).collect();
    std::fs::write(path, bytes)
}

fn read_f64s(path: &Path) -> Result<Vec<f64>, ModelError> {
    let bytes = std::fs::read(path).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
    if bytes.len() % 8 != 0 {
        return Err(ModelError::Checkpoint(format!("{}: truncated archive", path.display())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Writes `params.bin`, `optimizer.bin` and `manifest.json` into `dir`.
pub fn save_checkpoint(dir: &Path, model: &Model, adam: &Adam, manifest: &CheckpointManifest) -> Result<(), ModelError> {
    let io = |e: std::io::Error| ModelError::Checkpoint(format!("{}: {e}", dir.display()));
    std::fs::create_dir_all(dir).map_err(io)?;
    write_f64s(
        &dir.join(PARAMS_FILE),
        model.tensors().iter().flat_map(|t| t.data.iter().copied()).collect::<Vec<_>>().into_iter(),
    )
    .map_err(io)?;
    write_f64s(
        &dir.join(OPTIMIZER_FILE),
        adam.first_moment
            .iter()
            .chain(adam.second_moment.iter())
            .flat_map(|v| v.iter().copied())
            .collect::<Vec<_>>()
            .into_iter(),
    )
    .map_err(io)?;
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(dir.join(MANIFEST_FILE), text).map_err(io)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest, ModelError> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))
}

/// Restores model and optimizer from a checkpoint directory.
pub fn load_checkpoint(dir: &Path) -> Result<(Model, Adam, CheckpointManifest), ModelError> {
    let manifest = read_manifest(dir)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut model = Model::init(&mut rng, manifest.model);
    model.encoder.layer1.negative_slope = manifest.negative_slope;
    model.encoder.layer2.negative_slope = manifest.negative_slope;
    if model.tensor_manifest() != manifest.tensors {
        return Err(ModelError::Checkpoint("tensor layout does not match the model geometry".into()));
    }
    let values = read_f64s(&dir.join(PARAMS_FILE))?;
    let expected: usize = model.tensors().iter().map(|t| t.data.len()).sum();
    if values.len() != expected {
        return Err(ModelError::Checkpoint(format!("archive holds {} values, model needs {expected}", values.len())));
    }
    let mut offset = 0;
    for t in model.tensors_mut() {
        let n = t.data.len();
        t.data.copy_from_slice(&values[offset..offset + n]);
        offset += n;
    }

    let mut adam = Adam {
        beta1: manifest.adam_beta1,
        beta2: manifest.adam_beta2,
        eps: manifest.adam_eps,
        step: manifest.adam_step,
        first_moment: Vec::new(),
        second_moment: Vec::new(),
    };
    let moments = read_f64s(&dir.join(OPTIMIZER_FILE))?;
    if !moments.is_empty() {
        let sizes: Vec<usize> = model
            .tensors()
            .iter()
            .filter(|t| t.role == Role::Trainable)
            .map(|t| t.data.len())
            .collect();
        let total: usize = sizes.iter().sum();
        if moments.len() != 2 * total {
            return Err(ModelError::Checkpoint("optimizer state does not match the model".into()));
        }
        let mut offset = 0;
        for target in [&mut adam.first_moment, &mut adam.second_moment] {
            for &n in &sizes {
                target.push(moments[offset..offset + n].to_vec());
                offset += n;
            }
        }
    }
    Ok((model, adam, manifest))
}

/// Splits a long list of samples into evaluation chunks.
pub fn chunked_embed<'a>(
    model: &Model,
    visual: Option<ArrayView2<'a, f64>>,
    graphs: &'a [&'a NumericGraph],
    chunk: usize,
) -> Result<Array2<f64>, ModelError> {
    let n = visual.map(|v| v.nrows()).unwrap_or(graphs.len());
    let mut out = Array2::zeros((n, model.config.embed_dim));
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let input = BatchInput {
            visual: visual.map(|v| v.slice_move(ndarray::s![start..end, ..])),
            graphs: if model.config.mode.uses_graph() { &graphs[start..end] } else { &[] },
            batch_size: end - start,
        };
        let e = model.embed(&input)?;
        out.slice_mut(ndarray::s![start..end, ..]).assign(&e);
        start = end;
    }
    Ok(out)
}
