//! Linear fusion of visual and graph features, and the batch-norm
//! classification head used for the identity loss.

use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{self, Params, Role, TensorMut, TensorRef};

pub const EMBED_DIM: usize = 128;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FusionError {
    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("batch statistics need at least two samples, got {0}")]
    BatchTooSmall(usize),
}

fn check(what: &'static str, expected: usize, got: usize) -> Result<(), FusionError> {
    if expected == got {
        Ok(())
    } else {
        Err(FusionError::ShapeMismatch { what, expected, got })
    }
}

/// Which inputs reach the fusion layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BranchMode {
    #[default]
    Joint,
    VisualOnly,
    GraphOnly,
}

impl BranchMode {
    pub fn uses_visual(self) -> bool {
        self != BranchMode::GraphOnly
    }

    pub fn uses_graph(self) -> bool {
        self != BranchMode::VisualOnly
    }
}

impl std::str::FromStr for BranchMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "joint" => Ok(Self::Joint),
            "visual-only" | "visual" => Ok(Self::VisualOnly),
            "graph-only" | "graph" => Ok(Self::GraphOnly),
            other => Err(format!("unknown branch mode {other:?}")),
        }
    }
}

impl std::fmt::Display for BranchMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Joint => "joint",
            Self::VisualOnly => "visual-only",
            Self::GraphOnly => "graph-only",
        })
    }
}

/// `f = W [v; g] + b`, or a single-branch map in the ablation modes.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub mode: BranchMode,
    pub visual_dim: usize,
    pub graph_dim: usize,
}

impl FusionParams {
    pub fn input_dim(mode: BranchMode, visual_dim: usize, graph_dim: usize) -> usize {
        match mode {
            BranchMode::Joint => visual_dim + graph_dim,
            BranchMode::VisualOnly => visual_dim,
            BranchMode::GraphOnly => graph_dim,
        }
    }

    pub fn init<R: Rng>(rng: &mut R, mode: BranchMode, visual_dim: usize, graph_dim: usize, out_dim: usize) -> Self {
        let input = Self::input_dim(mode, visual_dim, graph_dim);
        Self {
            w: nn::fan_in_uniform(rng, out_dim, input, input),
            b: Array1::zeros(out_dim),
            mode,
            visual_dim,
            graph_dim,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.len()),
            ..self.clone()
        }
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    /// Builds the `B × input_dim` matrix the linear map reads.
    pub fn assemble(
        &self,
        visual: Option<ArrayView2<'_, f64>>,
        graph: Option<ArrayView2<'_, f64>>,
    ) -> Result<Array2<f64>, FusionError> {
        check("fusion rows", self.out_dim(), self.b.len())?;
        check(
            "fusion input",
            Self::input_dim(self.mode, self.visual_dim, self.graph_dim),
            self.w.ncols(),
        )?;
        let missing = |what| FusionError::ShapeMismatch { what, expected: 1, got: 0 };
        let v = if self.mode.uses_visual() {
            let v = visual.ok_or(missing("visual input"))?;
            check("visual dim", self.visual_dim, v.ncols())?;
            Some(v)
        } else {
            None
        };
        let g = if self.mode.uses_graph() {
            let g = graph.ok_or(missing("graph input"))?;
            check("graph dim", self.graph_dim, g.ncols())?;
            Some(g)
        } else {
            None
        };
        Ok(match (v, g) {
            (Some(v), Some(g)) => {
                check("batch rows", v.nrows(), g.nrows())?;
                concatenate(Axis(1), &[v, g]).expect("row counts checked")
            }
            (Some(v), None) => v.to_owned(),
            (None, Some(g)) => g.to_owned(),
            (None, None) => unreachable!("every mode uses a branch"),
        })
    }

    /// Batched forward on an assembled input.
    pub fn forward(&self, input: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = input.dot(&self.w.t());
        out += &self.b;
        out
    }

    /// Accumulates parameter gradients and returns the gradient with respect
    /// to the graph block of the input, when the graph branch is active.
    pub fn backward(
        &self,
        input: ArrayView2<'_, f64>,
        grad_out: ArrayView2<'_, f64>,
        grads: &mut FusionParams,
    ) -> Option<Array2<f64>> {
        general_mat_mul(1.0, &grad_out.t(), &input, 1.0, &mut grads.w);
        grads.b += &grad_out.sum_axis(Axis(0));
        if !self.mode.uses_graph() {
            return None;
        }
        let offset = if self.mode.uses_visual() { self.visual_dim } else { 0 };
        let w_graph = self.w.slice(s![.., offset..offset + self.graph_dim]);
        Some(grad_out.dot(&w_graph))
    }
}

impl Params for FusionParams {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        vec![
            nn::t2("fusion.w".into(), Role::Trainable, &self.w),
            nn::t1("fusion.b".into(), Role::Trainable, &self.b),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        vec![
            nn::m2("fusion.w".into(), Role::Trainable, &mut self.w),
            nn::m1("fusion.b".into(), Role::Trainable, &mut self.b),
        ]
    }
}

/// Fuses one visual vector with one graph vector.
pub fn fuse(
    visual: ArrayView1<'_, f64>,
    graph: ArrayView1<'_, f64>,
    p: &FusionParams,
) -> Result<Array1<f64>, FusionError> {
    let v = visual.insert_axis(Axis(0));
    let g = graph.insert_axis(Axis(0));
    let input = p.assemble(Some(v), Some(g))?;
    Ok(p.forward(input.view()).row(0).to_owned())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    Train,
    Eval,
}

/// Batch norm followed by a bias-free identity classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub bn_gain: Array1<f64>,
    pub bn_bias: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    /// `P × dim`.
    pub w_cls: Array2<f64>,
}

/// Values the batch-norm backward pass and running-stat update need.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Array1<f64>,
    /// Biased variance, used for normalization.
    pub var: Array1<f64>,
    pub x_hat: Array2<f64>,
    pub batch_size: usize,
}

#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub bn_feature: Array2<f64>,
    /// Present only in training mode.
    pub logits: Option<Array2<f64>>,
    pub stats: Option<BatchStats>,
}

impl HeadParams {
    pub fn init<R: Rng>(rng: &mut R, dim: usize, num_classes: usize) -> Self {
        Self {
            bn_gain: Array1::ones(dim),
            bn_bias: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
            w_cls: nn::fan_in_uniform(rng, num_classes, dim, dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            bn_gain: Array1::zeros(self.bn_gain.len()),
            bn_bias: Array1::zeros(self.bn_bias.len()),
            running_mean: Array1::zeros(self.running_mean.len()),
            running_var: Array1::zeros(self.running_var.len()),
            w_cls: Array2::zeros(self.w_cls.raw_dim()),
        }
    }

    pub fn dim(&self) -> usize {
        self.bn_gain.len()
    }

    pub fn num_classes(&self) -> usize {
        self.w_cls.nrows()
    }

    pub fn forward(&self, f: ArrayView2<'_, f64>, mode: HeadMode) -> Result<HeadOutput, FusionError> {
        check("head input dim", self.dim(), f.ncols())?;
        check("classifier input dim", self.dim(), self.w_cls.ncols())?;
        match mode {
            HeadMode::Eval => {
                let inv = self.running_var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                let mut bn = &f - &self.running_mean;
                bn *= &(&inv * &self.bn_gain);
                bn += &self.bn_bias;
                Ok(HeadOutput {
                    bn_feature: bn,
                    logits: None,
                    stats: None,
                })
            }
            HeadMode::Train => {
                let b = f.nrows();
                if b < 2 {
                    return Err(FusionError::BatchTooSmall(b));
                }
                let mean = f.mean_axis(Axis(0)).expect("non-empty batch");
                let centered = &f - &mean;
                let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).expect("non-empty batch");
                let inv = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                let x_hat = &centered * &inv;
                let bn = &x_hat * &self.bn_gain + &self.bn_bias;
                let logits = bn.dot(&self.w_cls.t());
                Ok(HeadOutput {
                    bn_feature: bn,
                    logits: Some(logits),
                    stats: Some(BatchStats {
                        mean,
                        var,
                        x_hat,
                        batch_size: b,
                    }),
                })
            }
        }
    }

    /// Folds batch statistics into the running estimates (unbiased variance).
    pub fn update_running(&mut self, stats: &BatchStats) {
        let n = stats.batch_size as f64;
        let unbiased = &stats.var * (n / (n - 1.0));
        self.running_mean = &self.running_mean * (1.0 - BN_MOMENTUM) + &stats.mean * BN_MOMENTUM;
        self.running_var = &self.running_var * (1.0 - BN_MOMENTUM) + unbiased * BN_MOMENTUM;
    }

    /// Backward through the classifier and training-mode batch norm.
    /// Returns the gradient with respect to the head input.
    pub fn backward(
        &self,
        out: &HeadOutput,
        grad_logits: ArrayView2<'_, f64>,
        grads: &mut HeadParams,
    ) -> Array2<f64> {
        let stats = out.stats.as_ref().expect("training-mode output");
        general_mat_mul(1.0, &grad_logits.t(), &out.bn_feature, 1.0, &mut grads.w_cls);
        let d_bn = grad_logits.dot(&self.w_cls);
        grads.bn_gain += &(&d_bn * &stats.x_hat).sum_axis(Axis(0));
        grads.bn_bias += &d_bn.sum_axis(Axis(0));
        let d_xhat = &d_bn * &self.bn_gain;
        let mean_d = d_xhat.mean_axis(Axis(0)).expect("non-empty batch");
        let mean_dx = (&d_xhat * &stats.x_hat).mean_axis(Axis(0)).expect("non-empty batch");
        let inv = stats.var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        (d_xhat - &mean_d - &stats.x_hat * &mean_dx) * &inv
    }
}

impl Params for HeadParams {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        vec![
            nn::t1("head.bn_gain".into(), Role::Trainable, &self.bn_gain),
            nn::t1("head.bn_bias".into(), Role::Trainable, &self.bn_bias),
            nn::t2("head.w_cls".into(), Role::Trainable, &self.w_cls),
            nn::t1("head.running_mean".into(), Role::Buffer, &self.running_mean),
            nn::t1("head.running_var".into(), Role::Buffer, &self.running_var),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        vec![
            nn::m1("head.bn_gain".into(), Role::Trainable, &mut self.bn_gain),
            nn::m1("head.bn_bias".into(), Role::Trainable, &mut self.bn_bias),
            nn::m2("head.w_cls".into(), Role::Trainable, &mut self.w_cls),
            nn::m1("head.running_mean".into(), Role::Buffer, &mut self.running_mean),
            nn::m1("head.running_var".into(), Role::Buffer, &mut self.running_var),
        ]
    }
}

/// Row-wise L2 normalization; zero rows stay zero.
pub fn l2_normalize_rows(mut x: Array2<f64>) -> Array2<f64> {
    for mut row in x.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
    }
    x
}

/// Retrieval embeddings: eval-mode batch norm, then unit length.
pub fn retrieval_embedding(head: &HeadParams, fused: ArrayView2<'_, f64>) -> Result<Array2<f64>, FusionError> {
    let out = head.forward(fused, HeadMode::Eval)?;
    Ok(l2_normalize_rows(out.bn_feature))
}
