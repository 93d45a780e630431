//! Training objective: batch-hard triplet, center and label-smoothed
//! identity losses, each returned with its analytic gradient.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Squared distances below this are clamped before the square root.
pub const DIST_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LossError {
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub margin: f64,
    pub lambda_center: f64,
    pub smoothing: f64,
    pub num_classes: usize,
}

impl LossConfig {
    pub fn new(num_classes: usize) -> Self {
        Self {
            margin: 0.3,
            lambda_center: 0.0005,
            smoothing: 0.1,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.margin >= 0.0) {
            return Err(LossError::InvalidConfig(format!("margin {} < 0", self.margin)));
        }
        if !(self.lambda_center >= 0.0) {
            return Err(LossError::InvalidConfig(format!("center weight {} < 0", self.lambda_center)));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(LossError::InvalidConfig(format!("smoothing {} outside [0, 1)", self.smoothing)));
        }
        if self.num_classes < 2 {
            return Err(LossError::InvalidConfig("need at least two classes".into()));
        }
        Ok(())
    }
}

/// A scalar loss and its gradient with respect to the main input.
#[derive(Debug, Clone)]
pub struct LossWithGrad {
    pub value: f64,
    pub grad: Array2<f64>,
}

fn check_rows(x: &ArrayView2<'_, f64>, labels: &[usize]) -> Result<(), LossError> {
    if x.nrows() != labels.len() {
        return Err(LossError::Shape(format!("{} rows but {} labels", x.nrows(), labels.len())));
    }
    Ok(())
}

/// Hardest positive and hardest negative per anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HardPair {
    pub positive: usize,
    pub negative: usize,
    pub d_pos: f64,
    pub d_neg: f64,
}

/// Euclidean distance with the square clamped at [`DIST_FLOOR`].
pub fn clamped_distance(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    let d2: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    d2.max(DIST_FLOOR).sqrt()
}

/// Mines the hardest pair for every anchor. Ties go to the lowest index.
pub fn mine_hard_pairs(features: ArrayView2<'_, f64>, labels: &[usize]) -> Result<Vec<HardPair>, LossError> {
    check_rows(&features, labels)?;
    let b = labels.len();
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    if counts.len() < 2 {
        return Err(LossError::DegenerateBatch("batch holds a single identity".into()));
    }
    if let Some((l, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(LossError::DegenerateBatch(format!("identity {l} appears once")));
    }
    let mut dist = Array2::zeros((b, b));
    for i in 0..b {
        for j in i + 1..b {
            let d = clamped_distance(features.row(i), features.row(j));
            dist[[i, j]] = d;
            dist[[j, i]] = d;
        }
    }
    Ok((0..b)
        .map(|i| {
            let mut pos = (usize::MAX, f64::NEG_INFINITY);
            let mut neg = (usize::MAX, f64::INFINITY);
            for j in 0..b {
                if j == i {
                    continue;
                }
                let d = dist[[i, j]];
                if labels[j] == labels[i] {
                    if d > pos.1 {
                        pos = (j, d);
                    }
                } else if d < neg.1 {
                    neg = (j, d);
                }
            }
            HardPair {
                positive: pos.0,
                negative: neg.0,
                d_pos: pos.1,
                d_neg: neg.1,
            }
        })
        .collect())
}

fn add_distance_grad(grad: &mut Array2<f64>, f: &ArrayView2<'_, f64>, i: usize, j: usize, d: f64, scale: f64) {
    let d2: f64 = (0..f.ncols()).map(|k| (f[[i, k]] - f[[j, k]]).powi(2)).sum();
    if d2 <= DIST_FLOOR {
        return;
    }
    for k in 0..f.ncols() {
        let g = scale * (f[[i, k]] - f[[j, k]]) / d;
        grad[[i, k]] += g;
        grad[[j, k]] -= g;
    }
}

/// Mean over anchors of `max(0, m + d(a, p*) - d(a, n*))`.
pub fn triplet_batch_hard(features: ArrayView2<'_, f64>, labels: &[usize], margin: f64) -> Result<LossWithGrad, LossError> {
    let pairs = mine_hard_pairs(features, labels)?;
    let b = labels.len() as f64;
    let mut grad = Array2::zeros(features.raw_dim());
    let mut total = 0.0;
    for (i, p) in pairs.iter().enumerate() {
        let hinge = margin + p.d_pos - p.d_neg;
        if hinge > 0.0 {
            total += hinge;
            add_distance_grad(&mut grad, &features, i, p.positive, p.d_pos, 1.0 / b);
            add_distance_grad(&mut grad, &features, i, p.negative, p.d_neg, -1.0 / b);
        }
    }
    Ok(LossWithGrad { value: total / b, grad })
}

/// Center loss value with gradients for features and centers.
#[derive(Debug, Clone)]
pub struct CenterLoss {
    pub value: f64,
    pub grad_features: Array2<f64>,
    pub grad_centers: Array2<f64>,
}

/// `½ Σ ‖f_i − c_{y_i}‖² / B`.
pub fn center_loss(features: ArrayView2<'_, f64>, labels: &[usize], centers: ArrayView2<'_, f64>) -> Result<CenterLoss, LossError> {
    check_rows(&features, labels)?;
    if features.ncols() != centers.ncols() {
        return Err(LossError::Shape(format!(
            "feature dim {} vs center dim {}",
            features.ncols(),
            centers.ncols()
        )));
    }
    let b = labels.len().max(1) as f64;
    let mut grad_features = Array2::zeros(features.raw_dim());
    let mut grad_centers = Array2::zeros(centers.raw_dim());
    let mut value = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= centers.nrows() {
            return Err(LossError::LabelOutOfRange { label: y, classes: centers.nrows() });
        }
        let diff = &features.row(i) - &centers.row(y);
        value += 0.5 * diff.dot(&diff);
        grad_features.row_mut(i).scaled_add(1.0 / b, &diff);
        grad_centers.row_mut(y).scaled_add(-1.0 / b, &diff);
    }
    Ok(CenterLoss {
        value: value / b,
        grad_features,
        grad_centers,
    })
}

/// Smoothed target: `1 − ε` on the true class, `ε / (P − 1)` elsewhere.
pub fn smoothed_target(label: usize, num_classes: usize, smoothing: f64) -> Array1<f64> {
    let mut q = Array1::from_elem(num_classes, smoothing / (num_classes - 1) as f64);
    q[label] = 1.0 - smoothing;
    q
}

fn log_softmax(row: ndarray::ArrayView1<'_, f64>) -> Array1<f64> {
    let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row.mapv(|v| v - lse)
}

/// Mean cross-entropy of `softmax(logits)` against smoothed targets.
pub fn id_loss(logits: ArrayView2<'_, f64>, labels: &[usize], smoothing: f64) -> Result<LossWithGrad, LossError> {
    check_rows(&logits, labels)?;
    let p = logits.ncols();
    if p < 2 {
        return Err(LossError::Shape("need at least two classes".into()));
    }
    let b = labels.len().max(1) as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut value = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= p {
            return Err(LossError::LabelOutOfRange { label: y, classes: p });
        }
        let q = smoothed_target(y, p, smoothing);
        let lp = log_softmax(logits.row(i));
        value -= q.dot(&lp);
        let probs = lp.mapv(f64::exp);
        grad.row_mut(i).assign(&((probs - q) / b));
    }
    Ok(LossWithGrad { value: value / b, grad })
}

/// Per-component loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub triplet: f64,
    pub center: f64,
    pub id: f64,
}

impl LossParts {
    /// `triplet + λ · center + id`.
    pub fn total(&self, lambda_center: f64) -> f64 {
        combined_loss(*self, lambda_center)
    }
}

pub fn combined_loss(parts: LossParts, lambda_center: f64) -> f64 {
    parts.triplet + lambda_center * parts.center + parts.id
}

/// Entropy of the smoothed target, the lower bound of [`id_loss`].
pub fn smoothed_target_entropy(num_classes: usize, smoothing: f64) -> f64 {
    let q = smoothed_target(0, num_classes, smoothing);
    -q.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}
