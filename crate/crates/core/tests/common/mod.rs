#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sgreid_core::textembed::NumericGraph;

/// Central differences of `f` at `x`.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let fp = f(&probe);
            probe[i] = orig - h;
            let fm = f(&probe);
            probe[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖, 1e-10)`. The floor keeps gradients that are
/// zero up to rounding from reading as a total mismatch.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-10)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

pub fn random_vector(rng: &mut ChaCha8Rng, len: usize) -> Array1<f64> {
    Array1::from_shape_fn(len, |_| rng.gen_range(-1.0..1.0))
}

/// Random connected-ish directed graph rooted at node 0.
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, extra_edges: usize, dim: usize) -> NumericGraph {
    let mut edges = Vec::new();
    for v in 1..n {
        edges.push((v, rng.gen_range(0..v)));
    }
    for _ in 0..extra_edges {
        let s = rng.gen_range(0..n);
        let d = rng.gen_range(0..n);
        if s != d {
            edges.push((s, d));
        }
    }
    NumericGraph {
        node_features: random_matrix(rng, n, dim),
        edge_features: random_matrix(rng, edges.len(), dim),
        edge_index: edges,
        person_node_index: 0,
        source_image_id: "img".into(),
    }
}

/// Labels with `k` copies of each of `p` classes, shuffled.
pub fn pk_labels(rng: &mut ChaCha8Rng, p: usize, k: usize) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..p).flat_map(|c| std::iter::repeat(c).take(k)).collect();
    for i in (1..labels.len()).rev() {
        labels.swap(i, rng.gen_range(0..=i));
    }
    labels
}

pub mod oracles;
pub mod corpus;
