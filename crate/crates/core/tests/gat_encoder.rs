use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgreid_core::gat::{GatLayer, GraphBatch, GraphEncoder};
use sgreid_core::nn::{Params, Role};
use sgreid_core::textembed::NumericGraph;

fn random_graph(rng: &mut ChaCha8Rng, n: usize, extra_edges: usize, dim: usize) -> NumericGraph {
    let mut edges = Vec::new();
    // a spanning chain towards node 0 plus random extras
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
        node_features: Array2::from_shape_fn((n, dim), |_| rng.gen_range(-1.0..1.0)),
        edge_features: Array2::from_shape_fn((edges.len(), dim), |_| rng.gen_range(-1.0..1.0)),
        edge_index: edges,
        person_node_index: 0,
        source_image_id: "img".into(),
    }
}

fn weighted_sum(out: &Array2<f64>, w: &Array2<f64>) -> f64 {
    (out * w).sum()
}

/// Compares analytic gradients with central differences on every trainable
/// entry of a small encoder.
#[test]
fn encoder_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let g1 = random_graph(&mut rng, 4, 2, 5);
    let g2 = random_graph(&mut rng, 3, 1, 5);
    let batch = GraphBatch::union(&[&g1, &g2]).unwrap();
    let mut enc = GraphEncoder::init(&mut rng, 5, 6, 4, 5);
    enc.self_loop_fill = Array1::from_shape_fn(5, |_| rng.gen_range(-0.5..0.5));
    enc.ln_gain = Array1::from_shape_fn(4, |_| rng.gen_range(0.5..1.5));
    let w = Array2::from_shape_fn((2, 4), |_| rng.gen_range(-1.0..1.0));

    let (out, cache) = enc.forward(&batch).unwrap();
    let mut grads = enc.zeros_like();
    enc.backward(&batch, &cache, w.view(), &mut grads);
    let _ = out;

    let analytic: Vec<(String, Role, Vec<f64>)> = grads
        .tensors()
        .into_iter()
        .map(|t| (t.name, t.role, t.data.to_vec()))
        .collect();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (ti, (name, role, ga)) in analytic.iter().enumerate() {
        if *role != Role::Trainable {
            continue;
        }
        for j in 0..ga.len() {
            let orig = enc.tensors()[ti].data[j];
            enc.tensors_mut()[ti].data[j] = orig + h;
            let fp = weighted_sum(&enc.forward(&batch).unwrap().0, &w);
            enc.tensors_mut()[ti].data[j] = orig - h;
            let fm = weighted_sum(&enc.forward(&batch).unwrap().0, &w);
            enc.tensors_mut()[ti].data[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let err = (numeric - ga[j]).abs() / (1.0 + numeric.abs());
            assert!(err < 1e-5, "{name}[{j}]: analytic {} numeric {numeric}", ga[j]);
            worst = worst.max(err);
        }
    }
    assert!(worst < 1e-5);
}

#[test]
fn layer_input_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let g = random_graph(&mut rng, 4, 3, 3);
    let batch = GraphBatch::single(&g).unwrap();
    let layer = GatLayer::init(&mut rng, 3, 4, 3);
    let fill = Array1::from_shape_fn(3, |_| rng.gen_range(-0.5..0.5));
    let w = Array2::from_shape_fn((4, 4), |_| rng.gen_range(-1.0..1.0));
    let (_, cache) = layer.forward(&batch, batch.x.view(), fill.view()).unwrap();
    let mut grads = layer.zeros_like();
    let dx = layer
        .backward(&batch, batch.x.view(), fill.view(), &cache, w.view(), &mut grads, true)
        .unwrap();
    let h = 1e-6;
    let mut x = batch.x.clone();
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            let orig = x[[i, j]];
            x[[i, j]] = orig + h;
            let fp = weighted_sum(&layer.forward(&batch, x.view(), fill.view()).unwrap().0, &w);
            x[[i, j]] = orig - h;
            let fm = weighted_sum(&layer.forward(&batch, x.view(), fill.view()).unwrap().0, &w);
            x[[i, j]] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            assert!((numeric - dx[[i, j]]).abs() < 1e-6 * (1.0 + numeric.abs()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attention_sums_to_one_per_node(seed in any::<u64>(), n in 1usize..7, extra in 0usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, n, extra, 4);
        let batch = GraphBatch::single(&g).unwrap();
        let enc = GraphEncoder::init(&mut rng, 4, 5, 3, 4);
        let (a1, a2) = enc.attention_maps(&batch).unwrap();
        for alpha in [&a1, &a2] {
            for edges in &batch.incoming {
                let s: f64 = edges.iter().map(|&k| alpha[k]).sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
                prop_assert!(edges.iter().all(|&k| alpha[k] > 0.0));
            }
        }
    }

    #[test]
    fn encoding_is_invariant_to_node_order(seed in any::<u64>(), n in 1usize..7, extra in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, n, extra, 4);
        let enc = GraphEncoder::init(&mut rng, 4, 5, 3, 4);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let a = sgreid_core::gat::graph_encode(&enc, &g).unwrap();
        let b = sgreid_core::gat::graph_encode(&enc, &g.permuted(&perm)).unwrap();
        for j in 0..a.len() {
            prop_assert!((a[j] - b[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn encoding_is_finite_and_normalized(seed in any::<u64>(), n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, n, 2, 4);
        let enc = GraphEncoder::init(&mut rng, 4, 6, 5, 4);
        let out = sgreid_core::gat::graph_encode(&enc, &g).unwrap();
        prop_assert!(out.iter().all(|v| v.is_finite()));
        // unit gain and zero bias: zero mean output
        prop_assert!(out.sum().abs() < 1e-9);
    }
}
