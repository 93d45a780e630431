mod common;

use common::{numeric_gradient, pk_labels, random_matrix, relative_error};
use ndarray::{Array2, ArrayView2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgreid_core::losses::{
    center_loss, combined_loss, id_loss, smoothed_target_entropy, triplet_batch_hard, LossParts,
};

fn as_matrix(x: &[f64], rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), x.to_vec()).unwrap()
}

/// Batch-hard loss restated as a maximum over every valid (positive,
/// negative) pair of each anchor.
fn triplet_oracle(f: ArrayView2<'_, f64>, labels: &[usize], margin: f64) -> f64 {
    let b = labels.len();
    let dist = |i: usize, j: usize| -> f64 {
        let d2: f64 = (0..f.ncols()).map(|k| (f[[i, k]] - f[[j, k]]).powi(2)).sum();
        d2.max(1e-12).sqrt()
    };
    let mut total = 0.0;
    for a in 0..b {
        let mut worst = f64::NEG_INFINITY;
        for p in 0..b {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for n in 0..b {
                if labels[n] == labels[a] {
                    continue;
                }
                worst = worst.max(margin + dist(a, p) - dist(a, n));
            }
        }
        total += worst.max(0.0);
    }
    total / b as f64
}

#[test]
fn triplet_matches_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let labels = pk_labels(&mut rng, 4, 2);
        let f = random_matrix(&mut rng, 8, 128) * 0.1;
        let got = triplet_batch_hard(f.view(), &labels, 0.3).unwrap().value;
        let want = triplet_oracle(f.view(), &labels, 0.3);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn center_loss_matches_naive_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let f = random_matrix(&mut rng, 10, 16);
    let c = random_matrix(&mut rng, 5, 16);
    let labels: Vec<usize> = (0..10).map(|_| rng.gen_range(0..5)).collect();
    let mut want = 0.0;
    for i in 0..10 {
        for k in 0..16 {
            want += 0.5 * (f[[i, k]] - c[[labels[i], k]]).powi(2);
        }
    }
    want /= 10.0;
    let got = center_loss(f.view(), &labels, c.view()).unwrap().value;
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn id_loss_matches_direct_formula_with_many_classes() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let p = 751;
    let logits = random_matrix(&mut rng, 4, p) * 3.0;
    let labels = vec![0, 17, 750, 400];
    let eps = 0.1;
    let mut want = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let z: f64 = (0..p).map(|k| logits[[i, k]].exp()).sum();
        for k in 0..p {
            let q = if k == y { 1.0 - eps } else { eps / (p - 1) as f64 };
            want -= q * (logits[[i, k]].exp() / z).ln();
        }
    }
    want /= 4.0;
    let got = id_loss(logits.view(), &labels, eps).unwrap().value;
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let (b, d, p) = (8, 6, 4);
    for _ in 0..20 {
        let labels = pk_labels(&mut rng, p, 2);
        let f = random_matrix(&mut rng, b, d);
        let centers = random_matrix(&mut rng, p, d);
        let logits = random_matrix(&mut rng, b, p) * 2.0;
        let flat = f.as_slice().unwrap();

        let trip = triplet_batch_hard(f.view(), &labels, 0.3).unwrap();
        let num = numeric_gradient(flat, 1e-6, |x| {
            triplet_batch_hard(as_matrix(x, b, d).view(), &labels, 0.3).unwrap().value
        });
        assert!(relative_error(trip.grad.as_slice().unwrap(), &num) < 1e-4);

        let cl = center_loss(f.view(), &labels, centers.view()).unwrap();
        let num = numeric_gradient(flat, 1e-6, |x| {
            center_loss(as_matrix(x, b, d).view(), &labels, centers.view()).unwrap().value
        });
        assert!(relative_error(cl.grad_features.as_slice().unwrap(), &num) < 1e-4);
        let num = numeric_gradient(centers.as_slice().unwrap(), 1e-6, |x| {
            center_loss(f.view(), &labels, as_matrix(x, p, d).view()).unwrap().value
        });
        assert!(relative_error(cl.grad_centers.as_slice().unwrap(), &num) < 1e-4);

        let id = id_loss(logits.view(), &labels, 0.1).unwrap();
        let num = numeric_gradient(logits.as_slice().unwrap(), 1e-6, |x| {
            id_loss(as_matrix(x, b, p).view(), &labels, 0.1).unwrap().value
        });
        assert!(relative_error(id.grad.as_slice().unwrap(), &num) < 1e-4);
    }
}

#[test]
fn combined_gradient_is_sum_of_parts() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let (b, d, p) = (8, 5, 4);
    let labels = pk_labels(&mut rng, p, 2);
    let f = random_matrix(&mut rng, b, d);
    let centers = random_matrix(&mut rng, p, d);
    let lambda = 0.0005;
    let total = |x: &[f64]| {
        let f = as_matrix(x, b, d);
        let parts = LossParts {
            triplet: triplet_batch_hard(f.view(), &labels, 0.3).unwrap().value,
            center: center_loss(f.view(), &labels, centers.view()).unwrap().value,
            id: 0.0,
        };
        combined_loss(parts, lambda)
    };
    let analytic = triplet_batch_hard(f.view(), &labels, 0.3).unwrap().grad
        + center_loss(f.view(), &labels, centers.view()).unwrap().grad_features * lambda;
    let num = numeric_gradient(f.as_slice().unwrap(), 1e-6, total);
    assert!(relative_error(analytic.as_slice().unwrap(), &num) < 1e-4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn triplet_is_translation_invariant(seed in any::<u64>(), shift in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = pk_labels(&mut rng, 3, 3);
        let f = random_matrix(&mut rng, 9, 8);
        let offset = common::random_vector(&mut rng, 8) * shift;
        let moved = &f + &offset;
        let a = triplet_batch_hard(f.view(), &labels, 0.3).unwrap().value;
        let b = triplet_batch_hard(moved.view(), &labels, 0.3).unwrap().value;
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn center_loss_vanishes_only_at_centers(seed in any::<u64>(), bump in 1e-3f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = random_matrix(&mut rng, 3, 4);
        let labels: Vec<usize> = (0..6).map(|i| i % 3).collect();
        let mut f = Array2::from_shape_fn((6, 4), |(i, k)| centers[[labels[i], k]]);
        prop_assert_eq!(center_loss(f.view(), &labels, centers.view()).unwrap().value, 0.0);
        let i = rng.gen_range(0..6);
        let k = rng.gen_range(0..4);
        f[[i, k]] += bump;
        prop_assert!(center_loss(f.view(), &labels, centers.view()).unwrap().value > 0.0);
    }

    #[test]
    fn id_loss_is_bounded_by_target_entropy(seed in any::<u64>(), eps in 0.0f64..0.9, p in 2usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random_matrix(&mut rng, 5, p) * 4.0;
        let labels: Vec<usize> = (0..5).map(|_| rng.gen_range(0..p)).collect();
        let l = id_loss(logits.view(), &labels, eps).unwrap().value;
        prop_assert!(l >= smoothed_target_entropy(p, eps) - 1e-12);
    }
}
