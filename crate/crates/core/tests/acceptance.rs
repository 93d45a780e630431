//! The acceptance suite: every criterion runs, prints one PASS/FAIL line, and
//! the test fails if any criterion does.

mod common;

use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use common::corpus::{malformed, random_document};
use common::oracles::{attribution_oracle, cmc_map_oracle, rerank_oracle};
use common::{numeric_gradient, pk_labels, random_graph, random_matrix, random_vector, relative_error};
use ndarray::{array, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgreid_core::attribution::gatt_attribute;
use sgreid_core::evalkit::{cmc_map, k_reciprocal_rerank, pairwise_distances, RerankParams};
use sgreid_core::fusion::{fuse, BranchMode, FusionParams};
use sgreid_core::gat::{graph_encode, GatLayer, GraphBatch, GraphEncoder};
use sgreid_core::losses::{center_loss, id_loss, triplet_batch_hard};
use sgreid_core::nn::{Params, Role};
use sgreid_core::pipeline::{
    embed_stage, eval_stage, graphgen_stage, ingest, ingest_stage, synthesize, train_stage, Config, DatasetKind,
    EvalFlags, PipelineError, SynthConfig,
};
use sgreid_core::scenegraph::{fix_malformed_json, parse_scene_graph};
use sgreid_core::textembed::NumericGraph;
use sgreid_core::trainkit::{pk_sample, PkIndex, METRICS_FILE};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

const GRAD_TOL: f64 = 1e-4;

// 1. Attention normalization and a hand-computed coefficient fixture.
fn attention_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(1..=10);
        let extra = rng.gen_range(0..2 * n);
        let g = random_graph(&mut rng, n, extra, 6);
        let enc = GraphEncoder::init(&mut rng, 6, 8, 4, 6);
        let batch = GraphBatch::single(&g).map_err(|e| e.to_string())?;
        let (a1, a2) = enc.attention_maps(&batch).map_err(|e| e.to_string())?;
        for alpha in [&a1, &a2] {
            for edges in &batch.incoming {
                let sum: f64 = edges.iter().map(|&k| alpha[k]).sum();
                worst = worst.max((sum - 1.0).abs());
            }
        }
    }
    ensure(worst <= 1e-6, || format!("incoming attention sum off by {worst:e}"))?;

    // Scalar layer: W_src = W_dst = W_edge = 1, a = 1, slope 0.2.
    // Node 0 receives 1→0 (edge feature 0.5), 2→0 (0.0) and its self-loop
    // (fill 0). With x = [0, 1, −2] the pre-activations are
    // 1 + 0 + 0.5 = 1.5, −2 + 0 + 0 = −2 and 0, so the logits are
    // 1.5, 0.2·(−2) = −0.4 and 0.
    let layer = GatLayer {
        w_src: array![[1.0]],
        w_dst: array![[1.0]],
        w_edge: array![[1.0]],
        att: array![1.0],
        bias: array![0.0],
        negative_slope: 0.2,
    };
    let g = NumericGraph {
        node_features: array![[0.0], [1.0], [-2.0]],
        edge_index: vec![(1, 0), (2, 0)],
        edge_features: array![[0.5], [0.0]],
        person_node_index: 0,
        source_image_id: "fixture".into(),
    };
    let batch = GraphBatch::single(&g).map_err(|e| e.to_string())?;
    let (out, cache) = layer
        .forward(&batch, batch.x.view(), array![0.0].view())
        .map_err(|e| e.to_string())?;
    let z = 1.5f64.exp() + (-0.4f64).exp() + 1.0;
    let want = [1.5f64.exp() / z, (-0.4f64).exp() / z, 1.0 / z];
    // Edge order: real edges, then self-loops of nodes 0, 1, 2.
    let got = [cache.alpha[0], cache.alpha[1], cache.alpha[2]];
    let err = want.iter().zip(&got).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(err <= 1e-6, || format!("fixture attention {got:?} vs {want:?}"))?;
    // Messages are W_src x_j + W_edge e_ij: 1.5, −2 and 0.
    let h0 = want[0] * 1.5 + want[1] * -2.0;
    ensure((out[[0, 0]] - h0).abs() <= 1e-6, || format!("fixture output {} vs {h0}", out[[0, 0]]))?;
    Ok(format!("100 graphs, max |Σα − 1| = {worst:.1e}; fixture error {err:.1e}"))
}

fn weighted(out: &Array2<f64>, w: &Array2<f64>) -> f64 {
    (out * w).sum()
}

fn check_grad(what: &str, analytic: &[f64], numeric: &[f64], worst: &mut f64) -> Result<(), String> {
    let err = relative_error(analytic, numeric);
    *worst = worst.max(err);
    ensure(err < GRAD_TOL, || format!("{what}: relative error {err:e}"))
}

// 2. Central finite differences for the layer, fusion and the three losses.
fn gradient_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.gen_range(2..=6);
        let extra = rng.gen_range(0..4);
        let g = random_graph(&mut rng, n, extra, 4);
        let batch = GraphBatch::single(&g).map_err(|e| e.to_string())?;
        let layer = GatLayer::init(&mut rng, 4, 3, 4);
        let fill = random_vector(&mut rng, 4);
        let w = random_matrix(&mut rng, n, 3);
        let (_, cache) = layer.forward(&batch, batch.x.view(), fill.view()).map_err(|e| e.to_string())?;
        let mut grads = layer.zeros_like();
        let dx = layer
            .backward(&batch, batch.x.view(), fill.view(), &cache, w.view(), &mut grads, true)
            .ok_or("layer returned no input gradient")?;
        let loss = |l: &GatLayer, x: &Array2<f64>| weighted(&l.forward(&batch, x.view(), fill.view()).unwrap().0, &w);
        let num = numeric_gradient(batch.x.as_slice().unwrap(), h, |v| {
            loss(&layer, &Array2::from_shape_vec(batch.x.raw_dim(), v.to_vec()).unwrap())
        });
        check_grad("layer input", dx.as_slice().unwrap(), &num, &mut worst)?;
        let analytic: Vec<(String, Vec<f64>)> = grads
            .tensors()
            .into_iter()
            .filter(|t| t.role == Role::Trainable)
            .map(|t| (t.name, t.data.to_vec()))
            .collect();
        for (ti, (name, a)) in analytic.iter().enumerate() {
            let start = layer.tensors()[ti].data.to_vec();
            let num = numeric_gradient(&start, h, |v| {
                let mut l = layer.clone();
                l.tensors_mut()[ti].data.copy_from_slice(v);
                loss(&l, &batch.x)
            });
            check_grad(name, a, &num, &mut worst)?;
        }
    }

    for _ in 0..20 {
        let mut p = FusionParams::init(&mut rng, BranchMode::Joint, 5, 3, 4);
        p.b = random_vector(&mut rng, 4);
        let v = random_vector(&mut rng, 5);
        let gv = random_vector(&mut rng, 3);
        let w = random_vector(&mut rng, 4);
        let out_of = |p: &FusionParams, gv: &Array1<f64>| fuse(v.view(), gv.view(), p).unwrap().dot(&w);
        let input = p.assemble(Some(v.view().insert_axis(ndarray::Axis(0))), Some(gv.view().insert_axis(ndarray::Axis(0))))
            .map_err(|e| e.to_string())?;
        let mut grads = p.zeros_like();
        let w2 = w.clone().insert_axis(ndarray::Axis(0));
        let dg = p.backward(input.view(), w2.view(), &mut grads).ok_or("fusion returned no graph gradient")?;
        let num = numeric_gradient(gv.as_slice().unwrap(), h, |x| out_of(&p, &Array1::from(x.to_vec())));
        check_grad("fuse graph input", dg.as_slice().unwrap(), &num, &mut worst)?;
        let num = numeric_gradient(p.w.as_slice().unwrap(), h, |x| {
            let mut q = p.clone();
            q.w.as_slice_mut().unwrap().copy_from_slice(x);
            out_of(&q, &gv)
        });
        check_grad("fuse weight", grads.w.as_slice().unwrap(), &num, &mut worst)?;
        let num = numeric_gradient(p.b.as_slice().unwrap(), h, |x| {
            let mut q = p.clone();
            q.b = Array1::from(x.to_vec());
            out_of(&q, &gv)
        });
        check_grad("fuse bias", grads.b.as_slice().unwrap(), &num, &mut worst)?;
    }

    let as_matrix = |x: &[f64], shape: (usize, usize)| Array2::from_shape_vec(shape, x.to_vec()).unwrap();
    for _ in 0..20 {
        let p = rng.gen_range(2..=4);
        let k = rng.gen_range(2..=3);
        let labels = pk_labels(&mut rng, p, k);
        let shape = (labels.len(), 5);
        let f = random_matrix(&mut rng, shape.0, shape.1);

        let trip = triplet_batch_hard(f.view(), &labels, 0.3).map_err(|e| e.to_string())?;
        let num = numeric_gradient(f.as_slice().unwrap(), h, |x| {
            triplet_batch_hard(as_matrix(x, shape).view(), &labels, 0.3).unwrap().value
        });
        check_grad("triplet", trip.grad.as_slice().unwrap(), &num, &mut worst)?;

        let centers = random_matrix(&mut rng, p, 5);
        let c = center_loss(f.view(), &labels, centers.view()).map_err(|e| e.to_string())?;
        let num = numeric_gradient(f.as_slice().unwrap(), h, |x| {
            center_loss(as_matrix(x, shape).view(), &labels, centers.view()).unwrap().value
        });
        check_grad("center features", c.grad_features.as_slice().unwrap(), &num, &mut worst)?;
        let num = numeric_gradient(centers.as_slice().unwrap(), h, |x| {
            center_loss(f.view(), &labels, as_matrix(x, (p, 5)).view()).unwrap().value
        });
        check_grad("center centers", c.grad_centers.as_slice().unwrap(), &num, &mut worst)?;

        let logits = random_matrix(&mut rng, shape.0, p) * 3.0;
        let id = id_loss(logits.view(), &labels, 0.1).map_err(|e| e.to_string())?;
        let num = numeric_gradient(logits.as_slice().unwrap(), h, |x| {
            id_loss(as_matrix(x, (shape.0, p)).view(), &labels, 0.1).unwrap().value
        });
        check_grad("identity", id.grad.as_slice().unwrap(), &num, &mut worst)?;
    }
    Ok(format!("20 instances each of layer, fuse, triplet, center, identity; worst relative error {worst:.1e}"))
}

// 3. CMC and mAP against the brute-force oracle, exact float equality.
fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let (mut same_cam, mut junk) = (0usize, 0usize);
    for i in 0..50 {
        let (nq, ng) = if i == 0 { (50, 200) } else { (rng.gen_range(1..=50), rng.gen_range(1..=200)) };
        let q_ids: Vec<i64> = (0..nq).map(|_| rng.gen_range(1..=8)).collect();
        let g_ids: Vec<i64> = (0..ng).map(|_| rng.gen_range(-1..=8)).collect();
        let q_cams: Vec<i64> = (0..nq).map(|_| rng.gen_range(1..=3)).collect();
        let g_cams: Vec<i64> = (0..ng).map(|_| rng.gen_range(1..=3)).collect();
        let d = Array2::from_shape_fn((nq, ng), |_| rng.gen_range(0..64) as f64 / 16.0);
        junk += g_ids.iter().filter(|&&id| id == -1).count();
        same_cam += (0..nq)
            .flat_map(|q| (0..ng).map(move |g| (q, g)))
            .filter(|&(q, g)| q_ids[q] == g_ids[g] && q_cams[q] == g_cams[g])
            .count();
        let oracle = cmc_map_oracle(d.view(), &q_ids, &g_ids, &q_cams, &g_cams);
        match cmc_map(d.view(), &q_ids, &g_ids, &q_cams, &g_cams) {
            Ok(m) => ensure(
                m.valid_queries == oracle.valid
                    && m.rank1.to_bits() == oracle.rank1.to_bits()
                    && m.rank5.to_bits() == oracle.rank5.to_bits()
                    && m.map.to_bits() == oracle.map.to_bits(),
                || {
                    format!(
                        "instance {i}: R@1 {} / {}, mAP {} / {}",
                        m.rank1, oracle.rank1, m.map, oracle.map
                    )
                },
            )?,
            Err(e) => ensure(oracle.valid == 0, || format!("instance {i}: {e} but oracle has valid queries"))?,
        }
    }
    ensure(same_cam > 0 && junk > 0, || "corpus lacks same-camera or junk cases".into())?;
    Ok(format!("50 instances, {same_cam} same-camera matches and {junk} junk items excluded"))
}

// 4. Re-ranking identity at λ = 1 and the six-point toy.
fn reranking() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    for i in 0..20 {
        let (nq, ng, dim) = (rng.gen_range(1..8), rng.gen_range(2..20), rng.gen_range(2..6));
        let q = random_matrix(&mut rng, nq, dim);
        let g = random_matrix(&mut rng, ng, dim);
        let d = pairwise_distances(q.view(), g.view()).map_err(|e| e.to_string())?;
        let p = RerankParams { k1: rng.gen_range(1..10), k2: rng.gen_range(1..5), lambda: 1.0 };
        let r = k_reciprocal_rerank(d.view(), q.view(), g.view(), p).map_err(|e| e.to_string())?;
        ensure(r == d, || format!("matrix {i} changed at lambda = 1"))?;
    }
    let q = array![[0.0, 0.0], [3.0, 3.1]];
    let g = array![[0.2, 0.1], [0.1, 0.4], [3.0, 2.9], [2.6, 3.35]];
    let d = pairwise_distances(q.view(), g.view()).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for (k1, k2) in [(2, 1), (3, 2), (5, 3)] {
        let got = k_reciprocal_rerank(d.view(), q.view(), g.view(), RerankParams { k1, k2, lambda: 0.3 })
            .map_err(|e| e.to_string())?;
        let want = rerank_oracle(q.view(), g.view(), k1, k2, 0.3);
        worst = got.iter().zip(want.iter()).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    ensure(worst <= 1e-6, || format!("toy instance off by {worst:e}"))?;
    Ok(format!("20 identity matrices exact; toy max error {worst:.1e}"))
}

// 5. Rule repair over a synthetic malformed corpus.
fn repair_corpus() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let (mut parsed, mut idempotent, mut passthrough) = (0, 0, 0);
    for _ in 0..200 {
        let doc = random_document(&mut rng);
        let (text, _) = malformed(&doc, &mut rng);
        let once = fix_malformed_json(&text).repaired_text;
        if parse_scene_graph(&once).is_ok() {
            parsed += 1;
        }
        if fix_malformed_json(&once).repaired_text == once {
            idempotent += 1;
        }
        let valid = if rng.gen_bool(0.5) { doc.to_string() } else { serde_json::to_string_pretty(&doc).unwrap() };
        if fix_malformed_json(&valid).repaired_text == valid {
            passthrough += 1;
        }
    }
    ensure(parsed >= 190, || format!("{parsed}/200 parse after repair"))?;
    ensure(idempotent == 200, || format!("{idempotent}/200 idempotent"))?;
    ensure(passthrough == 200, || format!("{passthrough}/200 valid inputs unchanged"))?;
    Ok(format!("{parsed}/200 parse, 200/200 idempotent, 200/200 valid pass-through"))
}

/// Synthesizes a tree and runs every stage up to training.
fn prepare_synthetic(root: &Path, seed: u64) -> Result<Config, PipelineError> {
    synthesize(root, &SynthConfig { seed, ..SynthConfig::default() })?;
    let cfg = Config::load(&root.join("config.toml"))?;
    ingest_stage(&cfg)?;
    graphgen_stage(&cfg)?;
    embed_stage(&cfg)?;
    Ok(cfg)
}

// 6. Synthetic end-to-end training and held-out retrieval.
fn end_to_end() -> Outcome {
    let mut rank1 = Vec::new();
    for seed in 0..10 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let run = || -> Result<f64, PipelineError> {
            let cfg = prepare_synthetic(dir.path(), seed)?;
            let outcome = train_stage(&cfg, false)?;
            assert_eq!(outcome.metrics.len(), 200);
            let eval = eval_stage(&cfg, &EvalFlags { rerank: Some(false), ..EvalFlags::default() })?;
            Ok(eval.reports[0].1.rank1)
        };
        rank1.push(run().map_err(|e| format!("seed {seed}: {e}"))?);
    }
    let good = rank1.iter().filter(|&&r| r >= 0.9).count();
    let shown: Vec<String> = rank1.iter().map(|r| format!("{r:.3}")).collect();
    ensure(good >= 8, || format!("R@1 >= 0.9 in {good}/10 seeds: {}", shown.join(" ")))?;
    Ok(format!("R@1 >= 0.9 in {good}/10 seeds after 200 steps: {}", shown.join(" ")))
}

// 7. Training determinism and attribution against the path oracle.
fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = prepare_synthetic(dir.path(), 7).map_err(|e| e.to_string())?;
    let mut logs = Vec::new();
    for run in ["run_a", "run_b"] {
        cfg.checkpoint_dir = dir.path().join(run);
        train_stage(&cfg, false).map_err(|e| e.to_string())?;
        logs.push(std::fs::read(cfg.checkpoint_dir.join(METRICS_FILE)).map_err(|e| e.to_string())?);
    }
    ensure(!logs[0].is_empty() && logs[0] == logs[1], || "metrics logs differ between runs".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(107);
    for i in 0..20 {
        let n = rng.gen_range(2..=9);
        let extra = rng.gen_range(0..6);
        let g = random_graph(&mut rng, n, extra, 5);
        let enc = GraphEncoder::init(&mut rng, 5, 6, 4, 5);
        let target = rng.gen_range(0..n);
        let a = gatt_attribute(&enc, &g, Some(target)).map_err(|e| e.to_string())?;
        let b = gatt_attribute(&enc, &g, Some(target)).map_err(|e| e.to_string())?;
        let bits = |r: &sgreid_core::attribution::AttributionResult| -> Vec<u64> {
            r.edge_scores.iter().map(|e| e.score).chain(r.node_scores.iter().copied()).map(f64::to_bits).collect()
        };
        ensure(bits(&a) == bits(&b), || format!("graph {i}: attribution not bitwise repeatable"))?;
        let batch = GraphBatch::single(&g).map_err(|e| e.to_string())?;
        let (a1, a2) = enc.attention_maps(&batch).map_err(|e| e.to_string())?;
        let edges: Vec<(usize, usize)> = batch.src.iter().copied().zip(batch.dst.iter().copied()).collect();
        let (es, ns) = attribution_oracle(n, &edges, &a1, &a2, target);
        let err = a
            .edge_scores
            .iter()
            .map(|e| e.score)
            .zip(&es)
            .chain(a.node_scores.iter().copied().zip(&ns))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        ensure(err < 1e-12, || format!("graph {i}: attribution differs from oracle by {err:e}"))?;
    }
    Ok(format!("{} byte metrics log identical across runs; 20 attributions match the oracle", logs[0].len()))
}

/// Drops every edge whose reverse occurs earlier, so no pair is reciprocal.
fn without_reciprocal_edges(mut g: NumericGraph) -> NumericGraph {
    let keep: Vec<usize> = (0..g.edge_index.len())
        .filter(|&k| {
            let (s, d) = g.edge_index[k];
            !g.edge_index[..k].iter().any(|&e| e == (d, s) || e == (s, d))
        })
        .collect();
    g.edge_features = g.edge_features.select(ndarray::Axis(0), &keep);
    g.edge_index = keep.iter().map(|&k| g.edge_index[k]).collect();
    g
}

// 8. Flipping message direction changes the encoding.
fn direction_sensitivity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let enc = GraphEncoder::standard(&mut rng);
    let mut smallest = f64::INFINITY;
    for i in 0..20 {
        let n = rng.gen_range(3..=8);
        let extra = rng.gen_range(0..3);
        let g = without_reciprocal_edges(random_graph(&mut rng, n, extra, 384));
        let a = graph_encode(&enc, &g).map_err(|e| e.to_string())?;
        let b = graph_encode(&enc, &g.flipped()).map_err(|e| e.to_string())?;
        let diff = (&a - &b).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        smallest = smallest.min(diff);
        ensure(diff > 1e-6, || format!("graph {i}: flipped encoding differs by only {diff:e}"))?;
    }
    Ok(format!("20 graphs, smallest max-abs difference {smallest:.3e}"))
}

// 9. Identity overlap is rejected at ingestion; PK batches are well formed.
fn protocol_integrity() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for (sub, name) in [
        ("bounding_box_train", "0001_c1s1_000001_00.jpg"),
        ("query", "0002_c1s1_000002_00.jpg"),
        ("bounding_box_test", "0002_c2s1_000003_00.jpg"),
        ("bounding_box_test", "0001_c3s1_000004_00.jpg"),
    ] {
        let d = dir.path().join(sub);
        std::fs::create_dir_all(&d).map_err(|e| e.to_string())?;
        std::fs::write(d.join(name), b"").map_err(|e| e.to_string())?;
    }
    match ingest(dir.path(), DatasetKind::Market1501) {
        Err(PipelineError::IdentityOverlap(ids)) if ids == vec![1] => {}
        other => return Err(format!("overlapping manifest was not rejected: {other:?}")),
    }

    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let mut batches = 0;
    for _ in 0..50 {
        let ids = rng.gen_range(4..12);
        // Some identities hold fewer than K images.
        let labels: Vec<usize> = (0..ids).flat_map(|l| std::iter::repeat_n(l, rng.gen_range(1..8))).collect();
        let index = PkIndex::new(&labels);
        for (b, k) in [(16, 4), (12, 3), (8, 2)] {
            if b / k > ids {
                continue;
            }
            for _ in 0..10 {
                let batch = pk_sample(&index, b, k, &mut rng).map_err(|e| e.to_string())?;
                let mut counts = std::collections::BTreeMap::new();
                for &i in &batch {
                    *counts.entry(labels[i]).or_insert(0) += 1;
                }
                ensure(batch.len() == b && counts.len() == b / k && counts.values().all(|&c| c == k), || {
                    format!("B={b} K={k}: batch composition {counts:?}")
                })?;
                batches += 1;
            }
        }
    }
    Ok(format!("overlap rejected; {batches} PK batches with exactly B/K identities x K"))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome, Duration); 9] = [
        ("attention correctness", attention_correctness, Duration::from_secs(10)),
        ("gradient suite", gradient_suite, Duration::from_secs(120)),
        ("metric oracle equivalence", metric_oracle, Duration::from_secs(60)),
        ("re-ranking", reranking, Duration::MAX),
        ("repair corpus", repair_corpus, Duration::MAX),
        ("end-to-end overfit", end_to_end, Duration::from_secs(300)),
        ("determinism", determinism, Duration::MAX),
        ("direction sensitivity", direction_sensitivity, Duration::MAX),
        ("protocol integrity", protocol_integrity, Duration::MAX),
    ];
    let mut failed = Vec::new();
    for (i, (name, run, limit)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let outcome = outcome.and_then(|detail| {
            if elapsed > limit {
                Err(format!("{detail}; took {elapsed:.1?}, limit {limit:?}"))
            } else {
                Ok(detail)
            }
        });
        let line = match outcome {
            Ok(detail) => format!("PASS {}. {name}: {detail} ({elapsed:.1?})", i + 1),
            Err(why) => {
                failed.push(name);
                format!("FAIL {}. {name}: {why} ({elapsed:.1?})", i + 1)
            }
        };
        // Written past the test harness capture so the verdicts always show.
        writeln!(std::io::stdout().lock(), "{line}").unwrap();
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
