//! Deliberately naive reference implementations.

use std::collections::{BTreeSet, HashSet};

use ndarray::{Array2, ArrayView2};

pub struct OracleMetrics {
    pub rank1: f64,
    pub rank5: f64,
    pub map: f64,
    pub valid: usize,
}

/// CMC and mAP by counting, for every relevant gallery item, how many
/// retained items precede it.
pub fn cmc_map_oracle(dist: ArrayView2<'_, f64>, q_ids: &[i64], g_ids: &[i64], q_cams: &[i64], g_cams: &[i64]) -> OracleMetrics {
    let mut ap_sum = 0.0;
    let (mut valid, mut top1, mut top5) = (0usize, 0usize, 0usize);
    for q in 0..dist.nrows() {
        let retained: Vec<usize> = (0..dist.ncols())
            .filter(|&g| g_ids[g] != -1)
            .filter(|&g| !(g_ids[g] == q_ids[q] && g_cams[g] == q_cams[q]))
            .collect();
        let relevant: Vec<usize> = if q_ids[q] <= 0 {
            Vec::new()
        } else {
            retained.iter().copied().filter(|&g| g_ids[g] == q_ids[q]).collect()
        };
        if relevant.is_empty() {
            continue;
        }
        let rank_of = |p: usize| {
            1 + retained
                .iter()
                .filter(|&&g| dist[[q, g]] < dist[[q, p]] || (dist[[q, g]] == dist[[q, p]] && g < p))
                .count()
        };
        let mut ranks: Vec<usize> = relevant.iter().map(|&p| rank_of(p)).collect();
        ranks.sort_unstable();
        let mut s = 0.0;
        for (i, &r) in ranks.iter().enumerate() {
            s += (i + 1) as f64 / r as f64;
        }
        ap_sum += s / relevant.len() as f64;
        valid += 1;
        if ranks[0] <= 1 {
            top1 += 1;
        }
        if ranks[0] <= 5 {
            top5 += 1;
        }
    }
    OracleMetrics {
        rank1: top1 as f64 / valid as f64,
        rank5: top5 as f64 / valid as f64,
        map: ap_sum / valid as f64,
        valid,
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-reciprocal re-ranking written directly from set definitions:
/// N(i, k) = first k + 1 neighbors, R(i, k) = {j ∈ N(i, k) : i ∈ N(j, k)},
/// Jaccard distance 1 − Σ min / Σ max over the expanded weight vectors.
pub fn rerank_oracle(q: ArrayView2<'_, f64>, g: ArrayView2<'_, f64>, k1: usize, k2: usize, lambda: f64) -> Array2<f64> {
    let points: Vec<Vec<f64>> = q.rows().into_iter().chain(g.rows()).map(|r| r.to_vec()).collect();
    let n = points.len();
    let nq = q.nrows();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            d[i][j] = sq_dist(&points[i], &points[j]);
        }
        let max = d[i].iter().cloned().fold(0.0, f64::max);
        let max = if max > 0.0 { max } else { 1.0 };
        for j in 0..n {
            d[i][j] /= max;
        }
    }
    let order: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut o: Vec<usize> = (0..n).collect();
            o.sort_by(|&a, &b| d[i][a].partial_cmp(&d[i][b]).unwrap().then(a.cmp(&b)));
            o
        })
        .collect();
    let neighbors = |i: usize, k: usize| -> HashSet<usize> { order[i].iter().take(k + 1).copied().collect() };
    let reciprocal = |i: usize, k: usize| -> HashSet<usize> {
        neighbors(i, k).into_iter().filter(|&j| neighbors(j, k).contains(&i)).collect()
    };
    let half = (k1 as f64 / 2.0).round_ties_even() as usize;
    let mut v = vec![vec![0.0; n]; n];
    for i in 0..n {
        let r = reciprocal(i, k1);
        let mut expanded: BTreeSet<usize> = r.iter().copied().collect();
        for &c in &r {
            let rc = reciprocal(c, half);
            if rc.intersection(&r).count() as f64 > 2.0 / 3.0 * rc.len() as f64 {
                expanded.extend(rc);
            }
        }
        let z: f64 = expanded.iter().map(|&j| (-d[i][j]).exp()).sum();
        for &j in &expanded {
            v[i][j] = (-d[i][j]).exp() / z;
        }
    }
    if k2 > 1 {
        let mut vq = vec![vec![0.0; n]; n];
        for i in 0..n {
            for &j in order[i].iter().take(k2) {
                for c in 0..n {
                    vq[i][c] += v[j][c] / k2 as f64;
                }
            }
        }
        v = vq;
    }
    let mut out = Array2::zeros((nq, g.nrows()));
    for i in 0..nq {
        for j in 0..g.nrows() {
            let (mut mn, mut mx) = (0.0, 0.0);
            for c in 0..n {
                mn += f64::min(v[i][c], v[nq + j][c]);
                mx += f64::max(v[i][c], v[nq + j][c]);
            }
            let jaccard = 1.0 - mn / mx;
            let original = sq_dist(&points[i], &points[nq + j]);
            out[[i, j]] = lambda * original + (1.0 - lambda) * jaccard;
        }
    }
    out
}

/// Attribution by listing every path of one or two hops that ends at the
/// target. `edges` are (source, destination) of all message edges
/// (self-loops included) with their layer-1 and layer-2 coefficients.
pub fn attribution_oracle(num_nodes: usize, edges: &[(usize, usize)], a1: &[f64], a2: &[f64], target: usize) -> (Vec<f64>, Vec<f64>) {
    let mut edge_scores = vec![0.0; edges.len()];
    for (e, &(_, v)) in edges.iter().enumerate() {
        if v == target {
            edge_scores[e] += a2[e];
        }
        for (f, &(s2, t2)) in edges.iter().enumerate() {
            if s2 == v && t2 == target {
                edge_scores[e] += a1[e] * a2[f];
            }
        }
    }
    let mut node_scores = vec![0.0; num_nodes];
    for (e, &(u, _)) in edges.iter().enumerate() {
        node_scores[u] += edge_scores[e];
    }
    (edge_scores, node_scores)
}
