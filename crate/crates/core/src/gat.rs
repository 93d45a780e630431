//! Two-layer single-head GATv2 graph encoder with edge features.
//!
//! Per layer, for a message edge `u → v` with edge feature `e`:
//!
//! ```text
//! z_uv  = W_src x_u + W_dst x_v + W_edge e_uv
//! α_uv  = softmax over incoming edges of v ( att · LeakyReLU(z_uv) )
//! h'_v  = Σ_u α_uv (W_src x_u + W_edge e_uv) + bias
//! ```
//!
//! Every node receives a self-loop whose edge feature is the encoder's
//! `self_loop_fill`. The encoder stacks two layers with a LeakyReLU in
//! between, max-pools node states per graph and applies layer norm.
//! Backward passes are written out by hand; [`GatLayer::backward`] and
//! [`GraphEncoder::backward`] accumulate into gradient containers of the
//! same type as the parameters.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use thiserror::Error;

use crate::nn::{self, leaky_relu, leaky_relu_grad, Params, Role, TensorMut, TensorRef};
use crate::textembed::{NumericGraph, TEXT_DIM};

pub const HIDDEN_DIM: usize = 384;
pub const GRAPH_DIM: usize = 128;
pub const NEGATIVE_SLOPE: f64 = 0.2;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatError {
    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("graph {0} has no nodes")]
    EmptyGraph(usize),
    #[error("edge ({0}, {1}) references a missing node")]
    BadEdge(usize, usize),
}

fn check(what: &'static str, expected: usize, got: usize) -> Result<(), GatError> {
    if expected == got {
        Ok(())
    } else {
        Err(GatError::ShapeMismatch { what, expected, got })
    }
}

/// One or more graphs merged into a disjoint union, with one self-loop per
/// node appended after the real edges.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    /// `N × D` node features.
    pub x: Array2<f64>,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    /// Edges `0..num_real` are message edges; the rest are self-loops.
    pub num_real: usize,
    /// `num_real × D_edge` features of the real edges.
    pub edge_attr: Array2<f64>,
    /// Edge ids arriving at each node.
    pub incoming: Vec<Vec<usize>>,
    /// `node_range[g]` is the contiguous node range of graph `g`.
    pub node_range: Vec<std::ops::Range<usize>>,
    /// Global index of each graph's person node.
    pub roots: Vec<usize>,
}

impl GraphBatch {
    pub fn single(g: &NumericGraph) -> Result<Self, GatError> {
        Self::union(&[g])
    }

    pub fn union(graphs: &[&NumericGraph]) -> Result<Self, GatError> {
        let n: usize = graphs.iter().map(|g| g.num_nodes()).sum();
        let e: usize = graphs.iter().map(|g| g.num_edges()).sum();
        let dim = graphs.first().map_or(TEXT_DIM, |g| g.feature_dim());
        let edge_dim = graphs
            .iter()
            .find(|g| g.num_edges() > 0)
            .map_or(dim, |g| g.edge_features.ncols());
        let mut x = Array2::zeros((n, dim));
        let mut edge_attr = Array2::zeros((e, edge_dim));
        let mut src = Vec::with_capacity(e + n);
        let mut dst = Vec::with_capacity(e + n);
        let mut node_range = Vec::with_capacity(graphs.len());
        let mut roots = Vec::with_capacity(graphs.len());
        let (mut off, mut eoff) = (0, 0);
        for (gi, g) in graphs.iter().enumerate() {
            let gn = g.num_nodes();
            if gn == 0 {
                return Err(GatError::EmptyGraph(gi));
            }
            check("node feature dim", dim, g.feature_dim())?;
            x.slice_mut(ndarray::s![off..off + gn, ..])
                .assign(&g.node_features);
            if g.num_edges() > 0 {
                check("edge feature dim", edge_dim, g.edge_features.ncols())?;
                check("edge feature rows", g.num_edges(), g.edge_features.nrows())?;
                edge_attr
                    .slice_mut(ndarray::s![eoff..eoff + g.num_edges(), ..])
                    .assign(&g.edge_features);
            }
            for &(s, d) in &g.edge_index {
                if s >= gn || d >= gn {
                    return Err(GatError::BadEdge(s, d));
                }
                src.push(off + s);
                dst.push(off + d);
            }
            node_range.push(off..off + gn);
            roots.push(off + g.person_node_index);
            off += gn;
            eoff += g.num_edges();
        }
        for v in 0..n {
            src.push(v);
            dst.push(v);
        }
        let mut incoming = vec![Vec::new(); n];
        for (k, &d) in dst.iter().enumerate() {
            incoming[d].push(k);
        }
        Ok(Self {
            x,
            src,
            dst,
            num_real: e,
            edge_attr,
            incoming,
            node_range,
            roots,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.x.nrows()
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }

    pub fn num_graphs(&self) -> usize {
        self.node_range.len()
    }

    pub fn is_self_loop(&self, edge: usize) -> bool {
        edge >= self.num_real
    }
}

/// Parameters of one GATv2 layer (also used as its gradient container).
#[derive(Debug, Clone, PartialEq)]
pub struct GatLayer {
    /// `out × in`, applied to the sending node.
    pub w_src: Array2<f64>,
    /// `out × in`, applied to the receiving node.
    pub w_dst: Array2<f64>,
    /// `out × edge_dim`.
    pub w_edge: Array2<f64>,
    pub att: Array1<f64>,
    pub bias: Array1<f64>,
    pub negative_slope: f64,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    /// Attention coefficient per edge of the batch (self-loops included).
    pub alpha: Vec<f64>,
    z: Array2<f64>,
    p_src: Array2<f64>,
    p_edge: Array2<f64>,
    p_fill: Array1<f64>,
}

impl GatLayer {
    pub fn init<R: Rng>(rng: &mut R, in_dim: usize, out_dim: usize, edge_dim: usize) -> Self {
        Self {
            w_src: nn::fan_in_uniform(rng, out_dim, in_dim, in_dim),
            w_dst: nn::fan_in_uniform(rng, out_dim, in_dim, in_dim),
            w_edge: nn::fan_in_uniform(rng, out_dim, edge_dim, edge_dim),
            att: nn::fan_in_uniform_vec(rng, out_dim, out_dim),
            bias: Array1::zeros(out_dim),
            negative_slope: NEGATIVE_SLOPE,
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize, edge_dim: usize) -> Self {
        Self {
            w_src: Array2::zeros((out_dim, in_dim)),
            w_dst: Array2::zeros((out_dim, in_dim)),
            w_edge: Array2::zeros((out_dim, edge_dim)),
            att: Array1::zeros(out_dim),
            bias: Array1::zeros(out_dim),
            negative_slope: NEGATIVE_SLOPE,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            negative_slope: self.negative_slope,
            ..Self::zeros(self.in_dim(), self.out_dim(), self.edge_dim())
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w_src.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w_src.nrows()
    }

    pub fn edge_dim(&self) -> usize {
        self.w_edge.ncols()
    }

    fn check_inputs(
        &self,
        batch: &GraphBatch,
        x: ArrayView2<'_, f64>,
        fill: ArrayView1<'_, f64>,
    ) -> Result<(), GatError> {
        check("node state rows", batch.num_nodes(), x.nrows())?;
        check("node state dim", self.in_dim(), x.ncols())?;
        check("self-loop fill dim", self.edge_dim(), fill.len())?;
        if batch.num_real > 0 {
            check("edge feature dim", self.edge_dim(), batch.edge_attr.ncols())?;
        }
        check("w_dst rows", self.out_dim(), self.w_dst.nrows())?;
        check("w_edge rows", self.out_dim(), self.w_edge.nrows())?;
        check("att dim", self.out_dim(), self.att.len())?;
        check("bias dim", self.out_dim(), self.bias.len())
    }

    /// Attention coefficients for every edge of `batch`.
    pub fn attention(
        &self,
        batch: &GraphBatch,
        x: ArrayView2<'_, f64>,
        fill: ArrayView1<'_, f64>,
    ) -> Result<Vec<f64>, GatError> {
        Ok(self.forward(batch, x, fill)?.1.alpha)
    }

    pub fn forward(
        &self,
        batch: &GraphBatch,
        x: ArrayView2<'_, f64>,
        fill: ArrayView1<'_, f64>,
    ) -> Result<(Array2<f64>, LayerCache), GatError> {
        self.check_inputs(batch, x, fill)?;
        let out_dim = self.out_dim();
        let p_src = x.dot(&self.w_src.t());
        let p_dst = x.dot(&self.w_dst.t());
        let p_edge = if batch.num_real > 0 {
            batch.edge_attr.dot(&self.w_edge.t())
        } else {
            Array2::zeros((0, out_dim))
        };
        let p_fill = self.w_edge.dot(&fill);

        let ne = batch.num_edges();
        let mut z = Array2::zeros((ne, out_dim));
        let mut logits = vec![0.0; ne];
        for k in 0..ne {
            let pe = if k < batch.num_real {
                p_edge.row(k)
            } else {
                p_fill.view()
            };
            let (ps, pd) = (p_src.row(batch.src[k]), p_dst.row(batch.dst[k]));
            let mut zk = z.row_mut(k);
            let mut s = 0.0;
            for j in 0..out_dim {
                let v = ps[j] + pd[j] + pe[j];
                zk[j] = v;
                s += self.att[j] * leaky_relu(v, self.negative_slope);
            }
            logits[k] = s;
        }

        let mut alpha = vec![0.0; ne];
        for edges in &batch.incoming {
            let max = edges
                .iter()
                .map(|&k| logits[k])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for &k in edges {
                alpha[k] = (logits[k] - max).exp();
                sum += alpha[k];
            }
            for &k in edges {
                alpha[k] /= sum;
            }
        }

        let mut out = Array2::zeros((batch.num_nodes(), out_dim));
        for mut row in out.rows_mut() {
            row.assign(&self.bias);
        }
        for k in 0..ne {
            let pe = if k < batch.num_real {
                p_edge.row(k)
            } else {
                p_fill.view()
            };
            let ps = p_src.row(batch.src[k]);
            let a = alpha[k];
            let mut o = out.row_mut(batch.dst[k]);
            for j in 0..out_dim {
                o[j] += a * (ps[j] + pe[j]);
            }
        }
        Ok((
            out,
            LayerCache {
                alpha,
                z,
                p_src,
                p_edge,
                p_fill,
            },
        ))
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to `x` when `want_input_grad` is set.
    pub fn backward(
        &self,
        batch: &GraphBatch,
        x: ArrayView2<'_, f64>,
        fill: ArrayView1<'_, f64>,
        cache: &LayerCache,
        grad_out: ArrayView2<'_, f64>,
        grads: &mut GatLayer,
        want_input_grad: bool,
    ) -> Option<Array2<f64>> {
        let out_dim = self.out_dim();
        let ne = batch.num_edges();
        let n = batch.num_nodes();

        grads.bias += &grad_out.sum_axis(Axis(0));

        // dL/dα per edge, then softmax backward per destination.
        let mut d_alpha = vec![0.0; ne];
        for k in 0..ne {
            let pe = if k < batch.num_real {
                cache.p_edge.row(k)
            } else {
                cache.p_fill.view()
            };
            let ps = cache.p_src.row(batch.src[k]);
            let g = grad_out.row(batch.dst[k]);
            d_alpha[k] = (0..out_dim).map(|j| g[j] * (ps[j] + pe[j])).sum();
        }
        let mut d_logit = vec![0.0; ne];
        for edges in &batch.incoming {
            let s: f64 = edges.iter().map(|&k| cache.alpha[k] * d_alpha[k]).sum();
            for &k in edges {
                d_logit[k] = cache.alpha[k] * (d_alpha[k] - s);
            }
        }

        let mut dp_src = Array2::zeros((n, out_dim));
        let mut dp_dst = Array2::zeros((n, out_dim));
        let mut dp_edge = Array2::zeros((batch.num_real, out_dim));
        let mut dp_fill = Array1::zeros(out_dim);
        for k in 0..ne {
            let zk = cache.z.row(k);
            let g = grad_out.row(batch.dst[k]);
            let (a, dl) = (cache.alpha[k], d_logit[k]);
            let mut ds = dp_src.row_mut(batch.src[k]);
            for j in 0..out_dim {
                let act = leaky_relu(zk[j], self.negative_slope);
                grads.att[j] += dl * act;
                let dz = dl * self.att[j] * leaky_relu_grad(zk[j], self.negative_slope);
                let dm = a * g[j];
                ds[j] += dz + dm;
                dp_dst[[batch.dst[k], j]] += dz;
                if k < batch.num_real {
                    dp_edge[[k, j]] += dz + dm;
                } else {
                    dp_fill[j] += dz + dm;
                }
            }
        }

        general_mat_mul(1.0, &dp_src.t(), &x, 1.0, &mut grads.w_src);
        general_mat_mul(1.0, &dp_dst.t(), &x, 1.0, &mut grads.w_dst);
        if batch.num_real > 0 {
            general_mat_mul(1.0, &dp_edge.t(), &batch.edge_attr, 1.0, &mut grads.w_edge);
        }
        for j in 0..out_dim {
            if dp_fill[j] != 0.0 {
                grads
                    .w_edge
                    .row_mut(j)
                    .scaled_add(dp_fill[j], &fill);
            }
        }

        want_input_grad.then(|| {
            let mut dx = dp_src.dot(&self.w_src);
            general_mat_mul(1.0, &dp_dst, &self.w_dst, 1.0, &mut dx);
            dx
        })
    }

    fn push_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        let r = Role::Trainable;
        out.push(nn::t2(format!("{prefix}.w_src"), r, &self.w_src));
        out.push(nn::t2(format!("{prefix}.w_dst"), r, &self.w_dst));
        out.push(nn::t2(format!("{prefix}.w_edge"), r, &self.w_edge));
        out.push(nn::t1(format!("{prefix}.att"), r, &self.att));
        out.push(nn::t1(format!("{prefix}.bias"), r, &self.bias));
    }

    fn push_tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
        let r = Role::Trainable;
        out.push(nn::m2(format!("{prefix}.w_src"), r, &mut self.w_src));
        out.push(nn::m2(format!("{prefix}.w_dst"), r, &mut self.w_dst));
        out.push(nn::m2(format!("{prefix}.w_edge"), r, &mut self.w_edge));
        out.push(nn::m1(format!("{prefix}.att"), r, &mut self.att));
        out.push(nn::m1(format!("{prefix}.bias"), r, &mut self.bias));
    }
}

impl Params for GatLayer {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut v = Vec::new();
        self.push_tensors("gat", &mut v);
        v
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut v = Vec::new();
        self.push_tensors_mut("gat", &mut v);
        v
    }
}

/// Two GATv2 layers, max pooling and layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphEncoder {
    pub layer1: GatLayer,
    pub layer2: GatLayer,
    pub ln_gain: Array1<f64>,
    pub ln_bias: Array1<f64>,
    /// Edge feature given to self-loops; not trained.
    pub self_loop_fill: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    pub layer1: LayerCache,
    pub layer2: LayerCache,
    h1: Array2<f64>,
    a1: Array2<f64>,
    /// Node index holding the maximum, per graph and channel.
    argmax: Vec<Vec<usize>>,
    x_hat: Array2<f64>,
    inv_std: Vec<f64>,
}

impl GraphEncoder {
    /// `in_dim → hidden → out_dim` with `edge_dim` edge features.
    pub fn init<R: Rng>(rng: &mut R, in_dim: usize, hidden: usize, out_dim: usize, edge_dim: usize) -> Self {
        Self {
            layer1: GatLayer::init(rng, in_dim, hidden, edge_dim),
            layer2: GatLayer::init(rng, hidden, out_dim, edge_dim),
            ln_gain: Array1::ones(out_dim),
            ln_bias: Array1::zeros(out_dim),
            self_loop_fill: Array1::zeros(edge_dim),
        }
    }

    /// Default geometry: 384 → 384 → 128 over 384-dim text features.
    pub fn standard<R: Rng>(rng: &mut R) -> Self {
        Self::init(rng, TEXT_DIM, HIDDEN_DIM, GRAPH_DIM, TEXT_DIM)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layer1: self.layer1.zeros_like(),
            layer2: self.layer2.zeros_like(),
            ln_gain: Array1::zeros(self.ln_gain.len()),
            ln_bias: Array1::zeros(self.ln_bias.len()),
            self_loop_fill: Array1::zeros(self.self_loop_fill.len()),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.layer2.out_dim()
    }

    /// Node states after the second layer (before pooling), plus caches.
    pub fn node_states(&self, batch: &GraphBatch) -> Result<(Array2<f64>, Array2<f64>, LayerCache, Array2<f64>, LayerCache), GatError> {
        let fill = self.self_loop_fill.view();
        let (h1, c1) = self.layer1.forward(batch, batch.x.view(), fill)?;
        let slope = self.layer1.negative_slope;
        let a1 = h1.mapv(|v| leaky_relu(v, slope));
        let (h2, c2) = self.layer2.forward(batch, a1.view(), fill)?;
        Ok((h1, a1, c1, h2, c2))
    }

    /// Per-edge attention of both layers.
    pub fn attention_maps(&self, batch: &GraphBatch) -> Result<(Vec<f64>, Vec<f64>), GatError> {
        let (_, _, c1, _, c2) = self.node_states(batch)?;
        Ok((c1.alpha, c2.alpha))
    }

    /// `G × out_dim` graph representations.
    pub fn forward(&self, batch: &GraphBatch) -> Result<(Array2<f64>, EncoderCache), GatError> {
        let (h1, a1, c1, h2, c2) = self.node_states(batch)?;
        let d = self.out_dim();
        let ng = batch.num_graphs();
        let mut pooled = Array2::zeros((ng, d));
        let mut argmax = vec![vec![0usize; d]; ng];
        for (g, range) in batch.node_range.iter().enumerate() {
            for j in 0..d {
                let mut best = range.start;
                for v in range.clone() {
                    if h2[[v, j]] > h2[[best, j]] {
                        best = v;
                    }
                }
                argmax[g][j] = best;
                pooled[[g, j]] = h2[[best, j]];
            }
        }
        let mut x_hat = Array2::zeros((ng, d));
        let mut inv_std = vec![0.0; ng];
        let mut out = Array2::zeros((ng, d));
        for g in 0..ng {
            let row = pooled.row(g);
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[g] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                x_hat[[g, j]] = xh;
                out[[g, j]] = self.ln_gain[j] * xh + self.ln_bias[j];
            }
        }
        Ok((
            out,
            EncoderCache {
                layer1: c1,
                layer2: c2,
                h1,
                a1,
                argmax,
                x_hat,
                inv_std,
            },
        ))
    }

    pub fn backward(
        &self,
        batch: &GraphBatch,
        cache: &EncoderCache,
        grad_out: ArrayView2<'_, f64>,
        grads: &mut GraphEncoder,
    ) {
        let d = self.out_dim();
        let ng = batch.num_graphs();
        let mut dh2 = Array2::zeros((batch.num_nodes(), d));
        for g in 0..ng {
            let dy = grad_out.row(g);
            let xh = cache.x_hat.row(g);
            let mut dxh = vec![0.0; d];
            for j in 0..d {
                grads.ln_gain[j] += dy[j] * xh[j];
                grads.ln_bias[j] += dy[j];
                dxh[j] = dy[j] * self.ln_gain[j];
            }
            let mean_dxh = dxh.iter().sum::<f64>() / d as f64;
            let mean_dxh_xh = (0..d).map(|j| dxh[j] * xh[j]).sum::<f64>() / d as f64;
            for j in 0..d {
                let dp = cache.inv_std[g] * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
                dh2[[cache.argmax[g][j], j]] += dp;
            }
        }
        let fill = self.self_loop_fill.view();
        let da1 = self
            .layer2
            .backward(
                batch,
                cache.a1.view(),
                fill,
                &cache.layer2,
                dh2.view(),
                &mut grads.layer2,
                true,
            )
            .expect("input gradient requested");
        let slope = self.layer1.negative_slope;
        let mut dh1 = da1;
        ndarray::Zip::from(&mut dh1)
            .and(&cache.h1)
            .for_each(|g, &h| *g *= leaky_relu_grad(h, slope));
        self.layer1.backward(
            batch,
            batch.x.view(),
            fill,
            &cache.layer1,
            dh1.view(),
            &mut grads.layer1,
            false,
        );
    }
}

impl Params for GraphEncoder {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut v = Vec::new();
        self.layer1.push_tensors("gat.layer1", &mut v);
        self.layer2.push_tensors("gat.layer2", &mut v);
        v.push(nn::t1("gat.ln_gain".into(), Role::Trainable, &self.ln_gain));
        v.push(nn::t1("gat.ln_bias".into(), Role::Trainable, &self.ln_bias));
        v.push(nn::t1("gat.self_loop_fill".into(), Role::Buffer, &self.self_loop_fill));
        v
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut v = Vec::new();
        self.layer1.push_tensors_mut("gat.layer1", &mut v);
        self.layer2.push_tensors_mut("gat.layer2", &mut v);
        v.push(nn::m1("gat.ln_gain".into(), Role::Trainable, &mut self.ln_gain));
        v.push(nn::m1("gat.ln_bias".into(), Role::Trainable, &mut self.ln_bias));
        v.push(nn::m1(
            "gat.self_loop_fill".into(),
            Role::Buffer,
            &mut self.self_loop_fill,
        ));
        v
    }
}

/// Encodes a single graph into its `out_dim` representation.
pub fn graph_encode(encoder: &GraphEncoder, graph: &NumericGraph) -> Result<Array1<f64>, GatError> {
    let batch = GraphBatch::single(graph)?;
    let (out, _) = encoder.forward(&batch)?;
    Ok(out.row(0).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn graph(n: usize, edges: &[(usize, usize)], dim: usize, rng: &mut ChaCha8Rng) -> NumericGraph {
        NumericGraph {
            node_features: Array2::from_shape_fn((n, dim), |_| rng.gen_range(-1.0..1.0)),
            edge_index: edges.to_vec(),
            edge_features: Array2::from_shape_fn((edges.len(), dim), |_| rng.gen_range(-1.0..1.0)),
            person_node_index: 0,
            source_image_id: String::new(),
        }
    }

    #[test]
    fn isolated_node_attends_only_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = graph(3, &[(1, 0)], 4, &mut rng);
        let b = GraphBatch::single(&g).unwrap();
        let layer = GatLayer::init(&mut rng, 4, 3, 4);
        let alpha = layer
            .attention(&b, b.x.view(), Array1::zeros(4).view())
            .unwrap();
        // edges: 0 = (1,0), 1..=3 self-loops of nodes 0,1,2
        assert_eq!(alpha[2], 1.0);
        assert_eq!(alpha[3], 1.0);
        assert!((alpha[0] + alpha[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn self_loop_only_layer_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = graph(1, &[], 5, &mut rng);
        let b = GraphBatch::single(&g).unwrap();
        let layer = GatLayer::init(&mut rng, 5, 4, 5);
        let fill = Array1::from_shape_fn(5, |i| i as f64 * 0.1);
        let (out, _) = layer.forward(&b, b.x.view(), fill.view()).unwrap();
        let expected = layer.w_src.dot(&g.node_features.row(0)) + layer.w_edge.dot(&fill);
        for j in 0..4 {
            assert!((out[[0, j]] - expected[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = graph(2, &[(0, 1)], 4, &mut rng);
        let b = GraphBatch::single(&g).unwrap();
        let layer = GatLayer::init(&mut rng, 6, 3, 4);
        assert!(matches!(
            layer.forward(&b, b.x.view(), Array1::zeros(4).view()),
            Err(GatError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn single_node_pooling_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = graph(1, &[], 6, &mut rng);
        let enc = GraphEncoder::init(&mut rng, 6, 5, 4, 6);
        let b = GraphBatch::single(&g).unwrap();
        let (_, _, _, h2, _) = enc.node_states(&b).unwrap();
        let out = graph_encode(&enc, &g).unwrap();
        let row = h2.row(0);
        let mean = row.sum() / 4.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        for j in 0..4 {
            let expected = (row[j] - mean) / (var + LAYER_NORM_EPS).sqrt();
            assert!((out[j] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn batched_union_matches_individual_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g1 = graph(3, &[(1, 0), (2, 0)], 6, &mut rng);
        let g2 = graph(2, &[(1, 0)], 6, &mut rng);
        let enc = GraphEncoder::init(&mut rng, 6, 5, 4, 6);
        let b = GraphBatch::union(&[&g1, &g2]).unwrap();
        let (out, _) = enc.forward(&b).unwrap();
        let o1 = graph_encode(&enc, &g1).unwrap();
        let o2 = graph_encode(&enc, &g2).unwrap();
        for j in 0..4 {
            assert!((out[[0, j]] - o1[j]).abs() < 1e-12);
            assert!((out[[1, j]] - o2[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn standard_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let enc = GraphEncoder::standard(&mut rng);
        assert_eq!(enc.layer1.in_dim(), 384);
        assert_eq!(enc.layer1.out_dim(), 384);
        assert_eq!(enc.layer2.out_dim(), 128);
        assert!(enc.self_loop_fill.iter().all(|&v| v == 0.0));
        let g = graph(4, &[(1, 0), (2, 0), (3, 1)], 384, &mut rng);
        let out = graph_encode(&enc, &g).unwrap();
        assert_eq!(out.len(), 128);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn empty_graph_is_rejected() {
        let g = NumericGraph {
            node_features: Array2::zeros((0, 4)),
            edge_index: vec![],
            edge_features: Array2::zeros((0, 4)),
            person_node_index: 0,
            source_image_id: String::new(),
        };
        assert!(matches!(GraphBatch::single(&g), Err(GatError::EmptyGraph(0))));
    }
}
