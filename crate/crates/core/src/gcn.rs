//! Link-prediction graph convolutional network. Each layer aggregates
//! ReLU-transformed, degree-normalized neighbor features, concatenates them
//! with the node's own representation, and projects through a second ReLU.
//! A two-logit softmax readout scores each node's likelihood of sharing the
//! pivot's identity.
//!
//! Forward passes cache pre-activations so the hand-written backward pass
//! can replay the exact computation; there is no autograd.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasynth::{put_f32_matrix, put_u32, read_f32_matrix, Cursor, EmbeddingSet};
use crate::error::{file_err, Error, Result};
use crate::graph::{build_pivot_graph_from_knn, knn_search, KnnParams, LinkageGraph, PivotGraph};
use crate::numerics::{
    affine_forward, col_sums, momentum_sgd_step, seeded_rng, softmax_rows, Matrix, ParamGrad,
};

const MAGIC: &[u8; 4] = b"AING";
const VERSION: u32 = 1;
/// Probabilities are clamped this far from 0/1 before logarithms.
const PROB_EPS: f64 = 1e-12;
/// Degree regularizer keeping the normalization real on all-zero rows.
const DEGREE_EPS: f64 = 1e-8;

/// One graph convolution: `W_g`/`b_g` transform scaled neighbor features
/// before aggregation, `W` projects the concatenated representation.
#[derive(Clone, Debug)]
pub struct GcnLayer {
    pub w_g: ParamGrad,
    pub b_g: ParamGrad,
    pub w: ParamGrad,
}

/// The full network: a stack of [`GcnLayer`]s plus a two-logit affine
/// readout. `dims[0]` is the input feature width, `dims[1..]` the hidden
/// widths in order.
#[derive(Clone, Debug)]
pub struct GcnModel {
    pub layers: Vec<GcnLayer>,
    pub readout_w: ParamGrad,
    pub readout_b: ParamGrad,
    pub dims: Vec<usize>,
}

impl GcnModel {
    pub fn new(dims: &[usize], rng: &mut rand_chacha::ChaCha8Rng) -> Result<GcnModel> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("bad layer widths {dims:?}")));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for l in 0..dims.len() - 1 {
            let (d_in, d_out) = (dims[l], dims[l + 1]);
            layers.push(GcnLayer {
                w_g: ParamGrad::new(
                    &format!("gcn{l}.w_g"),
                    Matrix::glorot_uniform(d_in, d_in, rng),
                ),
                b_g: ParamGrad::new(&format!("gcn{l}.b_g"), Matrix::zeros(1, d_in)),
                w: ParamGrad::new(
                    &format!("gcn{l}.w"),
                    Matrix::glorot_uniform(2 * d_in, d_out, rng),
                ),
            });
        }
        let d_last = *dims.last().unwrap();
        Ok(GcnModel {
            layers,
            readout_w: ParamGrad::new("readout.w", Matrix::glorot_uniform(d_last, 2, rng)),
            readout_b: ParamGrad::new("readout.b", Matrix::zeros(1, 2)),
            dims: dims.to_vec(),
        })
    }

    pub fn params(&self) -> Vec<&ParamGrad> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.w_g);
            out.push(&l.b_g);
            out.push(&l.w);
        }
        out.push(&self.readout_w);
        out.push(&self.readout_b);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamGrad> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.w_g);
            out.push(&mut l.b_g);
            out.push(&mut l.w);
        }
        out.push(&mut self.readout_w);
        out.push(&mut self.readout_b);
        out
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn param_l2(&self) -> f64 {
        self.params()
            .iter()
            .map(|p| p.value.frob_norm().powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Training knobs. `hidden_dims` fixes the network shape since the model is
/// created inside [`gcn_train`].
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GcnTrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub graphs_per_batch: usize,
    pub hidden_dims: Vec<usize>,
    pub seed: u64,
}

impl Default for GcnTrainConfig {
    fn default() -> Self {
        GcnTrainConfig {
            lr: 0.1,
            weight_decay: 5e-4,
            iterations: 300,
            graphs_per_batch: 8,
            hidden_dims: vec![32, 32],
            seed: 0,
        }
    }
}

impl GcnTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.iterations == 0 || self.graphs_per_batch == 0 {
            return Err(Error::Config("iterations and graphs_per_batch must be >= 1".into()));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("bad hidden widths {:?}", self.hidden_dims)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Degree-normalized edge weights `s[v][idx] = A[u][v] / sqrt(L_u * L_v)`
/// where `L_u` sums |A| over u's linked neighbors.
fn edge_scales(pg: &PivotGraph) -> Vec<Vec<f64>> {
    let k = pg.len();
    let mut lambda = vec![DEGREE_EPS; k];
    for v in 0..k {
        for &u in &pg.linked_neighbors[v] {
            lambda[v] += pg.adjacency.get(v, u).abs();
        }
    }
    (0..k)
        .map(|v| {
            pg.linked_neighbors[v]
                .iter()
                .map(|&u| pg.adjacency.get(u, v) / (lambda[u] * lambda[v]).sqrt())
                .collect()
        })
        .collect()
}

struct LayerCache {
    input: Matrix,
    // pre-ReLU neighbor transforms, indexed [node][neighbor position]
    neigh_pre: Vec<Vec<Vec<f64>>>,
    concat: Matrix,
    out_pre: Matrix,
}

/// Opaque forward-pass state consumed by [`backward`].
pub struct GcnCache {
    scales: Vec<Vec<f64>>,
    layers: Vec<LayerCache>,
    features: Matrix,
    probs: Vec<f64>,
}

fn layer_forward(
    h: &Matrix,
    pg: &PivotGraph,
    scales: &[Vec<f64>],
    layer: &GcnLayer,
) -> Result<(Matrix, LayerCache)> {
    let k = pg.len();
    let d_in = layer.w_g.value.rows();
    if h.rows() != k || h.cols() != d_in {
        return Err(Error::Dim(format!(
            "layer input {}x{} does not match {k} nodes x {d_in}",
            h.rows(),
            h.cols()
        )));
    }
    if layer.w.value.rows() != 2 * d_in {
        return Err(Error::Dim(format!(
            "projection expects {} rows, got {}",
            2 * d_in,
            layer.w.value.rows()
        )));
    }
    let mut concat = Matrix::zeros(k, 2 * d_in);
    let mut neigh_pre = Vec::with_capacity(k);
    for v in 0..k {
        concat.row_mut(v)[..d_in].copy_from_slice(h.row(v));
        let mut pres = Vec::with_capacity(pg.linked_neighbors[v].len());
        for (idx, &u) in pg.linked_neighbors[v].iter().enumerate() {
            let s = scales[v][idx];
            let mut z = layer.b_g.value.row(0).to_vec();
            let hu = h.row(u);
            for a in 0..d_in {
                let x = s * hu[a];
                if x != 0.0 {
                    let wrow = layer.w_g.value.row(a);
                    for (zb, wb) in z.iter_mut().zip(wrow) {
                        *zb += x * wb;
                    }
                }
            }
            let agg = &mut concat.row_mut(v)[d_in..];
            for (acc, &zb) in agg.iter_mut().zip(&z) {
                if zb > 0.0 {
                    *acc += zb;
                }
            }
            pres.push(z);
        }
        neigh_pre.push(pres);
    }
    let out_pre = concat.matmul(&layer.w.value)?;
    let mut out = out_pre.clone();
    for x in out.data_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
    Ok((out, LayerCache { input: h.clone(), neigh_pre, concat, out_pre }))
}

/// One graph convolution over node representations `h`, aligned with
/// `pg.nodes`. Standalone entry point; training uses the cached variant.
pub fn gcn_layer_forward(h: &Matrix, pg: &PivotGraph, layer: &GcnLayer) -> Result<Matrix> {
    let scales = edge_scales(pg);
    layer_forward(h, pg, &scales, layer).map(|(out, _)| out)
}

fn layer_backward(
    pg: &PivotGraph,
    scales: &[Vec<f64>],
    layer: &mut GcnLayer,
    cache: &LayerCache,
    dout: &Matrix,
) -> Result<Matrix> {
    let k = pg.len();
    let d_in = layer.w_g.value.rows();
    // through the output ReLU
    let mut dpre = dout.clone();
    for (g, &pre) in dpre.data_mut().iter_mut().zip(cache.out_pre.data()) {
        if pre <= 0.0 {
            *g = 0.0;
        }
    }
    layer.w.grad.axpy(1.0, &cache.concat.transpose().matmul(&dpre)?);
    let dconcat = dpre.matmul(&layer.w.value.transpose())?;

    let mut dinput = Matrix::zeros(k, d_in);
    for v in 0..k {
        let drow = dconcat.row(v);
        for (g, &x) in dinput.row_mut(v).iter_mut().zip(&drow[..d_in]) {
            *g += x;
        }
        let dagg = &drow[d_in..];
        let mut dz = vec![0.0; d_in];
        for (idx, &u) in pg.linked_neighbors[v].iter().enumerate() {
            let z = &cache.neigh_pre[v][idx];
            let s = scales[v][idx];
            let mut any = false;
            for b in 0..d_in {
                dz[b] = if z[b] > 0.0 { dagg[b] } else { 0.0 };
                any |= dz[b] != 0.0;
            }
            if !any {
                continue;
            }
            for (g, &d) in layer.b_g.grad.row_mut(0).iter_mut().zip(&dz) {
                *g += d;
            }
            let hu = cache.input.row(u);
            let ParamGrad { value, grad, .. } = &mut layer.w_g;
            let din_u = dinput.row_mut(u);
            for a in 0..d_in {
                let x = s * hu[a];
                let wrow = value.row(a);
                let grow = grad.row_mut(a);
                let mut acc = 0.0;
                for b in 0..d_in {
                    grow[b] += x * dz[b];
                    acc += dz[b] * wrow[b];
                }
                din_u[a] += s * acc;
            }
        }
    }
    Ok(dinput)
}

/// Forward pass keeping the activations needed by [`backward`].
pub fn forward_cached(pg: &PivotGraph, model: &GcnModel) -> Result<(Vec<f64>, GcnCache)> {
    if pg.node_features.cols() != model.dims[0] {
        return Err(Error::Dim(format!(
            "graph features dim {} vs model input dim {}",
            pg.node_features.cols(),
            model.dims[0]
        )));
    }
    let scales = edge_scales(pg);
    let mut h = pg.node_features.clone();
    let mut layers = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let (out, cache) = layer_forward(&h, pg, &scales, layer)?;
        layers.push(cache);
        h = out;
    }
    let logits = affine_forward(&h, &model.readout_w.value, model.readout_b.value.row(0))?;
    let soft = softmax_rows(&logits);
    let probs: Vec<f64> = (0..pg.len()).map(|v| soft.get(v, 1)).collect();
    Ok((probs.clone(), GcnCache { scales, layers, features: h, probs }))
}

/// Per-node probability that the node shares the pivot's identity.
pub fn gcn_forward(pg: &PivotGraph, model: &GcnModel) -> Result<Vec<f64>> {
    forward_cached(pg, model).map(|(p, _)| p)
}

/// Accumulates parameter gradients for `d loss / d p` in `dp`.
pub fn backward(
    pg: &PivotGraph,
    model: &mut GcnModel,
    cache: &GcnCache,
    dp: &[f64],
) -> Result<()> {
    let k = pg.len();
    let mut dlogits = Matrix::zeros(k, 2);
    for v in 0..k {
        // p = softmax(z)[1], so dp/dz1 = p(1-p) and dp/dz0 is its negation
        let g = dp[v] * cache.probs[v] * (1.0 - cache.probs[v]);
        dlogits.set(v, 0, -g);
        dlogits.set(v, 1, g);
    }
    model.readout_w.grad.axpy(1.0, &cache.features.transpose().matmul(&dlogits)?);
    model.readout_b.grad.axpy(1.0, &col_sums(&dlogits));
    let mut d = dlogits.matmul(&model.readout_w.value.transpose())?;
    for (layer, lcache) in model.layers.iter_mut().zip(&cache.layers).rev() {
        d = layer_backward(pg, &cache.scales, layer, lcache, &d)?;
    }
    Ok(())
}

/// Mean binary cross-entropy of per-node probabilities against 0/1 labels,
/// with probabilities clamped away from the log singularities. Returns the
/// loss and `d loss / d p`.
pub fn gcn_loss(p: &[f64], y: &[u8]) -> Result<(f64, Vec<f64>)> {
    if p.len() != y.len() {
        return Err(Error::Dim(format!("{} probabilities vs {} labels", p.len(), y.len())));
    }
    if p.is_empty() {
        return Err(Error::Degenerate("empty node set".into()));
    }
    if let Some(&bad) = y.iter().find(|&&l| l > 1) {
        return Err(Error::Config(format!("label {bad} is not binary")));
    }
    let n = p.len() as f64;
    let mut loss = 0.0;
    let mut dp = Vec::with_capacity(p.len());
    for (&pv, &yv) in p.iter().zip(y) {
        let pc = pv.clamp(PROB_EPS, 1.0 - PROB_EPS);
        loss -= if yv == 1 { pc.ln() } else { (1.0 - pc).ln() };
        dp.push((pc - f64::from(yv)) / (pc * (1.0 - pc)) / n);
    }
    Ok((loss / n, dp))
}

/// Trains the link predictor on labeled source data: every iteration
/// samples `graphs_per_batch` pivots uniformly, averages their
/// cross-entropy, and takes one SGD step with weight decay. Returns the
/// model and the per-iteration loss trace.
pub fn gcn_train(
    source: &EmbeddingSet,
    kp: &KnnParams,
    cfg: &GcnTrainConfig,
) -> Result<(GcnModel, Vec<f64>)> {
    cfg.validate()?;
    kp.validate()?;
    let n = source.len();
    if n < 2 {
        return Err(Error::Degenerate(format!("cannot build pivot graphs over {n} rows")));
    }
    let knn = knn_search(&source.features, kp.max_k().min(n - 1), true)?;
    let mut dims = vec![source.features.cols()];
    dims.extend_from_slice(&cfg.hidden_dims);
    let mut rng = seeded_rng(cfg.seed);
    let mut model = GcnModel::new(&dims, &mut rng)?;
    let mut vels: Vec<Matrix> = model
        .params()
        .iter()
        .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
        .collect();
    let mut graphs: HashMap<usize, PivotGraph> = HashMap::new();
    let mut trace = Vec::with_capacity(cfg.iterations);
    let batch = cfg.graphs_per_batch as f64;
    for it in 0..cfg.iterations {
        model.zero_grads();
        let mut batch_loss = 0.0;
        for _ in 0..cfg.graphs_per_batch {
            let pivot = rng.gen_range(0..n);
            if !graphs.contains_key(&pivot) {
                let pg = build_pivot_graph_from_knn(
                    pivot,
                    &source.features,
                    kp,
                    &knn,
                    Some(&source.labels),
                )?;
                graphs.insert(pivot, pg);
            }
            let pg = &graphs[&pivot];
            let labels = pg.node_labels.as_ref().expect("labeled construction");
            let (p, cache) = forward_cached(pg, &model)?;
            let (loss, mut dp) = gcn_loss(&p, labels)?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    iteration: it,
                    msg: format!("non-finite loss on pivot {pivot}"),
                });
            }
            for g in &mut dp {
                *g /= batch;
            }
            backward(pg, &mut model, &cache, &dp)?;
            batch_loss += loss / batch;
        }
        for (p, v) in model.params_mut().into_iter().zip(&mut vels) {
            momentum_sgd_step(p, v, cfg.lr, 0.0, cfg.weight_decay);
        }
        trace.push(batch_loss);
    }
    Ok((model, trace))
}

/// Scores every target row as a pivot and symmetrizes the directed
/// predictions into an undirected linkage graph (mean of the available
/// directions). Pivots whose neighborhoods degenerate are skipped with a
/// log line rather than failing the run.
pub fn gcn_infer_linkages(
    target: &EmbeddingSet,
    model: &GcnModel,
    kp: &KnnParams,
) -> Result<LinkageGraph> {
    kp.validate()?;
    let n = target.len();
    if n < 2 {
        return Err(Error::Degenerate(format!("cannot link {n} rows")));
    }
    let knn = knn_search(&target.features, kp.max_k().min(n - 1), true)?;
    let mut acc: HashMap<(usize, usize), (f64, u32)> = HashMap::new();
    for pivot in 0..n {
        let pg = match build_pivot_graph_from_knn(pivot, &target.features, kp, &knn, None) {
            Ok(pg) => pg,
            Err(Error::Degenerate(msg)) => {
                log::warn!("pivot {pivot} contributes no edges: {msg}");
                continue;
            }
            Err(e) => return Err(e),
        };
        let probs = gcn_forward(&pg, model)?;
        for (local, &v) in pg.nodes.iter().enumerate() {
            let key = (pivot.min(v), pivot.max(v));
            let e = acc.entry(key).or_insert((0.0, 0));
            e.0 += probs[local];
            e.1 += 1;
        }
    }
    let edges: Vec<(usize, usize, f64)> =
        acc.into_iter().map(|((i, j), (s, c))| (i, j, s / f64::from(c))).collect();
    LinkageGraph::new(n, edges)
}

/// Writes the model as magic, version, layer widths, then every parameter
/// matrix in declaration order as little-endian f32.
pub fn save_gcn(model: &GcnModel, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    put_u32(&mut buf, model.dims.len() as u32);
    for &d in &model.dims {
        put_u32(&mut buf, d as u32);
    }
    for p in model.params() {
        put_f32_matrix(&mut buf, &p.value);
    }
    std::fs::write(path, buf).map_err(|e| file_err(path, e))
}

pub fn load_gcn(path: &Path) -> Result<GcnModel> {
    let buf = std::fs::read(path).map_err(|e| file_err(path, e))?;
    let mut cur = Cursor::new(&buf);
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format { offset: 0, msg: format!("bad magic {magic:?}") });
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version} (expected {VERSION})"),
        });
    }
    let n_dims = cur.u32("dim count")? as usize;
    if n_dims < 2 {
        return Err(Error::Format { offset: 8, msg: format!("need >= 2 dims, got {n_dims}") });
    }
    let mut dims = Vec::with_capacity(n_dims);
    for _ in 0..n_dims {
        dims.push(cur.u32("dims")? as usize);
    }
    let mut layers = Vec::with_capacity(n_dims - 1);
    for l in 0..n_dims - 1 {
        let (d_in, d_out) = (dims[l], dims[l + 1]);
        layers.push(GcnLayer {
            w_g: ParamGrad::new(
                &format!("gcn{l}.w_g"),
                read_f32_matrix(&mut cur, d_in, d_in, "w_g")?,
            ),
            b_g: ParamGrad::new(
                &format!("gcn{l}.b_g"),
                read_f32_matrix(&mut cur, 1, d_in, "b_g")?,
            ),
            w: ParamGrad::new(
                &format!("gcn{l}.w"),
                read_f32_matrix(&mut cur, 2 * d_in, d_out, "w")?,
            ),
        });
    }
    let d_last = *dims.last().unwrap();
    let readout_w = ParamGrad::new("readout.w", read_f32_matrix(&mut cur, d_last, 2, "readout w")?);
    let readout_b = ParamGrad::new("readout.b", read_f32_matrix(&mut cur, 1, 2, "readout b")?);
    cur.finish()?;
    Ok(GcnModel { layers, readout_w, readout_b, dims })
}
