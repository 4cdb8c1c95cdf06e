//! Three-stage domain-adaptive training of the embedding extractor and its
//! prototype classifiers.
//!
//! Stage 1 pretrains the extractor and source prototypes with
//! classification loss plus kernel feature alignment. Stage 2 adds target
//! prototypes initialized from cluster centroids and finetunes on
//! pseudo-labels. Stage 3 alternates a joint source step, a prototype step
//! that lowers the mutual-information loss, and an extractor step that
//! raises it (min before max).
//!
//! Gradients are the hand-derived backward passes of the losses module
//! chained through the extractor; the only optimizer is momentum SGD.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasynth::{put_f32_matrix, put_u32, read_f32_matrix, Cursor, EmbeddingSet};
use crate::error::{file_err, Error, Result};
use crate::graph::ClusterAssignment;
use crate::losses::{margin_softmax, mi_loss_from_logits, mmd2, MmdConfig};
use crate::metrics::intra_domain_gap;
use crate::numerics::{
    affine_forward, col_sums, dot, momentum_sgd_step, norm, seeded_rng, Matrix, ParamGrad,
};

const MAGIC: &[u8; 4] = b"AINM";
const VERSION: u32 = 1;
const NORM_EPS: f64 = 1e-12;

/// Classification loss family for prototype logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Softmax cross-entropy on raw cosine logits.
    Plain,
    /// Additive angular margin on scaled cosine logits.
    Margin,
}

/// Hyperparameters shared by all three stages. `seed` drives every batch
/// draw of the stage that receives this config.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    /// Weight of the pseudo-label loss in stage 2.
    pub alpha: f64,
    /// Weight of the feature-alignment term in stages 1 and 3.
    pub beta: f64,
    /// Weight of the mutual-information term in the prototype min step.
    pub lambda1: f64,
    /// Weight of the mutual-information term in the extractor max step.
    pub lambda2: f64,
    /// Marginal-entropy weight inside the mutual-information loss.
    pub gamma: f64,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub lr_stage3: f64,
    pub iters_stage1: usize,
    pub iters_stage2: usize,
    pub iters_stage3: usize,
    pub batch_source: usize,
    pub batch_target: usize,
    pub source_loss: LossKind,
    pub pseudo_loss: LossKind,
    /// Cosine scale when a margin loss is selected.
    pub margin_s: f64,
    /// Additive angular margin in radians.
    pub margin_m: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Extractor layer widths after the input layer; the last entry is the
    /// embedding dimension.
    pub extractor_dims: Vec<usize>,
    pub mmd: MmdConfig,
    pub seed: u64,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            alpha: 1.0,
            beta: 10.0,
            lambda1: 0.5,
            lambda2: 25.0,
            gamma: 0.2,
            lr_stage1: 1e-2,
            lr_stage2: 1e-3,
            lr_stage3: 1e-4,
            iters_stage1: 300,
            iters_stage2: 150,
            iters_stage3: 80,
            batch_source: 64,
            batch_target: 64,
            source_loss: LossKind::Plain,
            pseudo_loss: LossKind::Plain,
            margin_s: 64.0,
            margin_m: 0.5,
            momentum: 0.9,
            weight_decay: 5e-4,
            extractor_dims: vec![64, 32],
            mmd: MmdConfig::default(),
            seed: 0,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lr_stage1", self.lr_stage1),
            ("lr_stage2", self.lr_stage2),
            ("lr_stage3", self.lr_stage3),
            ("margin_s", self.margin_s),
            ("lambda2", self.lambda2),
        ] {
            if v <= 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("weight_decay", self.weight_decay),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !self.lambda1.is_finite() {
            return Err(Error::Config("lambda1 must be finite".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.batch_source == 0 || self.batch_target == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if self.extractor_dims.is_empty() || self.extractor_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("bad extractor widths {:?}", self.extractor_dims)));
        }
        self.mmd.validate()
    }

    fn margin_params(&self, kind: LossKind) -> (f64, f64) {
        match kind {
            LossKind::Plain => (1.0, 0.0),
            LossKind::Margin => (self.margin_s, self.margin_m),
        }
    }

    /// Scale applied to the cosine logits feeding the mutual-information
    /// loss; follows the pseudo-label loss kind.
    fn mi_scale(&self) -> f64 {
        self.margin_params(self.pseudo_loss).0
    }
}

/// One affine extractor layer.
#[derive(Clone, Debug)]
pub struct AffineLayer {
    pub w: ParamGrad,
    pub b: ParamGrad,
}

/// Extractor plus prototype heads. The extractor applies ReLU between
/// layers, leaves the last layer linear, and L2-normalizes its output.
/// `w_s` holds one column per source class; `w_t` is allocated when target
/// pseudo-labels first exist.
#[derive(Clone, Debug)]
pub struct AdaptModel {
    pub layers: Vec<AffineLayer>,
    pub w_s: ParamGrad,
    pub w_t: Option<ParamGrad>,
    pub dims: Vec<usize>,
}

impl AdaptModel {
    pub fn new(
        input_dim: usize,
        widths: &[usize],
        n_source_classes: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<AdaptModel> {
        if widths.is_empty() || widths.iter().any(|&d| d == 0) || input_dim == 0 {
            return Err(Error::Config(format!(
                "bad extractor shape: input {input_dim}, widths {widths:?}"
            )));
        }
        if n_source_classes == 0 {
            return Err(Error::Config("need at least one source class".into()));
        }
        let mut dims = vec![input_dim];
        dims.extend_from_slice(widths);
        let mut layers = Vec::with_capacity(widths.len());
        for l in 0..dims.len() - 1 {
            layers.push(AffineLayer {
                w: ParamGrad::new(
                    &format!("extractor{l}.w"),
                    Matrix::glorot_uniform(dims[l], dims[l + 1], rng),
                ),
                b: ParamGrad::new(&format!("extractor{l}.b"), Matrix::zeros(1, dims[l + 1])),
            });
        }
        let d_out = *dims.last().unwrap();
        Ok(AdaptModel {
            layers,
            w_s: ParamGrad::new("w_s", Matrix::glorot_uniform(d_out, n_source_classes, rng)),
            w_t: None,
            dims,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn extractor_params_mut(&mut self) -> Vec<&mut ParamGrad> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out
    }

    pub fn extractor_params(&self) -> Vec<&ParamGrad> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.w);
            out.push(&l.b);
        }
        out
    }

    fn joint_params_mut(&mut self) -> Vec<&mut ParamGrad> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out.push(&mut self.w_s);
        out
    }

    pub fn zero_grads(&mut self) {
        for p in self.extractor_params_mut() {
            p.zero_grad();
        }
        self.w_s.zero_grad();
        if let Some(wt) = &mut self.w_t {
            wt.zero_grad();
        }
    }

    fn extractor_velocities(&self) -> Vec<Matrix> {
        self.extractor_params()
            .iter()
            .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
            .collect()
    }

    fn target_prototypes(&self) -> Result<&ParamGrad> {
        self.w_t
            .as_ref()
            .ok_or_else(|| Error::Config("target prototypes not allocated (run stage 2)".into()))
    }
}

/// Opaque forward-pass state consumed by [`extractor_backward`].
pub struct ExtractorCache {
    inputs: Vec<Matrix>, // input of each layer; inputs[0] is the raw batch
    pre: Vec<Matrix>,    // pre-activation of each layer
    norms: Vec<f64>,     // row norms of the final pre-activation
    output: Matrix,      // L2-normalized final representation
}

impl ExtractorCache {
    /// Post-activation output of layer `l` (normalized for the last layer).
    fn activation(&self, l: usize) -> &Matrix {
        if l + 1 == self.pre.len() {
            &self.output
        } else {
            &self.inputs[l + 1]
        }
    }
}

/// Forward pass through the extractor keeping the state needed by
/// [`extractor_backward`]. The first return value is the normalized output.
pub fn extractor_forward(model: &AdaptModel, x: &Matrix) -> Result<(Matrix, ExtractorCache)> {
    let n_layers = model.layers.len();
    let mut inputs = vec![x.clone()];
    let mut pre = Vec::with_capacity(n_layers);
    for (l, layer) in model.layers.iter().enumerate() {
        let z = affine_forward(&inputs[l], &layer.w.value, layer.b.value.row(0))?;
        pre.push(z.clone());
        if l + 1 < n_layers {
            let mut h = z;
            for v in h.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            inputs.push(h);
        }
    }
    let raw = pre.last().unwrap();
    let mut output = raw.clone();
    let mut norms = Vec::with_capacity(raw.rows());
    for i in 0..raw.rows() {
        let n = norm(raw.row(i));
        norms.push(n);
        if n > NORM_EPS {
            for v in output.row_mut(i) {
                *v /= n;
            }
        }
    }
    Ok((output.clone(), ExtractorCache { inputs, pre, norms, output }))
}

/// The normalized embedding of each row of `x`.
pub fn embed(model: &AdaptModel, x: &Matrix) -> Result<Matrix> {
    extractor_forward(model, x).map(|(y, _)| y)
}

/// Accumulates extractor gradients for an output-space gradient plus any
/// extra gradients injected at hidden activations (`(layer, grad)` with
/// `layer` strictly before the last).
pub fn extractor_backward(
    model: &mut AdaptModel,
    cache: &ExtractorCache,
    d_output: &Matrix,
    d_hidden: &[(usize, Matrix)],
) -> Result<()> {
    let n_layers = model.layers.len();
    debug_assert!(d_hidden.iter().all(|&(l, _)| l + 1 < n_layers));
    // through the row normalization: y = z / max(|z|, eps)
    let raw = &cache.pre[n_layers - 1];
    let mut d = Matrix::zeros(raw.rows(), raw.cols());
    for i in 0..raw.rows() {
        let n = cache.norms[i];
        let dy = d_output.row(i);
        let out = d.row_mut(i);
        if n <= NORM_EPS {
            out.copy_from_slice(dy);
        } else {
            let y = cache.output.row(i);
            let proj = dot(dy, y);
            for k in 0..out.len() {
                out[k] = (dy[k] - proj * y[k]) / n;
            }
        }
    }
    for l in (0..n_layers).rev() {
        let layer = &mut model.layers[l];
        layer.w.grad.axpy(1.0, &cache.inputs[l].transpose().matmul(&d)?);
        layer.b.grad.axpy(1.0, &col_sums(&d));
        if l == 0 {
            break;
        }
        let mut dh = d.matmul(&layer.w.value.transpose())?;
        for (idx, g) in d_hidden {
            if *idx == l - 1 {
                dh.axpy(1.0, g);
            }
        }
        for (v, &z) in dh.data_mut().iter_mut().zip(cache.pre[l - 1].data()) {
            if z <= 0.0 {
                *v = 0.0;
            }
        }
        d = dh;
    }
    Ok(())
}

struct ProtoCache {
    v: Matrix, // column-normalized prototypes
    col_norms: Vec<f64>,
    scale: f64,
}

/// Scaled cosine logits of unit features against prototype columns.
fn proto_logits(y: &Matrix, w: &Matrix, scale: f64) -> Result<(Matrix, ProtoCache)> {
    let mut col_norms = Vec::with_capacity(w.cols());
    for j in 0..w.cols() {
        let n = norm(&w.col(j));
        if n <= NORM_EPS {
            return Err(Error::Degenerate(format!("prototype column {j} has zero norm")));
        }
        col_norms.push(n);
    }
    let mut v = w.clone();
    for i in 0..w.rows() {
        for (j, x) in v.row_mut(i).iter_mut().enumerate() {
            *x /= col_norms[j];
        }
    }
    let logits = y.matmul(&v)?.scale(scale);
    Ok((logits, ProtoCache { v, col_norms, scale }))
}

/// Chains a logit gradient back to the features and the raw prototypes.
fn proto_backward(dlogits: &Matrix, y: &Matrix, cache: &ProtoCache) -> Result<(Matrix, Matrix)> {
    let dcos = dlogits.scale(cache.scale);
    let dy = dcos.matmul(&cache.v.transpose())?;
    let dv = y.transpose().matmul(&dcos)?;
    let (d, c) = (dv.rows(), dv.cols());
    let mut dw = Matrix::zeros(d, c);
    for j in 0..c {
        let mut proj = 0.0;
        for k in 0..d {
            proj += dv.get(k, j) * cache.v.get(k, j);
        }
        for k in 0..d {
            dw.set(k, j, (dv.get(k, j) - proj * cache.v.get(k, j)) / cache.col_norms[j]);
        }
    }
    Ok((dy, dw))
}

/// Prototype classification loss of either kind. Returns the loss with
/// gradients for the (unit) features and the raw prototype matrix.
fn class_loss(
    y: &Matrix,
    w: &Matrix,
    labels: &[usize],
    kind: LossKind,
    cfg: &StageConfig,
) -> Result<(f64, Matrix, Matrix)> {
    let (s, m) = cfg.margin_params(kind);
    margin_softmax(y, w, labels, s, m)
}

fn to_class_labels(ls: &[i64]) -> Result<Vec<usize>> {
    ls.iter()
        .map(|&l| {
            usize::try_from(l)
                .map_err(|_| Error::Index(format!("label {l} is not a valid class id")))
        })
        .collect()
}

fn sample_rows(rng: &mut rand_chacha::ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|_| rng.gen_range(0..n)).collect()
}

/// Which extractor activations the alignment term taps: the configured
/// list, or the last two when unspecified.
fn mmd_taps(n_layers: usize, cfg: &MmdConfig) -> Result<Vec<usize>> {
    if cfg.layers.is_empty() {
        Ok(if n_layers >= 2 { vec![n_layers - 2, n_layers - 1] } else { vec![n_layers - 1] })
    } else {
        if let Some(&bad) = cfg.layers.iter().find(|&&l| l >= n_layers) {
            return Err(Error::Config(format!(
                "alignment tap {bad} out of range for {n_layers} layers"
            )));
        }
        Ok(cfg.layers.clone())
    }
}

/// One joint SGD step on the extractor and source prototypes for the
/// classification plus alignment objective. Returns the classification
/// loss and the summed alignment value when it was computed.
fn joint_step(
    model: &mut AdaptModel,
    sx: &Matrix,
    sy: &[usize],
    tx: Option<&Matrix>,
    cfg: &StageConfig,
    lr: f64,
    vels: &mut [Matrix],
    iteration: usize,
) -> Result<(f64, Option<f64>)> {
    model.zero_grads();
    let (ys, cache_s) = extractor_forward(model, sx)?;
    let (l_s, dys, dws) = class_loss(&ys, &model.w_s.value, sy, cfg.source_loss, cfg)?;
    let mut d_out_s = dys;
    let mut d_hidden_s: Vec<(usize, Matrix)> = Vec::new();
    let mut mmd_total = None;
    if cfg.beta != 0.0 {
        let tx = tx.ok_or_else(|| {
            Error::Config("nonzero alignment weight requires a target batch".into())
        })?;
        let (yt, cache_t) = extractor_forward(model, tx)?;
        let taps = mmd_taps(model.layers.len(), &cfg.mmd)?;
        let last = model.layers.len() - 1;
        let mut total = 0.0;
        let mut d_out_t = Matrix::zeros(yt.rows(), yt.cols());
        let mut d_hidden_t: Vec<(usize, Matrix)> = Vec::new();
        for &l in &taps {
            let (v, dxs, dxt) = mmd2(cache_s.activation(l), cache_t.activation(l), &cfg.mmd)?;
            total += v;
            if l == last {
                d_out_s.axpy(cfg.beta, &dxs);
                d_out_t.axpy(cfg.beta, &dxt);
            } else {
                d_hidden_s.push((l, dxs.scale(cfg.beta)));
                d_hidden_t.push((l, dxt.scale(cfg.beta)));
            }
        }
        extractor_backward(model, &cache_t, &d_out_t, &d_hidden_t)?;
        mmd_total = Some(total);
    }
    let loss = l_s + cfg.beta * mmd_total.unwrap_or(0.0);
    if !loss.is_finite() {
        return Err(Error::Training {
            iteration,
            msg: format!("non-finite joint loss {loss}"),
        });
    }
    extractor_backward(model, &cache_s, &d_out_s, &d_hidden_s)?;
    model.w_s.grad.axpy(1.0, &dws);
    for (p, v) in model.joint_params_mut().into_iter().zip(vels) {
        momentum_sgd_step(p, v, lr, cfg.momentum, cfg.weight_decay);
    }
    Ok((l_s, mmd_total))
}

/// One training trace entry; absent losses were not part of the step.
#[derive(Clone, Debug, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub l_s: Option<f64>,
    pub l_t: Option<f64>,
    pub l_m: Option<f64>,
    pub mmd2: Option<f64>,
    pub gap: Option<f64>,
}

impl TraceRow {
    fn empty(iteration: usize) -> TraceRow {
        TraceRow { iteration, l_s: None, l_t: None, l_m: None, mmd2: None, gap: None }
    }
}

/// Renders trace rows as CSV with blank cells for absent values.
pub fn trace_to_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("iteration,L_S,L_T,L_M,MMD2,G\n");
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.iteration,
            cell(r.l_s),
            cell(r.l_t),
            cell(r.l_m),
            cell(r.mmd2),
            cell(r.gap)
        ));
    }
    out
}

/// Stage 1: minimize source classification loss plus `beta` times the
/// feature-alignment term over extractor and source prototypes.
pub fn pretrain(
    mut model: AdaptModel,
    source: &EmbeddingSet,
    target: &EmbeddingSet,
    cfg: &StageConfig,
) -> Result<(AdaptModel, Vec<TraceRow>)> {
    cfg.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(Error::Degenerate("empty domain".into()));
    }
    let src_labels = to_class_labels(&source.labels)?;
    let mut rng = seeded_rng(cfg.seed);
    let mut vels = model.extractor_velocities();
    vels.push(Matrix::zeros(model.w_s.value.rows(), model.w_s.value.cols()));
    let mut trace = Vec::with_capacity(cfg.iters_stage1);
    for it in 0..cfg.iters_stage1 {
        let si = sample_rows(&mut rng, source.len(), cfg.batch_source);
        let sx = source.features.select_rows(&si);
        let sy: Vec<usize> = si.iter().map(|&i| src_labels[i]).collect();
        // a zero alignment weight must leave the run independent of the
        // target set, so the batch is not even sampled then
        let tx = (cfg.beta != 0.0).then(|| {
            let ti = sample_rows(&mut rng, target.len(), cfg.batch_target);
            target.features.select_rows(&ti)
        });
        let (l_s, mmd) =
            joint_step(&mut model, &sx, &sy, tx.as_ref(), cfg, cfg.lr_stage1, &mut vels, it)?;
        trace.push(TraceRow { l_s: Some(l_s), mmd2: mmd, ..TraceRow::empty(it) });
    }
    Ok((model, trace))
}

/// Allocates target prototypes: one column per cluster, each the normalized
/// centroid of the cluster's current embeddings.
pub fn init_target_prototypes(
    model: &mut AdaptModel,
    target: &EmbeddingSet,
    pseudo: &ClusterAssignment,
) -> Result<()> {
    if pseudo.len() != target.len() {
        return Err(Error::Dim(format!(
            "{} pseudo labels for {} target rows",
            pseudo.len(),
            target.len()
        )));
    }
    if pseudo.n_clusters() == 0 {
        return Err(Error::Config(
            "every row is unassigned; clustering produced no usable pseudo-labels".into(),
        ));
    }
    let y = embed(model, &target.features)?;
    let d = model.embedding_dim();
    let mut wt = Matrix::zeros(d, pseudo.n_clusters());
    for c in 0..pseudo.n_clusters() {
        let rows: Vec<usize> = (0..pseudo.len())
            .filter(|&i| pseudo.labels()[i] == c as i64)
            .collect();
        let mut centroid = vec![0.0; d];
        for &i in &rows {
            for (acc, &v) in centroid.iter_mut().zip(y.row(i)) {
                *acc += v / rows.len() as f64;
            }
        }
        let n = norm(&centroid);
        if n <= NORM_EPS {
            return Err(Error::Degenerate(format!("cluster {c} centroid has zero norm")));
        }
        for (k, v) in centroid.iter().enumerate() {
            wt.set(k, c, v / n);
        }
    }
    model.w_t = Some(ParamGrad::new("w_t", wt));
    Ok(())
}

/// Withholds a random probe from a clustering: the chosen rows lose their
/// pseudo-label and join the unlabeled pool that the gap metric and the
/// prototype min step consume. Clusters reduced below two members are
/// demoted entirely (a one-member pseudo-class is a singleton) and the
/// surviving cluster ids are renumbered densely. The same `(fraction,
/// seed)` pair always withholds the same rows, so separate stages agree on
/// the split without sharing state.
pub fn hold_out_probe(
    pseudo: &ClusterAssignment,
    fraction: f64,
    seed: u64,
) -> Result<ClusterAssignment> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("probe fraction {fraction} outside [0, 1)")));
    }
    let labeled: Vec<usize> =
        (0..pseudo.len()).filter(|&i| pseudo.labels()[i] >= 0).collect();
    let n_probe = (fraction * labeled.len() as f64).round() as usize;
    let mut labels = pseudo.labels().to_vec();
    if n_probe > 0 {
        let mut rng = seeded_rng(seed);
        for idx in rand::seq::index::sample(&mut rng, labeled.len(), n_probe) {
            labels[labeled[idx]] = -1;
        }
    }
    let mut sizes = vec![0usize; pseudo.n_clusters()];
    for &l in &labels {
        if l >= 0 {
            sizes[l as usize] += 1;
        }
    }
    let mut remap = vec![-1i64; pseudo.n_clusters()];
    let mut next = 0i64;
    for (c, &s) in sizes.iter().enumerate() {
        if s >= 2 {
            remap[c] = next;
            next += 1;
        }
    }
    for l in labels.iter_mut() {
        if *l >= 0 {
            *l = remap[*l as usize];
        }
    }
    ClusterAssignment::new(labels)
}

/// Stage 2: allocate target prototypes from the clustering, then minimize
/// source loss plus `alpha` times the pseudo-label loss. Only rows with a
/// pseudo-label feed the target term; with `alpha = 0` the target
/// prototypes keep their initialization (no step is applied to them).
pub fn stage2_finetune(
    mut model: AdaptModel,
    source: &EmbeddingSet,
    target: &EmbeddingSet,
    pseudo: &ClusterAssignment,
    cfg: &StageConfig,
) -> Result<(AdaptModel, Vec<TraceRow>)> {
    cfg.validate()?;
    init_target_prototypes(&mut model, target, pseudo)?;
    let src_labels = to_class_labels(&source.labels)?;
    let labeled_rows: Vec<usize> =
        (0..pseudo.len()).filter(|&i| pseudo.labels()[i] >= 0).collect();
    let pseudo_of: Vec<usize> = labeled_rows.iter().map(|&i| pseudo.labels()[i] as usize).collect();
    let mut rng = seeded_rng(cfg.seed);
    let mut vels = model.extractor_velocities();
    vels.push(Matrix::zeros(model.w_s.value.rows(), model.w_s.value.cols()));
    let wt_shape = {
        let wt = model.target_prototypes()?;
        (wt.value.rows(), wt.value.cols())
    };
    let mut vel_wt = Matrix::zeros(wt_shape.0, wt_shape.1);
    let mut trace = Vec::with_capacity(cfg.iters_stage2);
    for it in 0..cfg.iters_stage2 {
        let si = sample_rows(&mut rng, source.len(), cfg.batch_source);
        let pi = sample_rows(&mut rng, labeled_rows.len(), cfg.batch_target);
        model.zero_grads();

        let sx = source.features.select_rows(&si);
        let sy: Vec<usize> = si.iter().map(|&i| src_labels[i]).collect();
        let (ys, cache_s) = extractor_forward(&model, &sx)?;
        let (l_s, dys, dws) = class_loss(&ys, &model.w_s.value, &sy, cfg.source_loss, cfg)?;
        extractor_backward(&mut model, &cache_s, &dys, &[])?;
        model.w_s.grad.axpy(1.0, &dws);

        let tx = target.features.select_rows(&pi.iter().map(|&i| labeled_rows[i]).collect::<Vec<_>>());
        let ty: Vec<usize> = pi.iter().map(|&i| pseudo_of[i]).collect();
        let (yt, cache_t) = extractor_forward(&model, &tx)?;
        let wt_value = model.target_prototypes()?.value.clone();
        let (l_t, dyt, dwt) = class_loss(&yt, &wt_value, &ty, cfg.pseudo_loss, cfg)?;
        let loss = l_s + cfg.alpha * l_t;
        if !loss.is_finite() {
            return Err(Error::Training {
                iteration: it,
                msg: format!("non-finite stage-2 loss {loss}"),
            });
        }
        if cfg.alpha != 0.0 {
            extractor_backward(&mut model, &cache_t, &dyt.scale(cfg.alpha), &[])?;
            let wt = model.w_t.as_mut().unwrap();
            wt.grad.axpy(cfg.alpha, &dwt);
        }

        for (p, v) in model.joint_params_mut().into_iter().zip(&mut vels) {
            momentum_sgd_step(p, v, cfg.lr_stage2, cfg.momentum, cfg.weight_decay);
        }
        if cfg.alpha != 0.0 {
            let wt = model.w_t.as_mut().unwrap();
            momentum_sgd_step(wt, &mut vel_wt, cfg.lr_stage2, cfg.momentum, cfg.weight_decay);
        }
        trace.push(TraceRow { l_s: Some(l_s), l_t: Some(l_t), ..TraceRow::empty(it) });
    }
    Ok((model, trace))
}

/// One SGD step on the target prototypes minimizing `lambda1` times the
/// mutual-information loss over the unlabeled batch plus the pseudo-label
/// loss over the labeled batch. The extractor and source prototypes are
/// frozen. Empty batches drop their term; if both are empty nothing moves.
/// Returns the two loss values that were computed.
pub fn min_step(
    model: &mut AdaptModel,
    x_u: &Matrix,
    x_p: &Matrix,
    pseudo_labels: &[usize],
    cfg: &StageConfig,
    vel_wt: &mut Matrix,
) -> Result<(Option<f64>, Option<f64>)> {
    model.target_prototypes()?;
    if x_p.rows() != pseudo_labels.len() {
        return Err(Error::Dim(format!(
            "{} pseudo labels for {} rows",
            pseudo_labels.len(),
            x_p.rows()
        )));
    }
    let mut l_m = None;
    let mut l_t = None;
    let mut grad = {
        let wt = model.target_prototypes()?;
        Matrix::zeros(wt.value.rows(), wt.value.cols())
    };
    if x_u.rows() > 0 {
        let y_u = embed(model, x_u)?;
        let wt_value = model.target_prototypes()?.value.clone();
        let (logits, cache) = proto_logits(&y_u, &wt_value, cfg.mi_scale())?;
        let (lm, dlogits) = mi_loss_from_logits(&logits, cfg.gamma);
        let (_, dw) = proto_backward(&dlogits, &y_u, &cache)?;
        grad.axpy(cfg.lambda1, &dw);
        l_m = Some(lm);
    }
    if x_p.rows() > 0 {
        let y_p = embed(model, x_p)?;
        let wt_value = model.target_prototypes()?.value.clone();
        let (lt, _, dwt) = class_loss(&y_p, &wt_value, pseudo_labels, cfg.pseudo_loss, cfg)?;
        grad.axpy(1.0, &dwt);
        l_t = Some(lt);
    }
    if l_m.is_some() || l_t.is_some() {
        let wt = model.w_t.as_mut().unwrap();
        wt.zero_grad();
        wt.grad.axpy(1.0, &grad);
        momentum_sgd_step(wt, vel_wt, cfg.lr_stage3, cfg.momentum, cfg.weight_decay);
    }
    Ok((l_m, l_t))
}

/// One gradient-ascent step on the extractor maximizing `lambda2` times the
/// mutual-information loss over the target batch. Prototypes are frozen;
/// with `lambda2 = 0` no parameter moves. Returns the loss value.
pub fn max_step(
    model: &mut AdaptModel,
    x_t: &Matrix,
    cfg: &StageConfig,
    vels: &mut [Matrix],
) -> Result<f64> {
    let wt_value = model.target_prototypes()?.value.clone();
    let (y, cache) = extractor_forward(model, x_t)?;
    let (logits, pcache) = proto_logits(&y, &wt_value, cfg.mi_scale())?;
    let (l_m, dlogits) = mi_loss_from_logits(&logits, cfg.gamma);
    if cfg.lambda2 == 0.0 {
        return Ok(l_m);
    }
    let (dy, _) = proto_backward(&dlogits, &y, &pcache)?;
    for p in model.extractor_params_mut() {
        p.zero_grad();
    }
    // ascend by descending the negated objective
    extractor_backward(model, &cache, &dy.scale(-cfg.lambda2), &[])?;
    for (p, v) in model.extractor_params_mut().into_iter().zip(vels) {
        momentum_sgd_step(p, v, cfg.lr_stage3, cfg.momentum, cfg.weight_decay);
    }
    Ok(l_m)
}

/// Stage 3: per iteration, one joint source+alignment step, then the
/// prototype min step, then the extractor max step, sharing a single
/// target batch draw. When `probe_truth` is supplied the compactness gap
/// over the full target set is appended to each trace row.
pub fn adversarial_stage(
    mut model: AdaptModel,
    source: &EmbeddingSet,
    target: &EmbeddingSet,
    pseudo: &ClusterAssignment,
    cfg: &StageConfig,
    probe_truth: Option<&[i64]>,
) -> Result<(AdaptModel, Vec<TraceRow>)> {
    cfg.validate()?;
    model.target_prototypes()?;
    if pseudo.len() != target.len() {
        return Err(Error::Dim(format!(
            "{} pseudo labels for {} target rows",
            pseudo.len(),
            target.len()
        )));
    }
    let src_labels = to_class_labels(&source.labels)?;
    let mut rng = seeded_rng(cfg.seed);
    let mut vels_joint = model.extractor_velocities();
    vels_joint.push(Matrix::zeros(model.w_s.value.rows(), model.w_s.value.cols()));
    let mut vels_max = model.extractor_velocities();
    let mut vel_wt = {
        let wt = model.target_prototypes()?;
        Matrix::zeros(wt.value.rows(), wt.value.cols())
    };
    let mut trace: Vec<TraceRow> = Vec::with_capacity(cfg.iters_stage3);
    for it in 0..cfg.iters_stage3 {
        let si = sample_rows(&mut rng, source.len(), cfg.batch_source);
        let ti = sample_rows(&mut rng, target.len(), cfg.batch_target);
        let sx = source.features.select_rows(&si);
        let sy: Vec<usize> = si.iter().map(|&i| src_labels[i]).collect();
        let tx = target.features.select_rows(&ti);

        let step = (|| -> Result<TraceRow> {
            let (l_s, mmd) =
                joint_step(&mut model, &sx, &sy, Some(&tx), cfg, cfg.lr_stage3, &mut vels_joint, it)?;
            let u_rows: Vec<usize> =
                ti.iter().copied().filter(|&i| pseudo.labels()[i] < 0).collect();
            let p_rows: Vec<usize> =
                ti.iter().copied().filter(|&i| pseudo.labels()[i] >= 0).collect();
            let x_u = target.features.select_rows(&u_rows);
            let x_p = target.features.select_rows(&p_rows);
            let p_labels: Vec<usize> =
                p_rows.iter().map(|&i| pseudo.labels()[i] as usize).collect();
            let (l_m_u, l_t) = min_step(&mut model, &x_u, &x_p, &p_labels, cfg, &mut vel_wt)?;
            let l_m = max_step(&mut model, &tx, cfg, &mut vels_max)?;
            let _ = l_m_u;
            if !l_m.is_finite() || l_t.map_or(false, |v| !v.is_finite()) {
                return Err(Error::Training {
                    iteration: it,
                    msg: "non-finite adversarial loss".into(),
                });
            }
            let gap = match probe_truth {
                Some(truth) => {
                    let y = embed(&model, &target.features)?;
                    Some(intra_domain_gap(&y, pseudo, truth)?.gap)
                }
                None => None,
            };
            Ok(TraceRow { iteration: it, l_s: Some(l_s), l_t, l_m: Some(l_m), mmd2: mmd, gap })
        })();
        match step {
            Ok(row) => trace.push(row),
            Err(e) => {
                log::error!("aborting at iteration {it}: {e}; trace so far:\n{}", trace_to_csv(&trace));
                return Err(e);
            }
        }
    }
    Ok((model, trace))
}

/// Fraction of source rows whose top prototype logit names their class.
pub fn source_accuracy(model: &AdaptModel, source: &EmbeddingSet) -> Result<f64> {
    let y = embed(model, &source.features)?;
    let (logits, _) = proto_logits(&y, &model.w_s.value, 1.0)?;
    let mut hits = 0usize;
    for (i, &l) in source.labels.iter().enumerate() {
        let row = logits.row(i);
        let best = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .map(|(j, _)| j)
            .unwrap();
        if best == l as usize {
            hits += 1;
        }
    }
    Ok(hits as f64 / source.len() as f64)
}

/// Writes the model: magic, version, extractor dims, prototype column
/// counts, then every matrix little-endian f32 in declaration order.
pub fn save_adapt(model: &AdaptModel, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    put_u32(&mut buf, model.dims.len() as u32);
    for &d in &model.dims {
        put_u32(&mut buf, d as u32);
    }
    put_u32(&mut buf, model.w_s.value.cols() as u32);
    put_u32(&mut buf, model.w_t.as_ref().map_or(0, |wt| wt.value.cols() as u32));
    for l in &model.layers {
        put_f32_matrix(&mut buf, &l.w.value);
        put_f32_matrix(&mut buf, &l.b.value);
    }
    put_f32_matrix(&mut buf, &model.w_s.value);
    if let Some(wt) = &model.w_t {
        put_f32_matrix(&mut buf, &wt.value);
    }
    std::fs::write(path, buf).map_err(|e| file_err(path, e))
}

pub fn load_adapt(path: &Path) -> Result<AdaptModel> {
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
    let m_c = cur.u32("source class count")? as usize;
    let n_c = cur.u32("target class count")? as usize;
    if dims.iter().any(|&d| d == 0) || m_c == 0 {
        return Err(Error::Format { offset: 8, msg: "zero-sized model dimension".into() });
    }
    let mut layers = Vec::with_capacity(n_dims - 1);
    for l in 0..n_dims - 1 {
        layers.push(AffineLayer {
            w: ParamGrad::new(
                &format!("extractor{l}.w"),
                read_f32_matrix(&mut cur, dims[l], dims[l + 1], "extractor w")?,
            ),
            b: ParamGrad::new(
                &format!("extractor{l}.b"),
                read_f32_matrix(&mut cur, 1, dims[l + 1], "extractor b")?,
            ),
        });
    }
    let d_out = *dims.last().unwrap();
    let w_s = ParamGrad::new("w_s", read_f32_matrix(&mut cur, d_out, m_c, "w_s")?);
    let w_t = if n_c > 0 {
        Some(ParamGrad::new("w_t", read_f32_matrix(&mut cur, d_out, n_c, "w_t")?))
    } else {
        None
    };
    cur.finish()?;
    Ok(AdaptModel { layers, w_s, w_t, dims })
}
