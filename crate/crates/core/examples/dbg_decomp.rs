use ain::adapt::*;
use ain::datasynth::{generate_domain_pair, EmbeddingSet};
use ain::gcn::{gcn_infer_linkages, gcn_train, GcnTrainConfig};
use ain::graph::{
    iterative_threshold_clustering, KnnParams, LinkageGraph,
};
use ain::metrics::{bcubed, EvalMode};
use ain::numerics::{dot, seeded_rng};

fn auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &p in pos {
        for &n in neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / (pos.len() as f64 * neg.len() as f64)
}

fn cluster_quality(g: &LinkageGraph, truth: &[i64], tag: &str) {
    for eta0 in [0.5f64] {
        let ca = iterative_threshold_clustering(g, eta0, 0.05, 32).unwrap();
        let ratio = ca.labeled_ratio();
        let f = if ratio > 0.0 {
            bcubed(&ca, truth, EvalMode::PseudoOnly).unwrap().2
        } else {
            f64::NAN
        };
        println!("  {tag}: F {f:.4} ratio {ratio:.3} clusters {}", ca.n_clusters());
    }
}

fn main() {
    let synth = ain::datasynth::SynthConfig::default();
    let (source, target, truth) = generate_domain_pair(&synth, 42).unwrap();
    let sc = StageConfig {
        seed: 43,
        source_loss: LossKind::Margin,
        extractor_dims: vec![64, 64],
        ..StageConfig::default()
    };
    let mut rng = seeded_rng(sc.seed);
    let model = AdaptModel::new(source.dim(), &sc.extractor_dims, 20, &mut rng).unwrap();
    let (m1, _) = pretrain(model, &source, &target, &sc).unwrap();
    let src_emb = EmbeddingSet::new(
        embed(&m1, &source.features).unwrap(),
        source.labels.clone(),
        source.domain,
    )
    .unwrap();
    let tgt_emb = EmbeddingSet::new(
        embed(&m1, &target.features).unwrap(),
        target.labels.clone(),
        target.domain,
    )
    .unwrap();
    let kp = KnnParams { k1: 24, k2: 3, k3: 3 };
    let mut gc = GcnTrainConfig::default();
    gc.seed = 44;
    let (gcn, _) = gcn_train(&src_emb, &kp, &gc).unwrap();
    let graph = gcn_infer_linkages(&tgt_emb, &gcn, &kp).unwrap();

    let edges = graph.edges();
    let n = graph.n_nodes();
    // (A) ceiling: perfect probabilities on the same edge set
    let perfect: Vec<(usize, usize, f64)> = edges
        .iter()
        .map(|&(i, j, _)| (i, j, if truth[i] == truth[j] { 1.0 } else { 0.0 }))
        .collect();
    cluster_quality(&LinkageGraph::new(n, perfect).unwrap(), &truth, "perfect p ceiling");

    // (B) embedded cosine mapped to [0,1] as p
    let y = &tgt_emb.features;
    let cosp: Vec<(usize, usize, f64)> = edges
        .iter()
        .map(|&(i, j, _)| (i, j, ((dot(y.row(i), y.row(j)) + 1.0) / 2.0).clamp(0.0, 1.0)))
        .collect();
    cluster_quality(&LinkageGraph::new(n, cosp.clone()).unwrap(), &truth, "cosine as p    ");

    // (C) actual GCN probabilities
    cluster_quality(&graph, &truth, "gcn p          ");

    let split = |es: &[(usize, usize, f64)]| -> (Vec<f64>, Vec<f64>) {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for &(i, j, p) in es {
            if truth[i] == truth[j] {
                pos.push(p);
            } else {
                neg.push(p);
            }
        }
        (pos, neg)
    };
    let (pg, ng) = split(edges);
    let (pc, nc) = split(&cosp);
    println!("gcn AUC {:.4} | cosine AUC {:.4} (pos {} neg {})", auc(&pg, &ng), auc(&pc, &nc), pg.len(), ng.len());
}
