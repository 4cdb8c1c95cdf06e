use ain::adapt::*;
use ain::datasynth::{generate_domain_pair, EmbeddingSet, SynthConfig};
use ain::gcn::{gcn_infer_linkages, gcn_train, GcnTrainConfig};
use ain::graph::{iterative_threshold_clustering, knn_search, KnnParams};
use ain::metrics::{bcubed, intra_class_distance, EvalMode};
use ain::numerics::seeded_rng;

fn purity(f: &ain::numerics::Matrix, truth: &[i64], k: usize) -> f64 {
    let lists = knn_search(f, k, true).unwrap();
    let (mut same, mut total) = (0usize, 0usize);
    for (i, l) in lists.iter().enumerate() {
        for &(j, _) in l {
            total += 1;
            if truth[i] == truth[j] {
                same += 1;
            }
        }
    }
    same as f64 / total as f64
}

fn auc(graph: &ain::graph::LinkageGraph, truth: &[i64]) -> f64 {
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for &(i, j, p) in graph.edges() {
        if truth[i] == truth[j] { pos.push(p) } else { neg.push(p) }
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            wins += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
        }
    }
    wins / (pos.len() as f64 * neg.len() as f64)
}

fn main() {
    for rank in [8usize, 12, 16] {
        let synth = SynthConfig { center_rank: rank, ..SynthConfig::default() };
        let (source, target, truth) = generate_domain_pair(&synth, 42).unwrap();
        for (lname, kind, s, m) in [
            ("plain   ", LossKind::Plain, 16.0, 0.2),
            ("mrg s8  ", LossKind::Margin, 8.0, 0.1),
            ("mrg s16 ", LossKind::Margin, 16.0, 0.2),
        ] {
            let sc = StageConfig {
                seed: 43,
                source_loss: kind,
                margin_s: s,
                margin_m: m,
                extractor_dims: vec![64, 64],
                ..StageConfig::default()
            };
            let mut rng = seeded_rng(sc.seed);
            let model = AdaptModel::new(source.dim(), &sc.extractor_dims, 20, &mut rng).unwrap();
            let (m1, _) = pretrain(model, &source, &target, &sc).unwrap();
            let ys = embed(&m1, &source.features).unwrap();
            let yt = embed(&m1, &target.features).unwrap();
            let comp_s = intra_class_distance(&ys, &source.labels).unwrap();
            let comp_t = intra_class_distance(&yt, &truth).unwrap();
            let kp = KnnParams { k1: 24, k2: 3, k3: 3 };
            let src_emb =
                EmbeddingSet::new(ys, source.labels.clone(), source.domain).unwrap();
            let tgt_emb = EmbeddingSet::new(yt, target.labels.clone(), target.domain).unwrap();
            let gc = GcnTrainConfig { seed: 44, ..GcnTrainConfig::default() };
            let (gcn, _) = gcn_train(&src_emb, &kp, &gc).unwrap();
            let graph = gcn_infer_linkages(&tgt_emb, &gcn, &kp).unwrap();
            let ca = iterative_threshold_clustering(&graph, 0.5, 0.05, 32).unwrap();
            let ratio = ca.labeled_ratio();
            let f = if ratio > 0.0 {
                bcubed(&ca, &truth, EvalMode::PseudoOnly).unwrap().2
            } else {
                f64::NAN
            };
            println!(
                "rank {rank:2} {lname}: comp s {comp_s:.3} t {comp_t:.3} | purity t {:.3} | auc {:.4} F {f:.4} ratio {ratio:.3}",
                purity(&tgt_emb.features, &truth, 24),
                auc(&graph, &truth),
            );
        }
    }
}
