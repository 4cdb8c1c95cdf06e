use ain::adapt::*;
use ain::datasynth::{generate_domain_pair, EmbeddingSet};
use ain::gcn::{gcn_infer_linkages, gcn_train, GcnTrainConfig};
use ain::graph::{iterative_threshold_clustering, KnnParams};
use ain::metrics::{bcubed, EvalMode};
use ain::numerics::seeded_rng;

fn auc(graph: &ain::graph::LinkageGraph, truth: &[i64]) -> f64 {
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for &(i, j, p) in graph.edges() {
        if truth[i] == truth[j] {
            pos.push(p);
        } else {
            neg.push(p);
        }
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / (pos.len() as f64 * neg.len() as f64)
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
    for iters in [60usize, 120, 300] {
        for hidden in [vec![32usize, 32], vec![16], vec![8, 8]] {
            let gc = GcnTrainConfig {
                iterations: iters,
                hidden_dims: hidden.clone(),
                seed: 44,
                ..GcnTrainConfig::default()
            };
            let (gcn, trace) = gcn_train(&src_emb, &kp, &gc).unwrap();
            let graph = gcn_infer_linkages(&tgt_emb, &gcn, &kp).unwrap();
            let ca = iterative_threshold_clustering(&graph, 0.5, 0.05, 32).unwrap();
            let ratio = ca.labeled_ratio();
            let f = if ratio > 0.0 {
                bcubed(&ca, &truth, EvalMode::PseudoOnly).unwrap().2
            } else {
                f64::NAN
            };
            println!(
                "iters {iters:3} hidden {hidden:?}: bce {:.3} auc {:.4} F {f:.4} ratio {ratio:.3}",
                trace.last().unwrap(),
                auc(&graph, &truth)
            );
        }
    }
}
