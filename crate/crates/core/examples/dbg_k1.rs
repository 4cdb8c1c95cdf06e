use ain::adapt::*;
use ain::datasynth::{generate_domain_pair, EmbeddingSet, SynthConfig};
use ain::gcn::{gcn_infer_linkages, gcn_train, GcnTrainConfig};
use ain::graph::{connected_components, iterative_threshold_clustering, KnnParams};
use ain::metrics::{bcubed, EvalMode};
use ain::numerics::seeded_rng;

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

// single global threshold, components of size >= 2 become clusters
fn oracle_best(graph: &ain::graph::LinkageGraph, truth: &[i64]) -> (f64, f64, f64) {
    let mut best = (0.0, 0.0, 0.0);
    let mut t = 0.05;
    while t < 1.0 {
        let comps = connected_components(graph.n_nodes(), graph.edges(), t).unwrap();
        let mut labels = vec![-1i64; graph.n_nodes()];
        let mut next = 0i64;
        for c in &comps {
            if c.len() >= 2 {
                for &i in c {
                    labels[i] = next;
                }
                next += 1;
            }
        }
        let ca = ain::graph::ClusterAssignment::new(labels).unwrap();
        let (_, _, f) = bcubed(&ca, truth, EvalMode::All).unwrap();
        if f > best.1 {
            best = (t, f, ca.labeled_ratio());
        }
        t += 0.05;
    }
    best
}

fn main() {
    for rank in [16usize, 64] {
        let synth = SynthConfig { center_rank: rank, ..SynthConfig::default() };
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
        let ys = embed(&m1, &source.features).unwrap();
        let yt = embed(&m1, &target.features).unwrap();
        let src_emb = EmbeddingSet::new(ys, source.labels.clone(), source.domain).unwrap();
        let tgt_emb = EmbeddingSet::new(yt, target.labels.clone(), target.domain).unwrap();
        for k1 in [24usize, 32, 40] {
            let kp = KnnParams { k1, k2: 3, k3: 3 };
            let gc = GcnTrainConfig { seed: 44, ..GcnTrainConfig::default() };
            let (gcn, _) = gcn_train(&src_emb, &kp, &gc).unwrap();
            let graph = gcn_infer_linkages(&tgt_emb, &gcn, &kp).unwrap();
            let ca = iterative_threshold_clustering(&graph, 0.1, 0.1, 32).unwrap();
            let ratio = ca.labeled_ratio();
            let (_, _, f_all) = bcubed(&ca, &truth, EvalMode::All).unwrap();
            let f_ps = if ratio > 0.0 {
                bcubed(&ca, &truth, EvalMode::PseudoOnly).unwrap().2
            } else {
                f64::NAN
            };
            let (ot, of, or) = oracle_best(&graph, &truth);
            println!(
                "rank {rank:2} k1 {k1}: auc {:.4} | iter F_all {f_all:.4} F_ps {f_ps:.4} ratio {ratio:.3} | oracle t {ot:.2} F_all {of:.4} ratio {or:.3}",
                auc(&graph, &truth)
            );
        }
    }
}
