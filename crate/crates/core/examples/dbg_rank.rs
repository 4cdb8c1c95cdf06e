use ain::adapt::*;
use ain::datasynth::{generate_domain_pair, make_verification_pairs, EmbeddingSet, SynthConfig};
use ain::gcn::{gcn_infer_linkages, gcn_train, GcnTrainConfig};
use ain::graph::{connected_components, iterative_threshold_clustering, knn_search, KnnParams};
use ain::metrics::{bcubed, verification_accuracy, EvalMode};
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
    for (rank, hf) in [(8usize, 0.1f64), (8, 0.2), (8, 0.3), (16, 0.2)] {
        let synth = SynthConfig { center_rank: rank, hard_fraction: hf, ..SynthConfig::default() };
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
        let tgt_emb =
            EmbeddingSet::new(yt.clone(), target.labels.clone(), target.domain).unwrap();
        let kp = KnnParams { k1: 26, k2: 0, k3: 3 };
        let gc = GcnTrainConfig { seed: 44, ..GcnTrainConfig::default() };
        let (gcn, _) = gcn_train(&src_emb, &kp, &gc).unwrap();
        let graph = gcn_infer_linkages(&tgt_emb, &gcn, &kp).unwrap();
        let ca = iterative_threshold_clustering(&graph, 0.1, 0.1, 32).unwrap();
        let ratio = ca.labeled_ratio();
        let (_, _, f_all) = bcubed(&ca, &truth, EvalMode::All).unwrap();
        let (ot, of, or) = oracle_best(&graph, &truth);
        let pairs = make_verification_pairs(&truth, 500, 500, 47).unwrap();
        let (acc, _) = verification_accuracy(&yt, &pairs).unwrap();
        println!(
            "rank {rank:2} hf {hf:.1}: pur {:.3} | iter F {f_all:.4} ratio {ratio:.3} nc {:2} | oracle t {ot:.2} F {of:.4} r {or:.3} | acc {acc:.4}",
            purity(&tgt_emb.features, &truth, 26),
            ca.n_clusters()
        );
    }
}
