use ain::adapt::*;
use ain::datasynth::{generate_domain_pair, EmbeddingSet};
use ain::gcn::{gcn_infer_linkages, gcn_train, GcnTrainConfig};
use ain::graph::{
    connected_components, iterative_threshold_clustering, ClusterAssignment, KnnParams,
};
use ain::metrics::{bcubed, EvalMode};
use ain::numerics::seeded_rng;

fn oracle_best(graph: &ain::graph::LinkageGraph, truth: &[i64]) -> (f64, f64, f64) {
    let mut best = (0.0f64, 0.0f64, 0.0f64);
    for s in 1..40 {
        let t = 0.025 * s as f64;
        let comps = connected_components(graph.n_nodes(), graph.edges(), t).unwrap();
        let mut labels = vec![-1i64; graph.n_nodes()];
        let mut next = 0i64;
        for comp in &comps {
            if comp.len() >= 2 {
                for &v in comp {
                    labels[v] = next;
                }
                next += 1;
            }
        }
        if next == 0 {
            continue;
        }
        let ca = ClusterAssignment::new(labels).unwrap();
        if ca.labeled_ratio() == 0.0 {
            continue;
        }
        let (_, _, f) = bcubed(&ca, &truth, EvalMode::PseudoOnly).unwrap();
        if f > best.1 {
            best = (t, f, ca.labeled_ratio());
        }
    }
    best
}

fn main() {
    let synth = ain::datasynth::SynthConfig::default();
    let (source, target, truth) = generate_domain_pair(&synth, 42).unwrap();
    struct V(&'static str, f64, f64);
    let variants =
        vec![V("s16 m0.2", 16.0, 0.2), V("s8 m0.1", 8.0, 0.1), V("s12 m0.1", 12.0, 0.1)];
    for V(name, s, m) in variants {
        let sc = StageConfig {
            seed: 43,
            source_loss: LossKind::Margin,
            extractor_dims: vec![64, 64],
            margin_s: s,
            margin_m: m,
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
        for k1 in [24usize, 32] {
            let kp = KnnParams { k1, k2: 3, k3: 3 };
            let mut gc = GcnTrainConfig::default();
            gc.seed = 44;
            let (gcn, _) = gcn_train(&src_emb, &kp, &gc).unwrap();
            let graph = gcn_infer_linkages(&tgt_emb, &gcn, &kp).unwrap();
            for eta0 in [0.5f64, 0.3] {
                let ca = iterative_threshold_clustering(&graph, eta0, 0.05, 32).unwrap();
                let ratio = ca.labeled_ratio();
                let f = if ratio > 0.0 {
                    bcubed(&ca, &truth, EvalMode::PseudoOnly).unwrap().2
                } else {
                    f64::NAN
                };
                let (ot, of, orat) = oracle_best(&graph, &truth);
                println!(
                    "{name} k1 {k1} eta0 {eta0}: iter F {f:.4} ratio {ratio:.3} ({} cl) | oracle F {of:.4} ratio {orat:.3} t {ot:.3} | {}",
                    ca.n_clusters(),
                    if f >= of && ratio > 0.5 { "PASS" } else { "fail" }
                );
            }
        }
    }
}
