use ain::adapt::*;
use ain::datasynth::{generate_domain_pair, make_verification_pairs, EmbeddingSet, SynthConfig};
use ain::gcn::{gcn_infer_linkages, gcn_train, GcnTrainConfig};
use ain::graph::{connected_components, iterative_threshold_clustering, KnnParams};
use ain::metrics::{bcubed, verification_accuracy, EvalMode};
use ain::numerics::seeded_rng;

fn oracle_best(graph: &ain::graph::LinkageGraph, truth: &[i64]) -> (f64, f64, f64) {
    let mut best = (0.0, 0.0, 0.0);
    for i in 1..=9 {
        let t = i as f64 * 0.1;
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
    }
    best
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let dims: Vec<usize> = args
        .get(1)
        .map(|s| s.split(',').filter(|p| !p.is_empty()).map(|p| p.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![64, 64]);
    let iters1: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(300);
    let beta: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(10.0);
    let max_size: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(32);
    let lr1: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(1e-2);
    let plain = args.get(6).map(|s| s == "plain").unwrap_or(false);
    let rank: usize = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(9);
    println!(
        "dims {dims:?} iters1 {iters1} beta {beta} max_size {max_size} lr1 {lr1} plain {plain} rank {rank}"
    );
    let synth = SynthConfig { center_rank: rank, ..SynthConfig::default() };
    let spc = synth.samples_per_class;
    let n_hard = (synth.hard_fraction * spc as f64).round() as usize;
    for seed in [42u64, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12] {
        let (source, target, truth) = generate_domain_pair(&synth, seed).unwrap();
        let sc = StageConfig {
            seed: seed + 1,
            source_loss: if plain { LossKind::Plain } else { LossKind::Margin },
            extractor_dims: dims.clone(),
            iters_stage1: iters1,
            beta,
            lr_stage1: lr1,
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
        let gc = GcnTrainConfig { seed: seed + 2, ..GcnTrainConfig::default() };
        let (gcn, _) = gcn_train(&src_emb, &kp, &gc).unwrap();
        let graph = gcn_infer_linkages(&tgt_emb, &gcn, &kp).unwrap();
        let n = graph.n_nodes();
        let mut maxp = vec![0.0f64; n];
        for &(u, v, p) in graph.edges() {
            if p > maxp[u] {
                maxp[u] = p;
            }
            if p > maxp[v] {
                maxp[v] = p;
            }
        }
        let is_hard = |i: usize| i % spc >= spc - n_hard;
        let mut hard_maxp: Vec<f64> = (0..n).filter(|&i| is_hard(i)).map(|i| maxp[i]).collect();
        hard_maxp.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let weak = maxp.iter().filter(|&&p| p < 0.1).count();
        let mid_edges =
            graph.edges().iter().filter(|&&(_, _, p)| p > 0.1 && p < 0.9).count();
        let hang = (0..n).filter(|&i| maxp[i] > 0.1 && maxp[i] < 0.95).count();
        let ca = iterative_threshold_clustering(&graph, 0.1, 0.1, max_size).unwrap();
        let ratio = ca.labeled_ratio();
        let (_, _, f_all) = bcubed(&ca, &truth, EvalMode::All).unwrap();
        let (ot, of, _) = oracle_best(&graph, &truth);
        let pairs = make_verification_pairs(&truth, 500, 500, seed + 5).unwrap();
        let (acc, _) = verification_accuracy(&yt, &pairs).unwrap();
        let win = if f_all >= of { "W" } else { "L" };
        println!(
            "seed {seed:2}: F {f_all:.4} ratio {ratio:.3} nc {nc:2} | or t {ot:.1} F {of:.4} {win} | acc {acc:.4} | weak {weak:3} mid_e {mid_edges:4} hang {hang:3} hmin {hmin:.3}",
            nc = ca.n_clusters(),
            hmin = hard_maxp[0],
        );
    }
}
