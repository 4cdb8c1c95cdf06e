use ain::adapt::*;
use ain::datasynth::{generate_domain_pair, EmbeddingSet, SynthConfig};
use ain::gcn::{gcn_infer_linkages, gcn_train, GcnTrainConfig};
use ain::graph::{connected_components, KnnParams};
use ain::numerics::seeded_rng;

fn main() {
    let synth = SynthConfig::default();
    let (source, target, _truth) = generate_domain_pair(&synth, 42).unwrap();
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
    let kp = KnnParams { k1: 32, k2: 3, k3: 3 };
    let gc = GcnTrainConfig { seed: 44, ..GcnTrainConfig::default() };
    let (gcn, _) = gcn_train(&src_emb, &kp, &gc).unwrap();
    let graph = gcn_infer_linkages(&tgt_emb, &gcn, &kp).unwrap();

    // component size profile at every eta cut of the FULL graph
    for step in 1..=10 {
        let eta = step as f64 * 0.1;
        let comps = connected_components(graph.n_nodes(), graph.edges(), eta).unwrap();
        let mut sizes: Vec<usize> = comps.iter().map(|c| c.len()).collect();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        let singles = sizes.iter().filter(|&&s| s == 1).count();
        let covered: usize = sizes.iter().filter(|&&s| s >= 2).sum();
        println!(
            "eta {eta:.1}: top sizes {:?} | {singles} singletons | coverage {:.3}",
            &sizes[..sizes.len().min(8)],
            covered as f64 / 500.0
        );
    }
}
