use ain::adapt::*;
use ain::datasynth::{generate_domain_pair, EmbeddingSet, SynthConfig};
use ain::gcn::{gcn_infer_linkages, gcn_train, GcnTrainConfig};
use ain::graph::{connected_components, iterative_threshold_clustering, KnnParams};
use ain::metrics::{bcubed, EvalMode};
use ain::numerics::seeded_rng;

fn q(v: &mut Vec<f64>, f: f64) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[((v.len() - 1) as f64 * f) as usize]
}

fn main() {
    let synth = SynthConfig::default();
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

    // offset magnitude distributions around a few pivots, both domains
    for (name, f, labs) in [("src", &ys, &source.labels), ("tgt", &yt, &truth.clone())] {
        let (mut same, mut cross) = (Vec::new(), Vec::new());
        for pivot in (0..f.rows()).step_by(37) {
            let pv = f.row(pivot);
            for v in 0..f.rows() {
                if v == pivot { continue; }
                let d: f64 = f.row(v).iter().zip(pv).map(|(a, b)| (a - b) * (a - b)).sum();
                if labs[v] == labs[pivot] { same.push(d.sqrt()) } else { cross.push(d.sqrt()) }
            }
        }
        println!(
            "{name} |offset| same q10/50/90 {:.2}/{:.2}/{:.2} cross {:.2}/{:.2}/{:.2}",
            q(&mut same.clone(), 0.1), q(&mut same.clone(), 0.5), q(&mut same.clone(), 0.9),
            q(&mut cross.clone(), 0.1), q(&mut cross.clone(), 0.5), q(&mut cross.clone(), 0.9),
        );
    }

    let src_emb = EmbeddingSet::new(ys, source.labels.clone(), source.domain).unwrap();
    let tgt_emb = EmbeddingSet::new(yt, target.labels.clone(), target.domain).unwrap();
    for (k1, k2) in [(28usize, 3usize), (28, 0), (26, 0)] {
        let kp = KnnParams { k1, k2, k3: 3 };
        let gc = GcnTrainConfig { seed: 44, ..GcnTrainConfig::default() };
        let (gcn, _) = gcn_train(&src_emb, &kp, &gc).unwrap();
        let graph = gcn_infer_linkages(&tgt_emb, &gcn, &kp).unwrap();
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for &(i, j, p) in graph.edges() {
            if truth[i] == truth[j] { pos.push(p) } else { neg.push(p) }
        }
        println!(
            "k1 {k1} k2 {k2}: {} same / {} cross | same q01/10/50 {:.3}/{:.3}/{:.3} | cross q50/90/99/max {:.3}/{:.3}/{:.3}/{:.3}",
            pos.len(), neg.len(),
            q(&mut pos.clone(), 0.01), q(&mut pos.clone(), 0.10), q(&mut pos.clone(), 0.50),
            q(&mut neg.clone(), 0.50), q(&mut neg.clone(), 0.90), q(&mut neg.clone(), 0.99),
            neg.iter().cloned().fold(0.0, f64::max),
        );
        for eta10 in 3..=9 {
            let eta = eta10 as f64 / 10.0;
            let comps = connected_components(graph.n_nodes(), graph.edges(), eta).unwrap();
            let mut sizes: Vec<usize> = comps.iter().map(|c| c.len()).collect();
            sizes.sort_unstable_by(|a, b| b.cmp(a));
            let covered: usize = sizes.iter().filter(|&&s| s >= 2).sum();
            println!(
                "  eta {eta:.1}: top {:?} cov {:.3}",
                &sizes[..sizes.len().min(6)],
                covered as f64 / 500.0
            );
        }
        let ca = iterative_threshold_clustering(&graph, 0.1, 0.1, 32).unwrap();
        let (_, _, f_all) = bcubed(&ca, &truth, EvalMode::All).unwrap();
        println!("  iter max32: F {f_all:.4} ratio {:.3} nc {}", ca.labeled_ratio(), ca.n_clusters());
    }
}
