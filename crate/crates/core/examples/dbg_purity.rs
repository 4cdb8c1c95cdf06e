use ain::adapt::*;
use ain::datasynth::generate_domain_pair;
use ain::graph::{knn_search, KnnParams};
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

fn main() {
    let synth = ain::datasynth::SynthConfig::default();
    let (source, target, truth) = generate_domain_pair(&synth, 42).unwrap();
    let kp = KnnParams::default();
    println!("raw target purity {:.4}", purity(&target.features, &truth, kp.k1));

    struct V(&'static str, StageConfig);
    let margin = StageConfig {
        seed: 43,
        source_loss: LossKind::Margin,
        ..StageConfig::default()
    };
    let variants = vec![
        V("margin              ", margin.clone()),
        V("margin wd 2e-2      ", StageConfig { weight_decay: 2e-2, ..margin.clone() }),
        V("margin [64,64]      ", StageConfig { extractor_dims: vec![64, 64], ..margin.clone() }),
        V("margin iters 600    ", StageConfig { iters_stage1: 600, ..margin.clone() }),
        V("margin s 24         ", StageConfig { margin_s: 24.0, ..margin.clone() }),
        V("margin s 24 m 0.3   ", StageConfig { margin_s: 24.0, margin_m: 0.3, ..margin.clone() }),
        V("margin beta 3       ", StageConfig { beta: 3.0, ..margin.clone() }),
        V("margin beta 30      ", StageConfig { beta: 30.0, ..margin.clone() }),
        V("margin batch 128    ", StageConfig { batch_source: 128, batch_target: 128, ..margin.clone() }),
    ];
    for V(name, sc) in variants {
        let mut rng = seeded_rng(sc.seed);
        let model =
            AdaptModel::new(source.dim(), &sc.extractor_dims, 20, &mut rng).unwrap();
        let (m1, _) = pretrain(model, &source, &target, &sc).unwrap();
        let yt = embed(&m1, &target.features).unwrap();
        println!(
            "{name}: tgt purity {:.4}, src acc {:.4}",
            purity(&yt, &truth, kp.k1),
            source_accuracy(&m1, &source).unwrap()
        );
    }
}
