//! Clustering and adaptation quality measures: BCubed precision/recall/F,
//! normalized mutual information, intra-class compactness and the
//! pseudo-vs-unlabeled gap, plus best-threshold pair verification.
//!
//! All functions are pure and deterministic. The implementations favor
//! per-item contingency counting; the test suites check them against naive
//! quadratic oracles.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::datasynth::PairList;
use crate::error::{Error, Result};
use crate::graph::ClusterAssignment;
use crate::numerics::{dot, norm, Matrix};

/// Which rows enter a clustering metric.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    /// Only rows carrying a pseudo-label (the reporting default).
    PseudoOnly,
    /// Every row; unassigned rows count as their own singleton clusters.
    All,
}

/// Maps the assignment to dense per-row cluster ids under the given mode,
/// returning the evaluated row indices alongside.
fn evaluated_clusters(
    pred: &ClusterAssignment,
    truth: &[i64],
    mode: EvalMode,
) -> Result<(Vec<usize>, Vec<i64>)> {
    if truth.len() != pred.len() {
        return Err(Error::Dim(format!(
            "{} truth labels for {} rows",
            truth.len(),
            pred.len()
        )));
    }
    let mut rows = Vec::new();
    let mut ids = Vec::new();
    let mut next_singleton = pred.n_clusters() as i64;
    for (i, &l) in pred.labels().iter().enumerate() {
        match (l >= 0, mode) {
            (true, _) => {
                rows.push(i);
                ids.push(l);
            }
            (false, EvalMode::All) => {
                rows.push(i);
                ids.push(next_singleton);
                next_singleton += 1;
            }
            (false, EvalMode::PseudoOnly) => {}
        }
    }
    if rows.is_empty() {
        return Err(Error::Metric("no rows to evaluate".into()));
    }
    Ok((rows, ids))
}

/// Item-averaged BCubed precision, recall, and F over the evaluated rows.
pub fn bcubed(
    pred: &ClusterAssignment,
    truth: &[i64],
    mode: EvalMode,
) -> Result<(f64, f64, f64)> {
    let (rows, ids) = evaluated_clusters(pred, truth, mode)?;
    let classes: Vec<i64> = rows.iter().map(|&i| truth[i]).collect();
    let mut cluster_size: HashMap<i64, f64> = HashMap::new();
    let mut class_size: HashMap<i64, f64> = HashMap::new();
    let mut joint: HashMap<(i64, i64), f64> = HashMap::new();
    for (&c, &t) in ids.iter().zip(&classes) {
        *cluster_size.entry(c).or_default() += 1.0;
        *class_size.entry(t).or_default() += 1.0;
        *joint.entry((c, t)).or_default() += 1.0;
    }
    let n = rows.len() as f64;
    let mut p = 0.0;
    let mut r = 0.0;
    for (&c, &t) in ids.iter().zip(&classes) {
        let both = joint[&(c, t)];
        p += both / cluster_size[&c];
        r += both / class_size[&t];
    }
    p /= n;
    r /= n;
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    Ok((p, r, f))
}

/// Normalized mutual information of two complete labelings. Every distinct
/// value is its own group. Normalization is by the arithmetic mean of the
/// two entropies; two trivial single-group partitions score 1.
pub fn nmi_of_labelings(a: &[i64], b: &[i64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dim(format!("{} vs {} labels", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Metric("no rows to evaluate".into()));
    }
    let n = a.len() as f64;
    let mut ca: HashMap<i64, f64> = HashMap::new();
    let mut cb: HashMap<i64, f64> = HashMap::new();
    let mut joint: HashMap<(i64, i64), f64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *ca.entry(x).or_default() += 1.0;
        *cb.entry(y).or_default() += 1.0;
        *joint.entry((x, y)).or_default() += 1.0;
    }
    let h = |counts: &HashMap<i64, f64>| -> f64 {
        -counts.values().map(|&c| (c / n) * (c / n).ln()).sum::<f64>()
    };
    let (ha, hb) = (h(&ca), h(&cb));
    let mut mi = 0.0;
    for (&(x, y), &c) in &joint {
        mi += (c / n) * ((c * n) / (ca[&x] * cb[&y])).ln();
    }
    let denom = 0.5 * (ha + hb);
    if denom <= 1e-15 {
        return Ok(1.0); // both partitions trivial
    }
    Ok((mi / denom).clamp(0.0, 1.0))
}

/// NMI between a cluster assignment and truth labels under the given
/// evaluation mode.
pub fn nmi(pred: &ClusterAssignment, truth: &[i64], mode: EvalMode) -> Result<f64> {
    let (rows, ids) = evaluated_clusters(pred, truth, mode)?;
    let classes: Vec<i64> = rows.iter().map(|&i| truth[i]).collect();
    nmi_of_labelings(&ids, &classes)
}

fn cosine(a: &[f64], b: &[f64], what: &str) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na <= 1e-12 || nb <= 1e-12 {
        return Err(Error::Degenerate(format!("zero-norm vector in {what}")));
    }
    Ok(dot(a, b) / (na * nb))
}

/// Mean cosine similarity of samples to their class centers, averaged over
/// classes. Centers are L2-normalized class means.
pub fn intra_class_distance(features: &Matrix, labels: &[i64]) -> Result<f64> {
    if labels.len() != features.rows() {
        return Err(Error::Dim(format!(
            "{} labels for {} rows",
            labels.len(),
            features.rows()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Metric("no rows to evaluate".into()));
    }
    let mut members: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        members.entry(l).or_default().push(i);
    }
    let d = features.cols();
    let mut total = 0.0;
    for (&class, rows) in &members {
        let mut center = vec![0.0; d];
        for &i in rows {
            for (c, &x) in center.iter_mut().zip(features.row(i)) {
                *c += x / rows.len() as f64;
            }
        }
        let cn = norm(&center);
        if cn <= 1e-12 {
            return Err(Error::Degenerate(format!("class {class} has a zero-norm center")));
        }
        for c in &mut center {
            *c /= cn;
        }
        let mut class_sim = 0.0;
        for &i in rows {
            class_sim += cosine(features.row(i), &center, &format!("class {class} row {i}"))?;
        }
        total += class_sim / rows.len() as f64;
    }
    Ok(total / members.len() as f64)
}

/// Compactness split between pseudo-labeled and unassigned rows, both
/// grouped by truth class.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GapReport {
    pub d_pseudo: f64,
    pub d_unlabeled: f64,
    pub gap: f64,
}

pub fn intra_domain_gap(
    features: &Matrix,
    pseudo: &ClusterAssignment,
    truth: &[i64],
) -> Result<GapReport> {
    if pseudo.len() != features.rows() || truth.len() != features.rows() {
        return Err(Error::Dim(format!(
            "{} rows vs {} pseudo labels vs {} truth labels",
            features.rows(),
            pseudo.len(),
            truth.len()
        )));
    }
    let labeled: Vec<usize> =
        (0..pseudo.len()).filter(|&i| pseudo.labels()[i] >= 0).collect();
    let unlabeled: Vec<usize> =
        (0..pseudo.len()).filter(|&i| pseudo.labels()[i] < 0).collect();
    if labeled.is_empty() {
        return Err(Error::Metric("no pseudo-labeled rows".into()));
    }
    if unlabeled.is_empty() {
        return Err(Error::Metric("no unlabeled rows".into()));
    }
    let pick = |rows: &[usize]| -> (Matrix, Vec<i64>) {
        (features.select_rows(rows), rows.iter().map(|&i| truth[i]).collect())
    };
    let (fp, tp) = pick(&labeled);
    let (fu, tu) = pick(&unlabeled);
    let d_pseudo = intra_class_distance(&fp, &tp)?;
    let d_unlabeled = intra_class_distance(&fu, &tu)?;
    Ok(GapReport { d_pseudo, d_unlabeled, gap: d_pseudo - d_unlabeled })
}

/// Best-threshold pair verification under the rule `genuine <=> cosine >=
/// threshold`. Candidate thresholds are the midpoints between adjacent
/// distinct similarities plus one sentinel on each side (all-genuine and
/// all-impostor calls are reachable decisions). Returns the best accuracy
/// and the lowest threshold achieving it.
pub fn verification_accuracy(features: &Matrix, pairs: &PairList) -> Result<(f64, f64)> {
    if pairs.pairs.is_empty() {
        return Err(Error::Metric("empty pair list".into()));
    }
    let n_genuine = pairs.pairs.iter().filter(|&&(_, _, g)| g).count();
    if n_genuine == 0 || n_genuine == pairs.pairs.len() {
        return Err(Error::Metric("need at least one genuine and one impostor pair".into()));
    }
    let mut sims = Vec::with_capacity(pairs.pairs.len());
    for &(i, j, genuine) in &pairs.pairs {
        if i >= features.rows() || j >= features.rows() {
            return Err(Error::Index(format!(
                "pair ({i}, {j}) out of range for {} rows",
                features.rows()
            )));
        }
        sims.push((cosine(features.row(i), features.row(j), &format!("pair ({i}, {j})"))?, genuine));
    }
    let mut distinct: Vec<f64> = sims.iter().map(|&(s, _)| s).collect();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    let mut thresholds = Vec::with_capacity(distinct.len() + 1);
    thresholds.push(distinct[0] - 1.0);
    for w in distinct.windows(2) {
        thresholds.push(0.5 * (w[0] + w[1]));
    }
    thresholds.push(distinct[distinct.len() - 1] + 1.0);
    let mut best = (0.0, thresholds[0]);
    for &t in &thresholds {
        let correct = sims.iter().filter(|&&(s, g)| (s >= t) == g).count();
        let acc = correct as f64 / sims.len() as f64;
        if acc > best.0 {
            best = (acc, t);
        }
    }
    Ok(best)
}

/// The standard clustering quality bundle, evaluated over pseudo-labeled
/// rows with the labeled fraction reported alongside.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ClusterReport {
    pub bcubed_precision: f64,
    pub bcubed_recall: f64,
    pub bcubed_f: f64,
    pub nmi: f64,
    pub labeled_ratio: f64,
    pub n_clusters: usize,
}

pub fn cluster_report(pred: &ClusterAssignment, truth: &[i64]) -> Result<ClusterReport> {
    let (p, r, f) = bcubed(pred, truth, EvalMode::PseudoOnly)?;
    let nmi = nmi(pred, truth, EvalMode::PseudoOnly)?;
    Ok(ClusterReport {
        bcubed_precision: p,
        bcubed_recall: r,
        bcubed_f: f,
        nmi,
        labeled_ratio: pred.labeled_ratio(),
        n_clusters: pred.n_clusters(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;
    use rand::Rng;

    fn assignment(labels: &[i64]) -> ClusterAssignment {
        ClusterAssignment::new(labels.to_vec()).unwrap()
    }

    #[test]
    fn bcubed_perfect_match_is_ones() {
        let pred = assignment(&[0, 0, 1, 1, 2, 2]);
        let truth = [5, 5, 9, 9, 7, 7];
        let (p, r, f) = bcubed(&pred, &truth, EvalMode::PseudoOnly).unwrap();
        assert_eq!((p, r, f), (1.0, 1.0, 1.0));
    }

    #[test]
    fn bcubed_all_singletons_hand_case() {
        // four unassigned rows, two truth classes of two
        let pred = assignment(&[-1, -1, -1, -1]);
        let truth = [0, 0, 1, 1];
        let (p, r, f) = bcubed(&pred, &truth, EvalMode::All).unwrap();
        assert_eq!(p, 1.0);
        assert_eq!(r, 0.5);
        assert!((f - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn bcubed_pseudo_only_ignores_unassigned() {
        let pred = assignment(&[0, 0, -1, 1, 1, -1]);
        let truth = [4, 4, 4, 6, 6, 6];
        let (p, r, f) = bcubed(&pred, &truth, EvalMode::PseudoOnly).unwrap();
        assert_eq!((p, r, f), (1.0, 1.0, 1.0));
    }

    // O(N^2) pair-counting oracle over evaluated rows.
    fn bcubed_oracle(ids: &[i64], classes: &[i64]) -> (f64, f64, f64) {
        let n = ids.len();
        let mut p = 0.0;
        let mut r = 0.0;
        for i in 0..n {
            let mut same_cluster = 0.0;
            let mut same_class = 0.0;
            let mut both = 0.0;
            for j in 0..n {
                let sc = ids[j] == ids[i];
                let st = classes[j] == classes[i];
                if sc {
                    same_cluster += 1.0;
                }
                if st {
                    same_class += 1.0;
                }
                if sc && st {
                    both += 1.0;
                }
            }
            p += both / same_cluster;
            r += both / same_class;
        }
        p /= n as f64;
        r /= n as f64;
        (p, r, 2.0 * p * r / (p + r))
    }

    #[test]
    fn bcubed_matches_pair_counting_oracle() {
        let mut rng = seeded_rng(20);
        for _ in 0..20 {
            // random assignment with clusters of size >= 2 plus some -1
            let mut labels = Vec::new();
            for c in 0..6i64 {
                for _ in 0..rng.gen_range(2..6) {
                    labels.push(c);
                }
            }
            for _ in 0..rng.gen_range(0..5) {
                labels.push(-1);
            }
            let n = labels.len();
            for i in (1..n).rev() {
                labels.swap(i, rng.gen_range(0..=i));
            }
            let truth: Vec<i64> = (0..n).map(|_| rng.gen_range(0..5)).collect();
            let pred = assignment(&labels);
            for mode in [EvalMode::PseudoOnly, EvalMode::All] {
                let (p, r, f) = bcubed(&pred, &truth, mode).unwrap();
                let (rows, ids) = evaluated_clusters(&pred, &truth, mode).unwrap();
                let classes: Vec<i64> = rows.iter().map(|&i| truth[i]).collect();
                let (po, ro, fo) = bcubed_oracle(&ids, &classes);
                assert!((p - po).abs() < 1e-12);
                assert!((r - ro).abs() < 1e-12);
                assert!((f - fo).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bcubed_f_is_harmonic_mean() {
        let pred = assignment(&[0, 0, 0, 1, 1, -1]);
        let truth = [0, 0, 1, 1, 2, 2];
        let (p, r, f) = bcubed(&pred, &truth, EvalMode::PseudoOnly).unwrap();
        assert!((f - 2.0 * p * r / (p + r)).abs() < 1e-12);
    }

    #[test]
    fn bcubed_rejects_empty_evaluation() {
        let pred = assignment(&[-1, -1]);
        assert!(matches!(
            bcubed(&pred, &[0, 1], EvalMode::PseudoOnly),
            Err(Error::Metric(_))
        ));
    }

    #[test]
    fn nmi_identical_partitions_is_one() {
        let pred = assignment(&[0, 0, 1, 1]);
        let truth = [3, 3, 8, 8];
        assert!((nmi(&pred, &truth, EvalMode::PseudoOnly).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nmi_single_cluster_vs_balanced_classes_is_zero() {
        let a = vec![0i64; 8];
        let b: Vec<i64> = (0..8).map(|i| i % 4).collect();
        assert_eq!(nmi_of_labelings(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn nmi_trivial_pair_is_one() {
        assert_eq!(nmi_of_labelings(&[0, 0, 0], &[5, 5, 5]).unwrap(), 1.0);
    }

    #[test]
    fn nmi_is_symmetric() {
        let mut rng = seeded_rng(21);
        for _ in 0..10 {
            let a: Vec<i64> = (0..40).map(|_| rng.gen_range(0..6)).collect();
            let b: Vec<i64> = (0..40).map(|_| rng.gen_range(0..4)).collect();
            let x = nmi_of_labelings(&a, &b).unwrap();
            let y = nmi_of_labelings(&b, &a).unwrap();
            assert!((x - y).abs() < 1e-12);
        }
    }

    // independent contingency-table recomputation in log2 then rescaled
    #[test]
    fn nmi_matches_contingency_oracle() {
        let mut rng = seeded_rng(22);
        for _ in 0..20 {
            let n = 50;
            let a: Vec<i64> = (0..n).map(|_| rng.gen_range(0..5)).collect();
            let b: Vec<i64> = (0..n).map(|_| rng.gen_range(0..7)).collect();
            let got = nmi_of_labelings(&a, &b).unwrap();
            let nf = n as f64;
            let mut table = [[0.0f64; 7]; 5];
            for (&x, &y) in a.iter().zip(&b) {
                table[x as usize][y as usize] += 1.0;
            }
            let ra: Vec<f64> = (0..5).map(|i| table[i].iter().sum()).collect();
            let cb: Vec<f64> = (0..7).map(|j| (0..5).map(|i| table[i][j]).sum()).collect();
            let mut mi = 0.0;
            for i in 0..5 {
                for j in 0..7 {
                    let c = table[i][j];
                    if c > 0.0 {
                        mi += (c / nf) * ((c * nf) / (ra[i] * cb[j])).log2();
                    }
                }
            }
            let ent = |v: &[f64]| -> f64 {
                -v.iter().filter(|&&c| c > 0.0).map(|&c| (c / nf) * (c / nf).log2()).sum::<f64>()
            };
            let want = mi / (0.5 * (ent(&ra) + ent(&cb)));
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn compactness_is_one_for_center_aligned_samples() {
        // all samples point along their class center direction
        let f = Matrix::from_rows(&[
            vec![2.0, 0.0],
            vec![5.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 3.0],
        ])
        .unwrap();
        let d = intra_class_distance(&f, &[0, 0, 1, 1]).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn compactness_rejects_degenerate_center() {
        let f = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        match intra_class_distance(&f, &[4, 4]) {
            Err(Error::Degenerate(msg)) => assert!(msg.contains("class 4")),
            other => panic!("expected degenerate error, got {other:?}"),
        }
    }

    #[test]
    fn compactness_matches_double_loop_oracle() {
        let mut rng = seeded_rng(23);
        for _ in 0..20 {
            let n = 30;
            let f = Matrix::random_uniform(n, 5, 0.1, 1.0, &mut rng);
            let labels: Vec<i64> = (0..n).map(|i| (i % 3) as i64).collect();
            let got = intra_class_distance(&f, &labels).unwrap();
            let mut want = 0.0;
            for c in 0..3i64 {
                let rows: Vec<usize> =
                    (0..n).filter(|&i| labels[i] == c).collect();
                let mut center = vec![0.0; 5];
                for &i in &rows {
                    for k in 0..5 {
                        center[k] += f.get(i, k) / rows.len() as f64;
                    }
                }
                let cn = norm(&center);
                let mut acc = 0.0;
                for &i in &rows {
                    acc += dot(f.row(i), &center) / (norm(f.row(i)) * cn);
                }
                want += acc / rows.len() as f64;
            }
            want /= 3.0;
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn compactness_invariant_under_rotation() {
        let mut rng = seeded_rng(24);
        let f = Matrix::random_uniform(20, 2, -1.0, 1.0, &mut rng);
        let labels: Vec<i64> = (0..20).map(|i| (i % 2) as i64).collect();
        let before = intra_class_distance(&f, &labels).unwrap();
        let theta: f64 = 0.7;
        let rot =
            Matrix::from_rows(&[vec![theta.cos(), theta.sin()], vec![-theta.sin(), theta.cos()]])
                .unwrap();
        let rotated = f.matmul(&rot).unwrap();
        let after = intra_class_distance(&rotated, &labels).unwrap();
        assert!((before - after).abs() < 1e-9);
    }

    #[test]
    fn gap_requires_both_subsets() {
        let f = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.9, 0.1]]).unwrap();
        let pred = assignment(&[0, 0]);
        assert!(matches!(
            intra_domain_gap(&f, &pred, &[0, 0]),
            Err(Error::Metric(_))
        ));
    }

    #[test]
    fn gap_is_difference_of_compactness() {
        let mut rng = seeded_rng(25);
        let f = Matrix::random_uniform(12, 4, 0.1, 1.0, &mut rng);
        let pred = assignment(&[0, 0, 0, 1, 1, 1, -1, -1, -1, -1, -1, -1]);
        let truth: Vec<i64> = (0..12).map(|i| (i % 2) as i64).collect();
        let rep = intra_domain_gap(&f, &pred, &truth).unwrap();
        assert_eq!(rep.gap, rep.d_pseudo - rep.d_unlabeled);
        let labeled: Vec<usize> = (0..6).collect();
        let dp = intra_class_distance(
            &f.select_rows(&labeled),
            &labeled.iter().map(|&i| truth[i]).collect::<Vec<_>>(),
        )
        .unwrap();
        assert!((rep.d_pseudo - dp).abs() < 1e-15);
    }

    fn pair_list(pairs: &[(usize, usize, bool)]) -> PairList {
        PairList { pairs: pairs.to_vec() }
    }

    #[test]
    fn verification_separable_is_perfect() {
        let f = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![0.99, 0.01],
            vec![0.0, 1.0],
            vec![0.01, 0.99],
        ])
        .unwrap();
        let pairs = pair_list(&[(0, 1, true), (2, 3, true), (0, 2, false), (1, 3, false)]);
        let (acc, theta) = verification_accuracy(&f, &pairs).unwrap();
        assert_eq!(acc, 1.0);
        // every genuine similarity clears the threshold, no impostor does
        for &(i, j, g) in &pairs.pairs {
            let s = dot(f.row(i), f.row(j)) / (norm(f.row(i)) * norm(f.row(j)));
            assert_eq!(s >= theta, g);
        }
    }

    #[test]
    fn verification_inverted_labels_cap_at_half() {
        let f = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![0.99, 0.01],
            vec![0.0, 1.0],
            vec![0.01, 0.99],
        ])
        .unwrap();
        // genuine pairs are actually the dissimilar ones
        let pairs = pair_list(&[(0, 1, false), (2, 3, false), (0, 2, true), (1, 3, true)]);
        let (acc, _) = verification_accuracy(&f, &pairs).unwrap();
        assert_eq!(acc, 0.5);
    }

    #[test]
    fn verification_matches_exhaustive_sweep() {
        let mut rng = seeded_rng(26);
        let f = Matrix::random_uniform(30, 6, -1.0, 1.0, &mut rng);
        let mut pairs = Vec::new();
        for _ in 0..100 {
            let i = rng.gen_range(0..30);
            let mut j = rng.gen_range(0..30);
            if j == i {
                j = (j + 1) % 30;
            }
            pairs.push((i, j, rng.gen_bool(0.5)));
        }
        if !pairs.iter().any(|&(_, _, g)| g) {
            pairs[0].2 = true;
        }
        if pairs.iter().all(|&(_, _, g)| g) {
            pairs[0].2 = false;
        }
        let pl = pair_list(&pairs);
        let (acc, theta) = verification_accuracy(&f, &pl).unwrap();
        // oracle: accuracy at every observed similarity and beyond both ends
        let sims: Vec<(f64, bool)> = pairs
            .iter()
            .map(|&(i, j, g)| {
                (dot(f.row(i), f.row(j)) / (norm(f.row(i)) * norm(f.row(j))), g)
            })
            .collect();
        let mut cands: Vec<f64> = sims.iter().map(|&(s, _)| s).collect();
        cands.push(-2.0);
        cands.push(2.0);
        let mut best = 0.0f64;
        for &t in &cands {
            let a = sims.iter().filter(|&&(s, g)| (s >= t) == g).count() as f64
                / sims.len() as f64;
            best = best.max(a);
        }
        assert!((acc - best).abs() < 1e-12);
        let at_theta = sims.iter().filter(|&&(s, g)| (s >= theta) == g).count() as f64
            / sims.len() as f64;
        assert_eq!(at_theta, acc);
    }

    #[test]
    fn verification_monotone_transform_invariant() {
        let mut rng = seeded_rng(27);
        let f = Matrix::random_uniform(10, 3, 0.1, 1.0, &mut rng);
        let pairs = pair_list(&[
            (0, 1, true),
            (2, 3, true),
            (4, 5, false),
            (6, 7, false),
            (8, 9, false),
        ]);
        let (acc, _) = verification_accuracy(&f, &pairs).unwrap();
        // scaling all rows leaves cosines, hence accuracy, unchanged
        let scaled = f.scale(3.7);
        let (acc2, _) = verification_accuracy(&scaled, &pairs).unwrap();
        assert_eq!(acc, acc2);
    }

    #[test]
    fn verification_needs_both_pair_kinds() {
        let f = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(
            verification_accuracy(&f, &pair_list(&[(0, 1, true)])),
            Err(Error::Metric(_))
        ));
    }

    #[test]
    fn report_bundles_pseudo_only_metrics() {
        let pred = assignment(&[0, 0, 1, 1, -1]);
        let truth = [2, 2, 3, 3, 3];
        let rep = cluster_report(&pred, &truth).unwrap();
        assert_eq!(rep.bcubed_f, 1.0);
        assert_eq!(rep.nmi, 1.0);
        assert!((rep.labeled_ratio - 0.8).abs() < 1e-12);
        assert_eq!(rep.n_clusters, 2);
    }
}
