//! Synthetic two-domain embedding benchmarks.
//!
//! Classes are Gaussian blobs around unit-sphere centers. The target domain
//! draws fresh centers and pushes them through a configurable
//! rotation/translation/scale shift; a fraction of each target class is
//! drawn with 3x the noise to model hard samples. Every sample is
//! L2-normalized after noise, so downstream code can treat features as
//! living on the sphere.
//!
//! Random draws happen in a fixed order (source centers, source noise,
//! target centers, target noise) and never depend on the shift values, so
//! runs with the same seed but different shifts see identical underlying
//! draws. That is what makes shift ablations comparable point by point.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{file_err, Error, Result};
use crate::numerics::{dot, norm, seeded_rng, Matrix};

const MAGIC: &[u8; 4] = b"AINE";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    Source,
    Target,
}

/// A block of row-major embeddings with per-row labels. Row index is the
/// stable sample id. Label -1 means unlabeled; source sets must be fully
/// labeled.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub features: Matrix,
    pub labels: Vec<i64>,
    pub domain: Domain,
}

impl EmbeddingSet {
    pub fn new(features: Matrix, labels: Vec<i64>, domain: Domain) -> Result<EmbeddingSet> {
        if features.rows() == 0 {
            return Err(Error::Degenerate("embedding set needs at least one row".into()));
        }
        if labels.len() != features.rows() {
            return Err(Error::Dim(format!(
                "{} labels for {} rows",
                labels.len(),
                features.rows()
            )));
        }
        if labels.iter().any(|&l| l < -1) {
            return Err(Error::Degenerate("labels below -1 are not meaningful".into()));
        }
        if domain == Domain::Source && labels.iter().any(|&l| l < 0) {
            return Err(Error::Degenerate("source sets must be fully labeled".into()));
        }
        Ok(EmbeddingSet { features, labels, domain })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// Rigid-ish shift applied to target class centers: scale first, then a
/// rotation in the plane of the first two coordinates, then a translation
/// pointing away from the source centroid so that larger magnitudes move
/// the domains measurably further apart.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ShiftConfig {
    /// Rotation angle in radians.
    pub rotation: f64,
    /// Translation magnitude.
    pub translation: f64,
    /// Multiplicative scale on the centers.
    pub scale: f64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        ShiftConfig { rotation: 0.5, translation: 0.5, scale: 1.0 }
    }
}

impl ShiftConfig {
    pub fn identity() -> Self {
        ShiftConfig { rotation: 0.0, translation: 0.0, scale: 1.0 }
    }

    fn apply(&self, center: &mut [f64], direction: &[f64]) {
        for v in center.iter_mut() {
            *v *= self.scale;
        }
        let (s, c) = self.rotation.sin_cos();
        let (x, y) = (center[0], center[1]);
        center[0] = x * c - y * s;
        center[1] = x * s + y * c;
        for (v, d) in center.iter_mut().zip(direction) {
            *v += self.translation * d;
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_classes_source: usize,
    pub n_classes_target: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    /// Expected within-class noise radius relative to the unit-norm class
    /// center: samples get per-coordinate deviation sigma/sqrt(dim), so the
    /// blob radius (and with it the difficulty) means the same thing at
    /// every dimension instead of growing with sqrt(dim).
    pub intra_class_sigma: f64,
    pub shift: ShiftConfig,
    /// Fraction of each target class drawn at 3x sigma.
    pub hard_fraction: f64,
    /// Cap on the rank of the subspace all class centers share, clamped to
    /// `dim` (0 = no cap). Both domains drawing centers from one subspace
    /// while noise fills the ambient space is what lets features learned on
    /// the source carry over to the target: suppressing the off-subspace
    /// directions helps both.
    pub center_rank: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_classes_source: 20,
            n_classes_target: 20,
            samples_per_class: 25,
            dim: 64,
            intra_class_sigma: 0.15,
            shift: ShiftConfig::default(),
            hard_fraction: 0.2,
            center_rank: 9,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config(format!(
                "dim {} too small for the rotation plane (need >= 2)",
                self.dim
            )));
        }
        if self.n_classes_source == 0 || self.n_classes_target == 0 || self.samples_per_class == 0
        {
            return Err(Error::Config("class and sample counts must be positive".into()));
        }
        if self.intra_class_sigma < 0.0 || !self.intra_class_sigma.is_finite() {
            return Err(Error::Config("intra_class_sigma must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.hard_fraction) {
            return Err(Error::Config(format!(
                "hard_fraction {} outside [0, 1]",
                self.hard_fraction
            )));
        }
        if self.center_rank == 1 {
            return Err(Error::Config("center_rank 1 collapses all centers to one line".into()));
        }
        Ok(())
    }

    /// Effective center subspace rank after clamping to the dimension.
    fn effective_rank(&self) -> usize {
        if self.center_rank == 0 {
            self.dim
        } else {
            self.center_rank.min(self.dim)
        }
    }
}

/// Verification pair list: (row i, row j, genuine). Genuine means both rows
/// share a truth class.
#[derive(Clone, Debug, PartialEq)]
pub struct PairList {
    pub pairs: Vec<(usize, usize, bool)>,
}

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-9 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    if n > 1e-12 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    v
}

fn axis_vector(dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[0] = 1.0;
    v
}

/// Orthonormal basis of a random `rank`-dimensional subspace, built by
/// Gram-Schmidt over Gaussian draws (degenerate draws are retried).
fn subspace_basis(dim: usize, rank: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rank);
    while basis.len() < rank {
        let mut v: Vec<f64> =
            (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for b in &basis {
            let proj = dot(&v, b);
            for (x, y) in v.iter_mut().zip(b) {
                *x -= proj * y;
            }
        }
        let n = norm(&v);
        if n > 1e-9 {
            for x in v.iter_mut() {
                *x /= n;
            }
            basis.push(v);
        }
    }
    basis
}

/// A unit-norm class center: ambient when no basis is given, otherwise a
/// uniform direction within the shared subspace.
fn center_vector(basis: Option<&[Vec<f64>]>, dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match basis {
        None => unit_vector(dim, rng),
        Some(b) => {
            let u = unit_vector(b.len(), rng);
            let mut c = vec![0.0; dim];
            for (w, bv) in u.iter().zip(b) {
                for (ci, bi) in c.iter_mut().zip(bv) {
                    *ci += w * bi;
                }
            }
            c
        }
    }
}

/// Generates a (source, target) pair plus the target truth labels.
///
/// Source labels are 0..n_classes_source; target truth labels continue from
/// n_classes_source so the two label spaces never overlap. The returned
/// target set itself carries -1 everywhere: truth only travels through the
/// sidecar.
pub fn generate_domain_pair(
    cfg: &SynthConfig,
    seed: u64,
) -> Result<(EmbeddingSet, EmbeddingSet, Vec<i64>)> {
    cfg.validate()?;
    let mut rng = seeded_rng(seed);
    let spc = cfg.samples_per_class;
    let rank = cfg.effective_rank();
    // sigma is the blob radius; spread it over the coordinates
    let sigma = cfg.intra_class_sigma / (cfg.dim as f64).sqrt();
    let basis = (rank < cfg.dim).then(|| subspace_basis(cfg.dim, rank, &mut rng));
    let source_centers: Vec<Vec<f64>> = (0..cfg.n_classes_source)
        .map(|_| center_vector(basis.as_deref(), cfg.dim, &mut rng))
        .collect();
    let mut src_rows = Vec::with_capacity(cfg.n_classes_source * spc);
    let mut src_labels = Vec::with_capacity(cfg.n_classes_source * spc);
    for (c, center) in source_centers.iter().enumerate() {
        for _ in 0..spc {
            let mut x = center.clone();
            for v in x.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += sigma * z;
            }
            src_rows.push(normalized(x));
            src_labels.push(c as i64);
        }
    }

    // translating away from where the source mass sits keeps the measured
    // divergence growing with the magnitude instead of letting the moved
    // cloud drift back into the source support
    let mut away = vec![0.0; cfg.dim];
    for center in &source_centers {
        for (a, v) in away.iter_mut().zip(center) {
            *a -= v;
        }
    }
    let away = if norm(&away) > 1e-9 { normalized(away) } else { axis_vector(cfg.dim) };
    let mut target_centers: Vec<Vec<f64>> = (0..cfg.n_classes_target)
        .map(|_| center_vector(basis.as_deref(), cfg.dim, &mut rng))
        .collect();
    for center in target_centers.iter_mut() {
        cfg.shift.apply(center, &away);
    }
    let n_hard = ((cfg.hard_fraction * spc as f64).round() as usize).min(spc);
    // the inflated part of the hard tail lies along the center subspace
    // where the class structure itself lives, so it survives any embedding
    // that merely suppresses ambient noise; its scale brings the total
    // radius to 3x the base one
    let hard_scale = 8.0f64.sqrt() * cfg.intra_class_sigma / (rank as f64).sqrt();
    let mut tgt_rows = Vec::with_capacity(cfg.n_classes_target * spc);
    let mut truth = Vec::with_capacity(cfg.n_classes_target * spc);
    for (c, center) in target_centers.iter().enumerate() {
        for s in 0..spc {
            let mut x = center.clone();
            for v in x.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += sigma * z;
            }
            if s >= spc - n_hard {
                match basis.as_deref() {
                    Some(b) => {
                        for bv in b {
                            let g: f64 = rng.sample(StandardNormal);
                            for (xi, bi) in x.iter_mut().zip(bv) {
                                *xi += hard_scale * g * bi;
                            }
                        }
                    }
                    None => {
                        for v in x.iter_mut() {
                            let g: f64 = rng.sample(StandardNormal);
                            *v += hard_scale * g;
                        }
                    }
                }
            }
            tgt_rows.push(normalized(x));
            truth.push((cfg.n_classes_source + c) as i64);
        }
    }

    let source = EmbeddingSet::new(Matrix::from_rows(&src_rows)?, src_labels, Domain::Source)?;
    let unlabeled = vec![-1i64; tgt_rows.len()];
    let target = EmbeddingSet::new(Matrix::from_rows(&tgt_rows)?, unlabeled, Domain::Target)?;
    Ok((source, target, truth))
}

pub(crate) fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Binary embedding layout: magic "AINE", u32 version, u32 N, u32 d, then
/// N*d little-endian f32 features row-major, then N little-endian i64
/// labels. Features are stored at f32 precision.
pub fn write_embeddings(set: &EmbeddingSet, path: &Path) -> Result<()> {
    write_raw(&set.features, &set.labels, path)
}

fn write_raw(features: &Matrix, labels: &[i64], path: &Path) -> Result<()> {
    let n = features.rows();
    let d = features.cols();
    let mut buf = Vec::with_capacity(16 + n * d * 4 + n * 8);
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    put_u32(&mut buf, n as u32);
    put_u32(&mut buf, d as u32);
    for v in features.data() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    for l in labels {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| file_err(path, e))
}

pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Cursor<'a> {
        Cursor { buf, pos: 0 }
    }

    pub(crate) fn pos(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated payload while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let s = self.take(4, what)?;
        Ok(u32::from_le_bytes(s.try_into().unwrap()))
    }

    /// Errors if any input remains unconsumed.
    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("{} trailing bytes", self.buf.len() - self.pos),
            });
        }
        Ok(())
    }
}

/// Appends a matrix as little-endian f32, row major.
pub(crate) fn put_f32_matrix(buf: &mut Vec<u8>, m: &Matrix) {
    for v in m.data() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

/// Reads a little-endian f32 matrix, rejecting non-finite entries.
pub(crate) fn read_f32_matrix(
    cur: &mut Cursor,
    rows: usize,
    cols: usize,
    what: &str,
) -> Result<Matrix> {
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows * cols {
        let off = cur.pos();
        let s = cur.take(4, what)?;
        let v = f32::from_le_bytes(s.try_into().unwrap()) as f64;
        if !v.is_finite() {
            return Err(Error::Format {
                offset: off,
                msg: format!("non-finite value in {what} at flat index {i}"),
            });
        }
        data.push(v);
    }
    Matrix::from_vec(rows, cols, data)
}

/// Reads an embedding file. The domain tag is not stored on disk; a set
/// containing any -1 label is treated as target, otherwise as source.
pub fn read_embeddings(path: &Path) -> Result<EmbeddingSet> {
    let (features, labels) = read_raw(path)?;
    let domain = if labels.iter().any(|&l| l < 0) { Domain::Target } else { Domain::Source };
    EmbeddingSet::new(features, labels, domain)
}

fn read_raw(path: &Path) -> Result<(Matrix, Vec<i64>)> {
    let buf = fs::read(path).map_err(|e| file_err(path, e))?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format { offset: 0, msg: format!("bad magic {magic:?}") });
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version} (expected {VERSION})"),
        });
    }
    let n = cur.u32("row count")? as usize;
    let d = cur.u32("dimension")? as usize;
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n * d {
        let off = cur.pos as u64;
        let s = cur.take(4, "features")?;
        let v = f32::from_le_bytes(s.try_into().unwrap()) as f64;
        if !v.is_finite() {
            return Err(Error::Format {
                offset: off,
                msg: format!("non-finite feature at flat index {i}"),
            });
        }
        data.push(v);
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let s = cur.take(8, "labels")?;
        labels.push(i64::from_le_bytes(s.try_into().unwrap()));
    }
    if cur.pos != buf.len() {
        return Err(Error::Format {
            offset: cur.pos as u64,
            msg: format!("{} trailing bytes", buf.len() - cur.pos),
        });
    }
    Ok((Matrix::from_vec(n, d, data)?, labels))
}

/// Truth labels ride in a sidecar using the same layout with zero feature
/// columns.
pub fn write_truth_sidecar(labels: &[i64], path: &Path) -> Result<()> {
    write_raw(&Matrix::zeros(labels.len(), 0), labels, path)
}

pub fn read_truth_sidecar(path: &Path) -> Result<Vec<i64>> {
    let (features, labels) = read_raw(path)?;
    if features.cols() != 0 {
        return Err(Error::Format {
            offset: 12,
            msg: format!("truth sidecar should have 0 feature columns, found {}", features.cols()),
        });
    }
    Ok(labels)
}

/// Samples exactly `n_genuine` same-class and `n_impostor` cross-class row
/// pairs without replacement, deterministically for a given seed. Genuine
/// pairs come first in the returned list.
pub fn make_verification_pairs(
    truth: &[i64],
    n_genuine: usize,
    n_impostor: usize,
    seed: u64,
) -> Result<PairList> {
    let classes: std::collections::BTreeSet<i64> = truth.iter().copied().collect();
    if classes.len() < 2 {
        return Err(Error::Sampling(format!(
            "need at least 2 classes to form pairs, found {}",
            classes.len()
        )));
    }
    let mut counts = std::collections::BTreeMap::new();
    for l in truth {
        *counts.entry(*l).or_insert(0usize) += 1;
    }
    if !counts.values().any(|&c| c >= 2) {
        return Err(Error::Sampling("no class has 2 or more members".into()));
    }

    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for i in 0..truth.len() {
        for j in i + 1..truth.len() {
            if truth[i] == truth[j] {
                genuine.push((i, j));
            } else {
                impostor.push((i, j));
            }
        }
    }
    if n_genuine > genuine.len() {
        return Err(Error::Sampling(format!(
            "requested {n_genuine} genuine pairs but only {} exist",
            genuine.len()
        )));
    }
    if n_impostor > impostor.len() {
        return Err(Error::Sampling(format!(
            "requested {n_impostor} impostor pairs but only {} exist",
            impostor.len()
        )));
    }
    let mut rng = seeded_rng(seed);
    genuine.shuffle(&mut rng);
    impostor.shuffle(&mut rng);
    let mut pairs: Vec<(usize, usize, bool)> =
        genuine.into_iter().take(n_genuine).map(|(i, j)| (i, j, true)).collect();
    pairs.extend(impostor.into_iter().take(n_impostor).map(|(i, j)| (i, j, false)));
    Ok(PairList { pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{mmd2, MmdConfig};

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            n_classes_source: 4,
            n_classes_target: 4,
            samples_per_class: 10,
            dim: 8,
            intra_class_sigma: 0.05,
            shift: ShiftConfig::default(),
            hard_fraction: 0.1,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn benchmark_shape_contract() {
        let cfg = SynthConfig::default();
        let (source, target, truth) = generate_domain_pair(&cfg, 42).unwrap();
        assert_eq!(source.len(), 500);
        assert_eq!(target.len(), 500);
        assert_eq!(target.dim(), 64);
        assert_eq!(truth.len(), 500);
        assert!(target.labels.iter().all(|&l| l == -1));
    }

    #[test]
    fn zero_noise_identity_shift_reproduces_centers() {
        let cfg = SynthConfig {
            intra_class_sigma: 0.0,
            shift: ShiftConfig::identity(),
            hard_fraction: 0.0,
            ..small_cfg()
        };
        let (_, target, truth) = generate_domain_pair(&cfg, 7).unwrap();
        // all samples of a class collapse onto one point: grouping rows by
        // (near-)equality must reproduce the truth partition exactly
        for i in 0..target.len() {
            for j in i + 1..target.len() {
                let same = target
                    .features
                    .row(i)
                    .iter()
                    .zip(target.features.row(j))
                    .all(|(a, b)| (a - b).abs() < 1e-12);
                assert_eq!(same, truth[i] == truth[j], "rows {i},{j}");
            }
        }
    }

    #[test]
    fn label_spaces_are_disjoint() {
        let (source, _, truth) = generate_domain_pair(&small_cfg(), 3).unwrap();
        let src: std::collections::BTreeSet<i64> = source.labels.iter().copied().collect();
        let tgt: std::collections::BTreeSet<i64> = truth.iter().copied().collect();
        assert!(src.is_disjoint(&tgt));
    }

    #[test]
    fn generation_is_deterministic() {
        let (s1, t1, y1) = generate_domain_pair(&small_cfg(), 11).unwrap();
        let (s2, t2, y2) = generate_domain_pair(&small_cfg(), 11).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(t1, t2);
        assert_eq!(y1, y2);
    }

    #[test]
    fn features_are_unit_norm() {
        let (source, target, _) = generate_domain_pair(&small_cfg(), 5).unwrap();
        for set in [&source, &target] {
            for i in 0..set.len() {
                assert!((crate::numerics::norm(set.features.row(i)) - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn shift_increases_mmd_on_matched_seeds() {
        let base = SynthConfig { shift: ShiftConfig::identity(), ..small_cfg() };
        let shifted = SynthConfig {
            shift: ShiftConfig { rotation: 0.6, translation: 0.6, scale: 1.0 },
            ..small_cfg()
        };
        let cfg_mmd = MmdConfig::default();
        let (s0, t0, _) = generate_domain_pair(&base, 42).unwrap();
        let (s1, t1, _) = generate_domain_pair(&shifted, 42).unwrap();
        let (m0, _, _) = mmd2(&s0.features, &t0.features, &cfg_mmd).unwrap();
        let (m1, _, _) = mmd2(&s1.features, &t1.features, &cfg_mmd).unwrap();
        assert!(m1 > m0, "shifted {m1} <= unshifted {m0}");
    }

    #[test]
    fn mmd_monotone_in_translation() {
        let cfg_mmd = MmdConfig::default();
        let mut last = -1.0;
        for step in 0..5 {
            let t = 0.25 * step as f64;
            let cfg = SynthConfig {
                shift: ShiftConfig { rotation: 0.0, translation: t, scale: 1.0 },
                ..small_cfg()
            };
            let (source, target, _) = generate_domain_pair(&cfg, 42).unwrap();
            let (m, _, _) = mmd2(&source.features, &target.features, &cfg_mmd).unwrap();
            assert!(
                m >= last - 1e-9,
                "mmd not monotone at translation {t}: {m} < {last}"
            );
            last = m;
        }
    }

    #[test]
    fn dim_too_small_is_config_error() {
        let cfg = SynthConfig { dim: 1, ..small_cfg() };
        assert!(matches!(generate_domain_pair(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn center_rank_one_is_config_error() {
        let cfg = SynthConfig { center_rank: 1, ..small_cfg() };
        assert!(matches!(generate_domain_pair(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn center_rank_confines_class_means_to_a_subspace() {
        // with near-zero noise the class means sit on the centers, and a
        // rank-2 cap forces every center into one plane
        let cfg = SynthConfig {
            n_classes_source: 5,
            n_classes_target: 5,
            samples_per_class: 6,
            dim: 6,
            intra_class_sigma: 1e-4,
            shift: ShiftConfig::identity(),
            hard_fraction: 0.0,
            center_rank: 2,
        };
        let (source, _, _) = generate_domain_pair(&cfg, 9).unwrap();
        let mean_of = |class: i64| -> Vec<f64> {
            let rows: Vec<usize> =
                (0..source.len()).filter(|&i| source.labels[i] == class).collect();
            let mut m = vec![0.0; cfg.dim];
            for &i in &rows {
                for (a, &v) in m.iter_mut().zip(source.features.row(i)) {
                    *a += v / rows.len() as f64;
                }
            }
            m
        };
        let basis = [normalized(mean_of(0)), normalized(mean_of(1))];
        // re-orthogonalize the second direction against the first
        let p = dot(&basis[1], &basis[0]);
        let b1: Vec<f64> =
            basis[1].iter().zip(&basis[0]).map(|(v, b)| v - p * b).collect();
        let b1 = normalized(b1);
        for class in 2..5 {
            let m = normalized(mean_of(class));
            let (c0, c1) = (dot(&m, &basis[0]), dot(&m, &b1));
            let residual: f64 = m
                .iter()
                .zip(&basis[0])
                .zip(&b1)
                .map(|((v, x), y)| (v - c0 * x - c1 * y).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(residual < 1e-2, "class {class} leaves the plane by {residual}");
        }
    }

    #[test]
    fn center_rank_clamps_to_the_dimension() {
        let zero = SynthConfig { center_rank: 0, ..small_cfg() };
        let huge = SynthConfig { center_rank: 999, ..small_cfg() };
        let a = generate_domain_pair(&zero, 13).unwrap();
        let b = generate_domain_pair(&huge, 13).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn file_roundtrip_preserves_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.aine");
        let (source, _, _) = generate_domain_pair(&small_cfg(), 9).unwrap();
        write_embeddings(&source, &path).unwrap();
        let back = read_embeddings(&path).unwrap();
        assert_eq!(back.labels, source.labels);
        assert_eq!(back.domain, Domain::Source);
        for (a, b) in back.features.data().iter().zip(source.features.data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        // write the reread set again: bytes must be identical
        let path2 = dir.path().join("set2.aine");
        write_embeddings(&back, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn file_size_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.aine");
        let set = EmbeddingSet::new(
            Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap(),
            vec![0, 1, -1],
            Domain::Target,
        )
        .unwrap();
        write_embeddings(&set, &path).unwrap();
        let len = std::fs::metadata(&path).unwrap().len();
        assert_eq!(len, 16 + 3 * 2 * 4 + 3 * 8);
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.aine");
        std::fs::write(&path, b"XXXXrest-of-file-does-not-matter").unwrap();
        match read_embeddings(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.aine");
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&2u32.to_le_bytes()); // claims 2 rows
        buf.extend_from_slice(&3u32.to_le_bytes()); // 3 cols, then nothing
        std::fs::write(&path, buf).unwrap();
        match read_embeddings(&path) {
            Err(Error::Format { offset, msg }) => {
                assert_eq!(offset, 16);
                assert!(msg.contains("truncated"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truth_sidecar_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.truth");
        let labels = vec![4, 4, 5, 6, 6, 6];
        write_truth_sidecar(&labels, &path).unwrap();
        assert_eq!(read_truth_sidecar(&path).unwrap(), labels);
    }

    #[test]
    fn two_by_two_yields_the_two_within_class_pairs() {
        let truth = vec![0, 0, 1, 1];
        let pl = make_verification_pairs(&truth, 2, 0, 1).unwrap();
        let mut got: Vec<(usize, usize)> = pl.pairs.iter().map(|&(i, j, _)| (i, j)).collect();
        got.sort_unstable();
        assert_eq!(got, vec![(0, 1), (2, 3)]);
        assert!(pl.pairs.iter().all(|&(_, _, g)| g));
    }

    #[test]
    fn genuine_fraction_is_exact() {
        let truth: Vec<i64> = (0..40).map(|i| (i / 10) as i64).collect();
        let pl = make_verification_pairs(&truth, 30, 70, 5).unwrap();
        let genuine = pl.pairs.iter().filter(|&&(_, _, g)| g).count();
        assert_eq!(genuine, 30);
        assert_eq!(pl.pairs.len(), 100);
        for &(i, j, g) in &pl.pairs {
            assert_ne!(i, j);
            assert_eq!(g, truth[i] == truth[j]);
        }
    }

    #[test]
    fn unsatisfiable_pair_counts_name_the_deficit() {
        let truth = vec![0, 0, 1, 1];
        match make_verification_pairs(&truth, 3, 0, 1) {
            Err(Error::Sampling(msg)) => {
                assert!(msg.contains('3') && msg.contains('2'), "bad message: {msg}");
            }
            other => panic!("expected sampling error, got {other:?}"),
        }
    }

    #[test]
    fn pair_sampling_is_deterministic() {
        let truth: Vec<i64> = (0..30).map(|i| (i % 5) as i64).collect();
        let a = make_verification_pairs(&truth, 20, 20, 77).unwrap();
        let b = make_verification_pairs(&truth, 20, 20, 77).unwrap();
        assert_eq!(a, b);
    }
}
