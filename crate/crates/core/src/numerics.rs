//! Dense row-major matrices plus the small set of linear-algebra and
//! differentiation helpers everything else is built on.
//!
//! All arithmetic is `f64` and single-threaded. Randomness always flows
//! through [`seeded_rng`]; ChaCha8 is a counter-based generator, so a fixed
//! seed reproduces bit-exactly on a given platform.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Deterministic RNG shared by the whole crate.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Dense row-major matrix. Invariant: `data.len() == rows * cols` and every
/// entry produced through a checked constructor is finite.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix> {
        if data.len() != rows * cols {
            return Err(Error::Dim(format!(
                "{}x{} matrix needs {} entries, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Degenerate(format!(
                "non-finite entry at flat index {pos}"
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Dim(format!(
                    "ragged rows: expected {c} columns, got {}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Matrix::from_vec(r, c, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    /// Gathers the given rows into a new matrix. Panics on bad indices;
    /// callers validate against user input first.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(idx.len(), self.cols);
        for (i, &r) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.row(r));
        }
        out
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::Dim(format!(
                "matmul {}x{} * {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        let n = rhs.cols;
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let rrow = rhs.row(k);
                let orow = &mut out.data[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += a * rrow[j];
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Matrix {
        let mut out = self.clone();
        for v in &mut out.data {
            *v *= s;
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_check(other, "add")?;
        let mut out = self.clone();
        for (o, v) in out.data.iter_mut().zip(&other.data) {
            *o += v;
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_check(other, "sub")?;
        let mut out = self.clone();
        for (o, v) in out.data.iter_mut().zip(&other.data) {
            *o -= v;
        }
        Ok(out)
    }

    /// `self += alpha * x`. Shapes are implementation-controlled here, so a
    /// mismatch is a bug and panics.
    pub fn axpy(&mut self, alpha: f64, x: &Matrix) {
        assert_eq!(
            (self.rows, self.cols),
            (x.rows, x.cols),
            "axpy shape mismatch"
        );
        for (o, v) in self.data.iter_mut().zip(&x.data) {
            *o += alpha * v;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows divided by their Euclidean norm; rows with norm <= 1e-12 are
    /// left untouched so exact zero vectors stay zero.
    pub fn l2_normalize_rows(&self) -> Matrix {
        let mut out = self.clone();
        for i in 0..self.rows {
            let r = out.row_mut(i);
            let n = norm(r);
            if n > 1e-12 {
                for v in r.iter_mut() {
                    *v /= n;
                }
            }
        }
        out
    }

    pub fn random_uniform(
        rows: usize,
        cols: usize,
        lo: f64,
        hi: f64,
        rng: &mut ChaCha8Rng,
    ) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect();
        Matrix { rows, cols, data }
    }

    /// Uniform init on +/- sqrt(6 / (fan_in + fan_out)) with fan_in = rows
    /// and fan_out = cols (row convention: input rows, output columns).
    pub fn glorot_uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        Matrix::random_uniform(rows, cols, -limit, limit, rng)
    }

    pub fn random_gaussian(rows: usize, cols: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Matrix {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * sigma
            })
            .collect();
        Matrix { rows, cols, data }
    }

    fn zip_check(&self, other: &Matrix, what: &str) -> Result<()> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::Dim(format!(
                "{what} {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `Y = X W + b` with `b` broadcast over rows.
pub fn affine_forward(x: &Matrix, w: &Matrix, b: &[f64]) -> Result<Matrix> {
    if b.len() != w.cols() {
        return Err(Error::Dim(format!(
            "bias length {} vs {} output columns",
            b.len(),
            w.cols()
        )));
    }
    let mut y = x.matmul(w)?;
    for i in 0..y.rows() {
        let row = y.row_mut(i);
        for (v, bj) in row.iter_mut().zip(b) {
            *v += bj;
        }
    }
    Ok(y)
}

/// Row-wise softmax with per-row max subtraction, so huge logits cannot
/// overflow.
pub fn softmax_rows(z: &Matrix) -> Matrix {
    let mut out = z.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

/// Column sums as a 1 x cols matrix (bias gradients).
pub fn col_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for i in 0..m.rows() {
        let row = m.row(i);
        let o = out.row_mut(0);
        for (a, b) in o.iter_mut().zip(row) {
            *a += b;
        }
    }
    out
}

/// A named parameter paired with its gradient accumulator. Gradients are
/// zeroed before each backward pass and consumed by an optimizer step.
#[derive(Clone, Debug)]
pub struct ParamGrad {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

impl ParamGrad {
    pub fn new(name: &str, value: Matrix) -> ParamGrad {
        let grad = Matrix::zeros(value.rows(), value.cols());
        ParamGrad { name: name.to_string(), value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// One SGD update with momentum, weight decay folded into the gradient:
/// `v = momentum * v + grad + wd * value; value -= lr * v`.
pub fn momentum_sgd_step(
    p: &mut ParamGrad,
    vel: &mut Matrix,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    let (r, c) = (p.value.rows(), p.value.cols());
    assert_eq!((vel.rows(), vel.cols()), (r, c), "velocity shape mismatch");
    let vdata = vel.data_mut();
    let gdata = p.grad.data();
    let wdata = p.value.data_mut();
    for i in 0..r * c {
        vdata[i] = momentum * vdata[i] + gdata[i] + weight_decay * wdata[i];
        wdata[i] -= lr * vdata[i];
    }
}

/// Central-difference gradient estimate for `loss_fn` at `params`.
///
/// This is the reference oracle every analytic gradient is checked against,
/// so it deliberately knows nothing about how the loss is computed: it only
/// re-evaluates the closure with perturbed inputs.
pub fn finite_diff_grad<F>(mut loss_fn: F, params: &[Matrix], eps: f64) -> Result<Vec<Matrix>>
where
    F: FnMut(&[Matrix]) -> Result<f64>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::Config(format!("finite-difference eps must be positive, got {eps}")));
    }
    let mut work: Vec<Matrix> = params.to_vec();
    let mut grads: Vec<Matrix> = params
        .iter()
        .map(|p| Matrix::zeros(p.rows(), p.cols()))
        .collect();
    for p in 0..params.len() {
        for idx in 0..params[p].data().len() {
            let orig = work[p].data()[idx];
            work[p].data_mut()[idx] = orig + eps;
            let fp = loss_fn(&work)?;
            work[p].data_mut()[idx] = orig - eps;
            let fm = loss_fn(&work)?;
            work[p].data_mut()[idx] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::Eval(format!(
                    "non-finite loss while differencing parameter {p} entry {idx}"
                )));
            }
            grads[p].data_mut()[idx] = (fp - fm) / (2.0 * eps);
        }
    }
    Ok(grads)
}

/// Worst-case relative error between an analytic and a numeric gradient,
/// with an absolute floor so near-zero entries do not blow the ratio up.
pub fn max_rel_err(analytic: &Matrix, numeric: &Matrix, floor: f64) -> f64 {
    assert_eq!(analytic.rows(), numeric.rows());
    assert_eq!(analytic.cols(), numeric.cols());
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.data().iter().zip(numeric.data()) {
        let denom = a.abs().max(n.abs()).max(floor);
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}
