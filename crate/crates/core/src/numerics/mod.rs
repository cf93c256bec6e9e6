//! Dense linear algebra used everywhere else in the crate.
//!
//! Everything here operates on row-major `f64` matrices with a fixed
//! summation order, so results are bit-reproducible for a given build.

mod svd;

pub use svd::{svd, truncate_rank, SvdFactors};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::new(raw.rows, raw.cols, raw.data)
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape(format!("empty matrix {rows}x{cols}")));
        }
        let expected = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::shape(format!("matrix {rows}x{cols} overflows")))?;
        if data.len() != expected {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {expected} entries, got {}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "empty matrix {rows}x{cols}");
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self::new(rows.len(), cols, data).expect("valid literal matrix")
    }

    /// Matrix with i.i.d. standard normal entries.
    pub fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data).expect("nonempty shape")
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
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

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|x| c * x)
    }

    fn zip_with(&self, other: &Matrix, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "{op} of {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    /// Copies the given rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Matrix> {
        if idx.is_empty() {
            return Err(Error::param("empty row selection"));
        }
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            if i >= self.rows {
                return Err(Error::param(format!(
                    "row index {i} out of range for {} rows",
                    self.rows
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Matrix::new(idx.len(), self.cols, data)
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (s, &x) in sums.iter_mut().zip(self.row(i)) {
                *s += x;
            }
        }
        sums
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, &x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::param(format!("{what} has non-finite entries")))
        }
    }

    /// Mean of squared differences.
    pub fn mse(&self, other: &Matrix) -> Result<f64> {
        let diff = self.sub(other)?;
        Ok(diff.data.iter().map(|d| d * d).sum::<f64>() / diff.len() as f64)
    }
}

/// Standard product with a fixed `i, k, j` loop order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::shape(format!(
            "matmul_nt {}x{} by ({}x{})ᵀ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(ar, b.row(j));
        }
    }
    Ok(out)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-wise softmax. `-inf` entries are treated as excluded and map to an
/// exact zero; every row needs at least one finite logit.
pub fn row_softmax(logits: &Matrix) -> Result<Matrix> {
    let mut out = logits.clone();
    for i in 0..out.rows {
        let row = out.row_mut(i);
        let max = row
            .iter()
            .copied()
            .filter(|x| *x != f64::NEG_INFINITY)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow { row: i });
        }
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = if *x == f64::NEG_INFINITY {
                0.0
            } else {
                (*x - max).exp()
            };
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    Ok(out)
}

/// Backward pass of [`row_softmax`]: given the softmax output `a` and the
/// upstream gradient `da`, returns the gradient with respect to the logits.
/// Excluded (`-inf`) positions have `a = 0` and receive zero gradient.
pub fn softmax_backward(a: &Matrix, da: &Matrix) -> Result<Matrix> {
    if a.shape() != da.shape() {
        return Err(Error::shape("softmax backward shape mismatch"));
    }
    let mut out = Matrix::zeros(a.rows, a.cols);
    for i in 0..a.rows {
        let ar = a.row(i);
        let dr = da.row(i);
        let inner = dot(ar, dr);
        for ((o, &p), &g) in out.row_mut(i).iter_mut().zip(ar).zip(dr) {
            *o = p * (g - inner);
        }
    }
    Ok(out)
}

/// Mean-pools consecutive groups of `stride` rows; the final group may be
/// shorter.
pub fn avg_pool_rows(m: &Matrix, stride: usize) -> Result<Matrix> {
    if stride == 0 {
        return Err(Error::param("pooling stride must be >= 1"));
    }
    let out_rows = m.rows.div_ceil(stride);
    let mut out = Matrix::zeros(out_rows, m.cols);
    for g in 0..out_rows {
        let start = g * stride;
        let end = (start + stride).min(m.rows);
        let inv = 1.0 / (end - start) as f64;
        let acc = out.row_mut(g);
        for i in start..end {
            for (a, &x) in acc.iter_mut().zip(m.row(i)) {
                *a += x;
            }
        }
        for a in acc.iter_mut() {
            *a *= inv;
        }
    }
    Ok(out)
}

/// Indices of the `k` largest entries, ordered by decreasing value with ties
/// going to the lower index.
pub fn top_k_indices(v: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > v.len() {
        return Err(Error::param(format!(
            "top-k needs 1 <= k <= {}, got {k}",
            v.len()
        )));
    }
    let mut idx = descending_order(v);
    idx.truncate(k);
    Ok(idx)
}

/// Full descending argsort with lower-index tie-break.
pub fn descending_order(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx
}

pub fn frobenius(m: &Matrix) -> f64 {
    m.data.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Largest singular value estimated by power iteration on `mᵀm`, started
/// from the normalized all-ones vector.
pub fn spectral_norm(m: &Matrix, iterations: usize) -> f64 {
    let n = m.cols;
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut sigma = 0.0;
    for _ in 0..iterations.max(1) {
        let mv: Vec<f64> = (0..m.rows).map(|i| dot(m.row(i), &v)).collect();
        let mut w = vec![0.0; n];
        for (i, &mvi) in mv.iter().enumerate() {
            for (wj, &mij) in w.iter_mut().zip(m.row(i)) {
                *wj += mij * mvi;
            }
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        sigma = mv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        for (vj, wj) in v.iter_mut().zip(&w) {
            *vj = wj / norm;
        }
    }
    let mv: Vec<f64> = (0..m.rows).map(|i| dot(m.row(i), &v)).collect();
    sigma.max(mv.iter().map(|x| x * x).sum::<f64>().sqrt())
}

/// Haar-distributed orthogonal matrix from a seeded Gaussian draw,
/// orthonormalized by Gram–Schmidt with one reorthogonalization pass.
pub fn random_orthogonal(dim: usize, seed: u64) -> Result<Matrix> {
    if dim == 0 {
        return Err(Error::param("orthogonal dimension must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Matrix::gaussian(dim, dim, &mut rng);
    let mut cols: Vec<Vec<f64>> = (0..dim).map(|j| g.col(j)).collect();
    for j in 0..dim {
        let (done, rest) = cols.split_at_mut(j);
        let c = &mut rest[0];
        let original_norm = dot(c, c).sqrt();
        for _ in 0..2 {
            for q in done.iter() {
                let p = dot(q, c);
                for (ci, qi) in c.iter_mut().zip(q) {
                    *ci -= p * qi;
                }
            }
        }
        let norm = dot(c, c).sqrt();
        if norm <= 1e-10 * original_norm {
            return Err(Error::Numerical {
                what: "orthogonalization",
                iterations: j,
            });
        }
        for ci in c.iter_mut() {
            *ci /= norm;
        }
    }
    Ok(Matrix::from_fn(dim, dim, |i, j| cols[j][i]))
}
