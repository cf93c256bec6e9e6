//! Thin SVD by one-sided (Hestenes) Jacobi rotations.

use super::{dot, Matrix};
use crate::error::{Error, Result};

/// Thin factorization `m = u · diag(s) · vᵀ` with `r = min(rows, cols)`.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    /// rows × r, orthonormal columns.
    pub u: Matrix,
    /// Nonincreasing, nonnegative.
    pub s: Vec<f64>,
    /// cols × r, orthonormal columns.
    pub v: Matrix,
}

impl SvdFactors {
    pub fn rank_capacity(&self) -> usize {
        self.s.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        let r = self.s.len();
        partial_product(self, r)
    }

    /// Number of singular values above `rel_tol · s[0]`.
    pub fn numerical_rank(&self, rel_tol: f64) -> usize {
        let lead = self.s.first().copied().unwrap_or(0.0);
        if lead == 0.0 {
            return 0;
        }
        self.s.iter().filter(|&&x| x > rel_tol * lead).count()
    }

    /// `sqrt(Σ_{i ≥ r} s[i]²)`, the Frobenius error of a rank-`r` truncation.
    pub fn tail_energy(&self, r: usize) -> f64 {
        self.s.iter().skip(r).map(|x| x * x).sum::<f64>().sqrt()
    }
}

const SWEEP_FACTOR: usize = 100;

pub fn svd(m: &Matrix) -> Result<SvdFactors> {
    m.ensure_finite("svd input")?;
    if m.rows() >= m.cols() {
        jacobi(m)
    } else {
        let f = jacobi(&m.transpose())?;
        Ok(SvdFactors {
            u: f.v,
            s: f.s,
            v: f.u,
        })
    }
}

/// Requires rows >= cols.
fn jacobi(m: &Matrix) -> Result<SvdFactors> {
    let (rows, n) = m.shape();
    let mut a: Vec<Vec<f64>> = (0..n).map(|j| m.col(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    // columns whose squared norm falls below this are numerically zero
    let total: f64 = a.iter().map(|c| dot(c, c)).sum();
    let negligible = total * f64::EPSILON * f64::EPSILON;
    let max_sweeps = SWEEP_FACTOR * n;
    let mut converged = n == 1;
    let mut sweep = 0;
    while !converged {
        if sweep == max_sweeps {
            return Err(Error::Numerical {
                what: "jacobi svd",
                iterations: sweep,
            });
        }
        sweep += 1;
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if alpha <= negligible
                    || beta <= negligible
                    || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt()
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        converged = !rotated;
    }

    let norms: Vec<f64> = a.iter().map(|col| dot(col, col).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let lead = norms[order[0]];
    let floor = lead * f64::EPSILON * rows.max(n) as f64;
    let mut s = Vec::with_capacity(n);
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut v_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for &j in &order {
        let sigma = norms[j];
        v_cols.push(v[j].clone());
        if sigma > floor && sigma > 0.0 {
            s.push(sigma);
            u_cols.push(a[j].iter().map(|x| x / sigma).collect());
        } else {
            // rank-deficient direction: u is completed below
            s.push(if sigma > 0.0 { sigma } else { 0.0 });
            missing.push(u_cols.len());
            u_cols.push(Vec::new());
        }
    }
    complete_basis(&mut u_cols, &missing, rows);

    Ok(SvdFactors {
        u: Matrix::from_fn(rows, n, |i, j| u_cols[j][i]),
        s,
        v: Matrix::from_fn(n, n, |i, j| v_cols[j][i]),
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills the empty slots listed in `missing` with unit vectors orthogonal to
/// every other column. Each slot takes the coordinate axis least covered by
/// the columns filled so far.
fn complete_basis(cols: &mut [Vec<f64>], missing: &[usize], dim: usize) {
    let mut covered = vec![0.0; dim];
    for c in cols.iter().filter(|c| !c.is_empty()) {
        for (w, x) in covered.iter_mut().zip(c) {
            *w += x * x;
        }
    }
    let mut tried = vec![false; dim];
    for &slot in missing {
        loop {
            let candidate = (0..dim)
                .filter(|&i| !tried[i])
                .min_by(|&a, &b| covered[a].total_cmp(&covered[b]))
                .expect("basis completion ran out of candidates");
            tried[candidate] = true;
            let mut e = vec![0.0; dim];
            e[candidate] = 1.0;
            for _ in 0..2 {
                for other in cols.iter().filter(|c| !c.is_empty()) {
                    let p = dot(other, &e);
                    for (ei, oi) in e.iter_mut().zip(other) {
                        *ei -= p * oi;
                    }
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 1e-6 {
                let col: Vec<f64> = e.into_iter().map(|x| x / norm).collect();
                for (w, x) in covered.iter_mut().zip(&col) {
                    *w += x * x;
                }
                cols[slot] = col;
                break;
            }
        }
    }
}

fn partial_product(f: &SvdFactors, r: usize) -> Matrix {
    let (rows, cols) = (f.u.rows(), f.v.rows());
    let mut out = Matrix::zeros(rows, cols);
    for k in 0..r {
        let sk = f.s[k];
        if sk == 0.0 {
            continue;
        }
        for i in 0..rows {
            let uik = sk * f.u.get(i, k);
            let row = out.row_mut(i);
            for (j, o) in row.iter_mut().enumerate() {
                *o += uik * f.v.get(j, k);
            }
        }
    }
    out
}

/// Rank-`r` reconstruction `Σ_{i<r} s[i] u_i v_iᵀ`.
pub fn truncate_rank(f: &SvdFactors, r: usize) -> Result<Matrix> {
    if r == 0 || r > f.s.len() {
        return Err(Error::param(format!(
            "truncation rank must be in 1..={}, got {r}",
            f.s.len()
        )));
    }
    Ok(partial_product(f, r))
}
