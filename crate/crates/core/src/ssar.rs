//! Cached residual correction of sparse attention across timesteps.
//!
//! At a refresh step the exact output is computed and the residual
//! `Δ(t) = A_full(t) − A_sq(t)` is cached. Later steps add the cached
//! correction to their cheap sparse, quantized result. The second-order
//! variant also caches the change of the residual between two consecutive
//! reference steps, optionally truncated to low rank.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::TimestepTrace;
use crate::numerics::{frobenius, matmul, svd, truncate_rank, Matrix};

pub fn residual(a_full: &Matrix, a_sq: &Matrix) -> Result<Matrix> {
    a_full.sub(a_sq)
}

/// Correction built at a reference step. Only `combined` is needed at
/// apply time; the parts are kept for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualCache {
    pub delta_ref: Matrix,
    /// Zero for a first-order cache.
    pub second_term: Matrix,
    pub combined: Matrix,
    pub t_ref: usize,
    pub t_ref_prev: Option<usize>,
    pub rank: usize,
}

impl ResidualCache {
    pub fn first_order(a_full: &Matrix, a_sq: &Matrix, t_ref: usize) -> Result<Self> {
        let delta_ref = residual(a_full, a_sq)?;
        Ok(Self {
            second_term: Matrix::zeros(delta_ref.rows(), delta_ref.cols()),
            combined: delta_ref.clone(),
            delta_ref,
            t_ref,
            t_ref_prev: None,
            rank: 0,
        })
    }

    /// The single matrix a deployment keeps between refreshes.
    pub fn deployed(&self) -> &Matrix {
        &self.combined
    }

    /// Number of scalars held for deployment.
    pub fn footprint(&self) -> usize {
        self.combined.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.combined.shape()
    }

    fn check(&self, m: &Matrix) -> Result<()> {
        if m.shape() != self.shape() {
            return Err(Error::shape(format!(
                "input {:?} for cache {:?}",
                m.shape(),
                self.shape()
            )));
        }
        Ok(())
    }
}

pub fn first_order_apply(a_sq_t: &Matrix, cache: &ResidualCache) -> Result<Matrix> {
    cache.check(a_sq_t)?;
    a_sq_t.add(&cache.delta_ref)
}

pub fn second_order_apply(a_sq_t: &Matrix, cache: &ResidualCache) -> Result<Matrix> {
    cache.check(a_sq_t)?;
    a_sq_t.add(&cache.combined)
}

/// Largest rank that keeps the second term exact (no factorization).
pub fn full_rank(shape: (usize, usize)) -> usize {
    shape.0.min(shape.1)
}

/// Builds the second-order cache from the reference step and the computed
/// step before it. `rank` equal to the full dimension keeps the raw
/// difference exactly; smaller ranks keep its best rank-`rank`
/// approximation.
pub fn second_order_build(
    a_full_ref: &Matrix,
    a_sq_ref: &Matrix,
    a_full_prev: &Matrix,
    a_sq_prev: &Matrix,
    rank: usize,
) -> Result<ResidualCache> {
    let delta_ref = residual(a_full_ref, a_sq_ref)?;
    let delta_prev = residual(a_full_prev, a_sq_prev)?;
    let raw = delta_ref.sub(&delta_prev)?;
    let max = full_rank(raw.shape());
    if rank == 0 || rank > max {
        return Err(Error::param(format!("rank must be in 1..={max}, got {rank}")));
    }
    let second_term = if rank == max {
        raw
    } else {
        truncate_rank(&svd(&raw)?, rank)?
    };
    let combined = delta_ref.add(&second_term)?;
    Ok(ResidualCache {
        delta_ref,
        second_term,
        combined,
        t_ref: 0,
        t_ref_prev: None,
        rank,
    })
}

impl ResidualCache {
    pub fn at(mut self, t_ref: usize, t_ref_prev: Option<usize>) -> Self {
        self.t_ref = t_ref;
        self.t_ref_prev = t_ref_prev;
        self
    }
}

/// Which timesteps are computed exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefreshPlan {
    pub total_steps: usize,
    pub interval: usize,
    pub refresh_steps: Vec<usize>,
    /// Steps right after a refresh that complete a reference pair for the
    /// second-order term.
    pub pair_steps: Vec<usize>,
}

pub fn make_refresh_plan(total: usize, interval: usize) -> Result<RefreshPlan> {
    if interval < 2 {
        return Err(Error::param(format!("refresh interval must be >= 2, got {interval}")));
    }
    if total < interval {
        return Err(Error::param(format!(
            "total steps {total} shorter than the interval {interval}"
        )));
    }
    let refresh_steps: Vec<usize> = (0..total).step_by(interval).collect();
    let pair_steps = refresh_steps.iter().map(|r| r + 1).filter(|&t| t < total).collect();
    Ok(RefreshPlan {
        total_steps: total,
        interval,
        refresh_steps,
        pair_steps,
    })
}

impl RefreshPlan {
    /// Keeps only the first reference pair, so the second-order term is
    /// built once and reused for the whole run.
    pub fn with_frozen_second_order(mut self) -> Self {
        self.pair_steps.truncate(1);
        self
    }

    pub fn is_refresh(&self, t: usize) -> bool {
        self.refresh_steps.binary_search(&t).is_ok()
    }

    pub fn is_pair(&self, t: usize) -> bool {
        self.pair_steps.binary_search(&t).is_ok()
    }

    /// Steps computed exactly; pair steps count only when `with_pairs`.
    pub fn full_steps(&self, with_pairs: bool) -> Vec<usize> {
        (0..self.total_steps)
            .filter(|&t| self.is_refresh(t) || (with_pairs && self.is_pair(t)))
            .collect()
    }

    pub fn corrected_steps(&self, with_pairs: bool) -> Vec<usize> {
        (0..self.total_steps)
            .filter(|&t| !(self.is_refresh(t) || (with_pairs && self.is_pair(t))))
            .collect()
    }

    /// Attention cost relative to computing every step exactly.
    pub fn flops_fraction(&self, density: f64, with_pairs: bool) -> f64 {
        let full = self.full_steps(with_pairs).len() as f64;
        let corrected = self.corrected_steps(with_pairs).len() as f64;
        (full + corrected * density) / self.total_steps as f64
    }
}

/// Mean first- and second-order extrapolation errors implied by a trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolationErrors {
    pub e_second: f64,
    pub e_first: f64,
    pub windows: usize,
}

/// [`extrapolation_errors`] over the trace, with windows kept inside one
/// mask epoch so a mask rebuild never counts as residual drift.
pub fn extrapolation_check(trace: &TimestepTrace, tau: usize) -> Result<ExtrapolationErrors> {
    let mut acc = ExtrapolationErrors {
        e_second: 0.0,
        e_first: 0.0,
        windows: 0,
    };
    let mut start = 0;
    while start < trace.len() {
        let e = trace.mask_epoch[start];
        let end = (start..trace.len())
            .find(|&t| trace.mask_epoch[t] != e)
            .unwrap_or(trace.len());
        let seg = &trace.residuals[start..end];
        if seg.len() >= 3 {
            let part = extrapolation_errors(seg, tau.min(seg.len() - 2))?;
            let w = part.windows as f64;
            acc.e_first += part.e_first * w;
            acc.e_second += part.e_second * w;
            acc.windows += part.windows;
        }
        start = end;
    }
    if acc.windows == 0 {
        return Err(Error::param("no mask epoch is long enough for an extrapolation window"));
    }
    acc.e_first /= acc.windows as f64;
    acc.e_second /= acc.windows as f64;
    Ok(acc)
}


/// For every reference step `r ≥ 1` and every `t` with `1 ≤ t − r ≤ tau`,
/// averages `‖Δ(t) − Δ(r)‖_F` (first order) and
/// `‖Δ(t) − Δ(r) − (Δ(r) − Δ(r−1))‖_F` (second order).
pub fn extrapolation_errors(residuals: &[Matrix], tau: usize) -> Result<ExtrapolationErrors> {
    if tau == 0 || residuals.len() < tau + 2 {
        return Err(Error::param(format!(
            "need tau >= 1 and at least tau + 2 steps, got tau={tau} with {} steps",
            residuals.len()
        )));
    }
    let (mut first, mut second, mut n) = (0.0, 0.0, 0usize);
    for r in 1..residuals.len() - 1 {
        let slope = residuals[r].sub(&residuals[r - 1])?;
        for t in r + 1..=(r + tau).min(residuals.len() - 1) {
            let drift = residuals[t].sub(&residuals[r])?;
            first += frobenius(&drift);
            second += frobenius(&drift.sub(&slope)?);
            n += 1;
        }
    }
    Ok(ExtrapolationErrors {
        e_second: second / n as f64,
        e_first: first / n as f64,
        windows: n,
    })
}

/// Singular values of the step-to-step residual change at one timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRow {
    pub step: usize,
    pub singular_values: Vec<f64>,
    /// Mean principal-angle cosine between the leading `r` left singular
    /// subspaces of this step and the next.
    pub leading_alignment: Option<f64>,
    /// Same for singular directions `r..2r`.
    pub trailing_alignment: Option<f64>,
}

pub fn residual_spectrum(trace: &TimestepTrace, r: usize) -> Result<Vec<SpectrumRow>> {
    spectrum_of(&trace.residuals, r)
}

pub fn spectrum_of(residuals: &[Matrix], r: usize) -> Result<Vec<SpectrumRow>> {
    if residuals.len() < 2 {
        return Err(Error::param("spectrum needs at least two timesteps"));
    }
    if r == 0 {
        return Err(Error::param("subspace dimension must be >= 1"));
    }
    let mut factors = Vec::with_capacity(residuals.len() - 1);
    for t in 1..residuals.len() {
        factors.push(svd(&residuals[t].sub(&residuals[t - 1])?)?);
    }
    let mut rows = Vec::with_capacity(factors.len());
    for (i, f) in factors.iter().enumerate() {
        let next = factors.get(i + 1);
        let align = |lo: usize| -> Result<Option<f64>> {
            match next {
                Some(g) if lo + r <= f.s.len() && has_energy(f, lo, r) && has_energy(g, lo, r) => {
                    subspace_alignment(&f.u, &g.u, lo, r).map(Some)
                }
                _ => Ok(None),
            }
        };
        rows.push(SpectrumRow {
            step: i + 1,
            singular_values: f.s.clone(),
            leading_alignment: align(0)?,
            trailing_alignment: align(r)?,
        });
    }
    Ok(rows)
}

fn has_energy(f: &crate::numerics::SvdFactors, lo: usize, r: usize) -> bool {
    let lead = f.s.first().copied().unwrap_or(0.0);
    lead > 0.0 && f.s[lo + r - 1] > 1e-12 * lead
}

/// Mean cosine of the principal angles between column blocks `lo..lo+r`.
fn subspace_alignment(a: &Matrix, b: &Matrix, lo: usize, r: usize) -> Result<f64> {
    let cols: Vec<usize> = (lo..lo + r).collect();
    let pick = |m: &Matrix| Matrix::from_fn(m.rows(), r, |i, j| m.get(i, cols[j]));
    let overlap = matmul(&pick(a).transpose(), &pick(b))?;
    let s = svd(&overlap)?.s;
    Ok(s.iter().map(|c| c.min(1.0)).sum::<f64>() / r as f64)
}

pub fn write_spectrum_csv<W: Write>(out: W, rows: &[SpectrumRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "index", "singular_value", "leading_alignment", "trailing_alignment"])?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for row in rows {
        for (i, s) in row.singular_values.iter().enumerate() {
            w.write_record([
                row.step.to_string(),
                i.to_string(),
                s.to_string(),
                opt(row.leading_alignment),
                opt(row.trailing_alignment),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("spectrum", e))?;
    Ok(())
}

const BLOB_MAGIC: &[u8] = b"QSCACHE1\n";
/// Upper bound on entries per matrix accepted when decoding.
pub const MAX_BLOB_ENTRIES: usize = 1 << 22;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobHeader {
    rows: usize,
    cols: usize,
    t_ref: usize,
    t_ref_prev: Option<usize>,
    rank: usize,
    /// Matrices that follow, in order.
    matrices: Vec<String>,
}

const BLOB_MATRICES: [&str; 3] = ["combined", "delta_ref", "second_term"];

/// Serializes the cache as a magic line, a JSON header line and the
/// little-endian `f64` entries of each matrix in row-major order.
pub fn encode_cache(cache: &ResidualCache) -> Vec<u8> {
    let (rows, cols) = cache.shape();
    let header = BlobHeader {
        rows,
        cols,
        t_ref: cache.t_ref,
        t_ref_prev: cache.t_ref_prev,
        rank: cache.rank,
        matrices: BLOB_MATRICES.iter().map(|s| s.to_string()).collect(),
    };
    let mut out = BLOB_MAGIC.to_vec();
    out.extend(serde_json::to_vec(&header).expect("header serializes"));
    out.push(b'\n');
    for m in [&cache.combined, &cache.delta_ref, &cache.second_term] {
        for x in m.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode_cache(bytes: &[u8]) -> Result<ResidualCache> {
    let rest = bytes
        .strip_prefix(BLOB_MAGIC)
        .ok_or_else(|| Error::Format("missing cache magic".into()))?;
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("unterminated cache header".into()))?;
    let header: BlobHeader = serde_json::from_slice(&rest[..nl])?;
    if header.matrices != BLOB_MATRICES {
        return Err(Error::Format(format!("unexpected matrix list {:?}", header.matrices)));
    }
    let entries = header
        .rows
        .checked_mul(header.cols)
        .filter(|&n| n > 0 && n <= MAX_BLOB_ENTRIES)
        .ok_or_else(|| Error::Format(format!("bad cache shape {}x{}", header.rows, header.cols)))?;
    let body = &rest[nl + 1..];
    if body.len() != 3 * entries * 8 {
        return Err(Error::Format(format!(
            "cache body has {} bytes, expected {}",
            body.len(),
            3 * entries * 8
        )));
    }
    let mut mats = body.chunks_exact(entries * 8).map(|chunk| {
        let data = chunk
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        Matrix::new(header.rows, header.cols, data)
    });
    let combined = mats.next().expect("three matrices")?;
    let delta_ref = mats.next().expect("three matrices")?;
    let second_term = mats.next().expect("three matrices")?;
    if header.rank > full_rank((header.rows, header.cols)) {
        return Err(Error::Format(format!("rank {} exceeds matrix size", header.rank)));
    }
    Ok(ResidualCache {
        delta_ref,
        second_term,
        combined,
        t_ref: header.t_ref,
        t_ref_prev: header.t_ref_prev,
        rank: header.rank,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gauss(r: usize, c: usize, seed: u64) -> Matrix {
        Matrix::gaussian(r, c, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn residual_examples() {
        let a = gauss(5, 5, 1);
        let b = gauss(5, 5, 2);
        assert_eq!(residual(&a, &a).unwrap(), Matrix::zeros(5, 5));
        let d = residual(&a, &b).unwrap();
        assert!(d.add(&b).unwrap().sub(&a).unwrap().max_abs() < 1e-15);
        assert!(residual(&a, &gauss(5, 4, 3)).is_err());
    }

    #[test]
    fn first_order_examples() {
        let (full, sq) = (gauss(6, 6, 4), gauss(6, 6, 5));
        let cache = ResidualCache::first_order(&full, &sq, 0).unwrap();
        assert!(first_order_apply(&sq, &cache).unwrap().sub(&full).unwrap().max_abs() < 1e-15);

        // constant residual: exact at every later step
        let delta = full.sub(&sq).unwrap();
        for s in 10..13 {
            let sq_t = gauss(6, 6, s);
            let full_t = sq_t.add(&delta).unwrap();
            let err = first_order_apply(&sq_t, &cache).unwrap().sub(&full_t).unwrap().max_abs();
            assert!(err < 1e-14);
        }

        // linear drift: error is (t − t_ref)·‖D‖
        let d = gauss(6, 6, 20).scale(0.1);
        for k in 1..4 {
            let sq_t = gauss(6, 6, 30 + k);
            let full_t = sq_t.add(&delta).unwrap().add(&d.scale(k as f64)).unwrap();
            let err = frobenius(&full_t.sub(&first_order_apply(&sq_t, &cache).unwrap()).unwrap());
            assert!((err - k as f64 * frobenius(&d)).abs() < 1e-12);
        }
    }

    #[test]
    fn second_order_examples() {
        let (full, sq) = (gauss(8, 8, 6), gauss(8, 8, 7));
        let same = second_order_build(&full, &sq, &full, &sq, 3).unwrap();
        assert_eq!(same.second_term, Matrix::zeros(8, 8));
        assert_eq!(same.combined, same.delta_ref);

        let (full_p, sq_p) = (gauss(8, 8, 8), gauss(8, 8, 9));
        let exact = second_order_build(&full, &sq, &full_p, &sq_p, 8).unwrap();
        let raw = full.sub(&sq).unwrap().sub(&full_p.sub(&sq_p).unwrap()).unwrap();
        assert_eq!(exact.second_term, raw);
        assert!(second_order_build(&full, &sq, &full_p, &sq_p, 0).is_err());
        assert!(second_order_build(&full, &sq, &full_p, &sq_p, 9).is_err());

        // rank-one drift is recovered at rank 1
        let u = gauss(8, 1, 10);
        let v = gauss(1, 8, 11);
        let drift = matmul(&u, &v).unwrap();
        let full_prev = sq.add(&full.sub(&sq).unwrap().sub(&drift).unwrap()).unwrap();
        let c = second_order_build(&full, &sq, &full_prev, &sq, 1).unwrap();
        assert!(c.second_term.sub(&drift).unwrap().max_abs() < 1e-6);
        assert!(c.combined.sub(&c.delta_ref.add(&c.second_term).unwrap()).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn second_order_apply_examples() {
        let (full, sq) = (gauss(6, 6, 12), gauss(6, 6, 13));
        let flat = second_order_build(&full, &sq, &full, &sq, 2).unwrap();
        let sq_t = gauss(6, 6, 14);
        assert_eq!(
            second_order_apply(&sq_t, &flat).unwrap(),
            first_order_apply(&sq_t, &flat).unwrap()
        );

        // linear drift with consecutive references: exact one step ahead
        let delta_prev = gauss(6, 6, 15);
        let d = gauss(6, 6, 16);
        let delta_ref = delta_prev.add(&d).unwrap();
        let sq_prev = gauss(6, 6, 17);
        let full_prev = sq_prev.add(&delta_prev).unwrap();
        let full_ref = sq.add(&delta_ref).unwrap();
        let cache = second_order_build(&full_ref, &sq, &full_prev, &sq_prev, 6).unwrap();
        let full_next = sq_t.add(&delta_ref).unwrap().add(&d).unwrap();
        let err = second_order_apply(&sq_t, &cache).unwrap().sub(&full_next).unwrap().max_abs();
        assert!(err < 1e-12);
    }

    #[test]
    fn truncated_second_term_has_bounded_rank() {
        let (a, b, c, d) = (gauss(10, 10, 18), gauss(10, 10, 19), gauss(10, 10, 20), gauss(10, 10, 21));
        let cache = second_order_build(&a, &b, &c, &d, 3).unwrap();
        let s = svd(&cache.second_term).unwrap();
        assert!(s.numerical_rank(1e-8) <= 3);
        let raw = a.sub(&b).unwrap().sub(&c.sub(&d).unwrap()).unwrap();
        let tail = svd(&raw).unwrap().tail_energy(3);
        assert!((frobenius(&raw.sub(&cache.second_term).unwrap()) - tail).abs() < 1e-8);
    }

    #[test]
    fn refresh_plan_examples() {
        let p = make_refresh_plan(10, 5).unwrap();
        assert_eq!(p.refresh_steps, vec![0, 5]);
        assert_eq!(p.pair_steps, vec![1, 6]);
        assert_eq!(make_refresh_plan(7, 7).unwrap().refresh_steps, vec![0]);
        assert!(make_refresh_plan(10, 1).is_err());
        assert!(make_refresh_plan(3, 5).is_err());

        let p = make_refresh_plan(50, 5).unwrap();
        assert_eq!(p.refresh_steps.len(), 10);
        assert_eq!(p.corrected_steps(false).len(), 40);
        assert!((p.flops_fraction(0.25, false) - (0.2 + 0.8 * 0.25)).abs() < 1e-15);
        assert_eq!(p.corrected_steps(true).len(), 30);
        assert!((p.flops_fraction(0.25, true) - (20.0 + 30.0 * 0.25) / 50.0).abs() < 1e-15);
        assert_eq!(p.clone().with_frozen_second_order().pair_steps, vec![1]);
    }

    #[test]
    fn extrapolation_examples() {
        let base = gauss(5, 5, 22);
        let stationary = vec![base.clone(); 8];
        let e = extrapolation_errors(&stationary, 3).unwrap();
        assert_eq!((e.e_first, e.e_second), (0.0, 0.0));

        let d = gauss(5, 5, 23);
        let linear: Vec<Matrix> = (0..8).map(|t| base.add(&d.scale(t as f64)).unwrap()).collect();
        // one step ahead the slope term cancels the drift exactly
        let e = extrapolation_errors(&linear, 1).unwrap();
        assert!(e.e_second < 1e-12 && e.e_first > 1.0);
        // further out it lags by (t - r - 1) slopes instead of (t - r)
        let e = extrapolation_errors(&linear, 3).unwrap();
        let step = frobenius(&d);
        // 15 windows: offsets 1,2,3 from r = 1..=4, then 1,2 and 1
        assert_eq!(e.windows, 15);
        assert!((e.e_first - 28.0 / 15.0 * step).abs() < 1e-9 * step);
        assert!((e.e_second - 13.0 / 15.0 * step).abs() < 1e-9 * step);
        assert!(extrapolation_errors(&linear[..4], 3).is_err());
        assert!(extrapolation_errors(&linear, 0).is_err());
    }

    #[test]
    fn spectrum_examples() {
        let base = gauss(6, 6, 24);
        let rows = spectrum_of(&vec![base.clone(); 4], 2).unwrap();
        assert!(rows.iter().all(|r| r.singular_values.iter().all(|&s| s == 0.0)));

        let u = gauss(6, 1, 25);
        let v = gauss(1, 6, 26);
        let d = matmul(&u, &v).unwrap();
        let seq: Vec<Matrix> = (0..5).map(|t| base.add(&d.scale((t * t) as f64)).unwrap()).collect();
        for row in spectrum_of(&seq, 1).unwrap() {
            let lead = row.singular_values[0];
            assert!(lead > 0.0);
            assert!(row.singular_values[1..].iter().all(|&s| s < 1e-10 * lead));
        }
    }

    #[test]
    fn blob_round_trip() {
        let (a, b, c, d) = (gauss(4, 3, 27), gauss(4, 3, 28), gauss(4, 3, 29), gauss(4, 3, 30));
        let cache = second_order_build(&a, &b, &c, &d, 2).unwrap().at(5, Some(4));
        let bytes = encode_cache(&cache);
        assert_eq!(decode_cache(&bytes).unwrap(), cache);
        assert!(decode_cache(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_cache(b"QSCACHE1\n{}\n").is_err());
        assert!(decode_cache(b"nope").is_err());
    }

    #[test]
    fn storage_parity() {
        let (a, b, c, d) = (gauss(6, 6, 31), gauss(6, 6, 32), gauss(6, 6, 33), gauss(6, 6, 34));
        let first = ResidualCache::first_order(&a, &b, 0).unwrap();
        let second = second_order_build(&a, &b, &c, &d, 2).unwrap();
        assert_eq!(first.footprint(), second.footprint());
        assert_eq!(second.footprint(), 36);
    }
}
