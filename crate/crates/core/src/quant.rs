//! Uniform affine quantization simulated in floating point.
//!
//! A value `x` in group `g` maps to the code
//! `clip(round(x / s_g) + z_g, 0, 2^bits - 1)` and back to `s_g · (code - z_g)`.
//! Rounding is half-to-even.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{frobenius, matmul_nt, spectral_norm, Matrix};

/// Smallest scale produced by calibration.
pub const SCALE_FLOOR: f64 = 1e-12;

/// Power-iteration steps used for the spectral norms in [`qk_noise`].
pub const SPECTRAL_ITERS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    /// One group per column.
    PerChannel,
    /// One group per row.
    PerToken,
}

impl Granularity {
    pub fn groups(self, rows: usize, cols: usize) -> usize {
        match self {
            Granularity::PerTensor => 1,
            Granularity::PerChannel => cols,
            Granularity::PerToken => rows,
        }
    }

    #[inline]
    pub fn group_of(self, i: usize, j: usize) -> usize {
        match self {
            Granularity::PerTensor => 0,
            Granularity::PerChannel => j,
            Granularity::PerToken => i,
        }
    }
}

impl std::str::FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_tensor" => Ok(Granularity::PerTensor),
            "per_channel" => Ok(Granularity::PerChannel),
            "per_token" => Ok(Granularity::PerToken),
            other => Err(Error::param(format!("unknown granularity `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams")]
pub struct QuantParams {
    bits: u32,
    granularity: Granularity,
    scales: Vec<f64>,
    zero_points: Vec<i64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParams {
    bits: u32,
    granularity: Granularity,
    scales: Vec<f64>,
    zero_points: Vec<i64>,
}

impl TryFrom<RawParams> for QuantParams {
    type Error = Error;

    fn try_from(raw: RawParams) -> Result<Self> {
        QuantParams::new(raw.bits, raw.granularity, raw.scales, raw.zero_points)
    }
}

pub fn check_bits(bits: u32) -> Result<()> {
    if !(2..=16).contains(&bits) {
        return Err(Error::param(format!("bit-width must be in [2, 16], got {bits}")));
    }
    Ok(())
}

impl QuantParams {
    pub fn new(
        bits: u32,
        granularity: Granularity,
        scales: Vec<f64>,
        zero_points: Vec<i64>,
    ) -> Result<Self> {
        check_bits(bits)?;
        if scales.is_empty() || scales.len() != zero_points.len() {
            return Err(Error::param(format!(
                "{} scales for {} zero points",
                scales.len(),
                zero_points.len()
            )));
        }
        if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::param(format!("scale must be finite and positive, got {s}")));
        }
        let qmax = (1i64 << bits) - 1;
        if let Some(z) = zero_points.iter().find(|z| !(0..=qmax).contains(*z)) {
            return Err(Error::param(format!("zero point {z} outside [0, {qmax}]")));
        }
        Ok(Self {
            bits,
            granularity,
            scales,
            zero_points,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("params serialize")
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn zero_points(&self) -> &[i64] {
        &self.zero_points
    }

    pub fn qmax(&self) -> i64 {
        (1i64 << self.bits) - 1
    }

    pub fn max_scale(&self) -> f64 {
        self.scales.iter().copied().fold(0.0, f64::max)
    }

    pub fn groups(&self) -> usize {
        self.scales.len()
    }

    /// Same zero points and granularity, new positive scales.
    pub fn with_scales(&self, scales: Vec<f64>) -> Result<Self> {
        Self::new(self.bits, self.granularity, scales, self.zero_points.clone())
    }

    pub fn check_shape(&self, rows: usize, cols: usize) -> Result<()> {
        let want = self.granularity.groups(rows, cols);
        if want != self.scales.len() {
            return Err(Error::shape(format!(
                "{:?} params with {} groups applied to {rows}x{cols} tensor (needs {want})",
                self.granularity,
                self.scales.len()
            )));
        }
        Ok(())
    }

    #[inline]
    fn code(&self, x: f64, g: usize) -> i64 {
        let raw = (x / self.scales[g]).round_ties_even() + self.zero_points[g] as f64;
        raw.clamp(0.0, self.qmax() as f64) as i64
    }

    /// Whether `x` lands inside the code range without saturating.
    #[inline]
    pub fn is_unclipped(&self, x: f64, g: usize) -> bool {
        let raw = (x / self.scales[g]).round_ties_even() + self.zero_points[g] as f64;
        raw >= 0.0 && raw <= self.qmax() as f64
    }
}

/// Integer codes together with the parameters that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct IntMatrix {
    rows: usize,
    cols: usize,
    codes: Vec<u32>,
    params: QuantParams,
}

impl IntMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn codes(&self) -> &[u32] {
        &self.codes
    }

    pub fn code(&self, i: usize, j: usize) -> u32 {
        self.codes[i * self.cols + j]
    }

    pub fn params(&self) -> &QuantParams {
        &self.params
    }
}

/// Min–max calibration. Each group's range is widened to contain zero so the
/// zero point is representable; a constant group gets `scale = |c|` (floored)
/// and reproduces its constant exactly.
pub fn calibrate_minmax(x: &Matrix, bits: u32, granularity: Granularity) -> Result<QuantParams> {
    check_bits(bits)?;
    x.ensure_finite("calibration tensor")?;
    let (rows, cols) = x.shape();
    let groups = granularity.groups(rows, cols);
    let mut lo = vec![f64::INFINITY; groups];
    let mut hi = vec![f64::NEG_INFINITY; groups];
    for i in 0..rows {
        for (j, &v) in x.row(i).iter().enumerate() {
            let g = granularity.group_of(i, j);
            lo[g] = lo[g].min(v);
            hi[g] = hi[g].max(v);
        }
    }
    let qmax = ((1u64 << bits) - 1) as f64;
    let mut scales = Vec::with_capacity(groups);
    let mut zero_points = Vec::with_capacity(groups);
    for (&l, &h) in lo.iter().zip(&hi) {
        if l == h {
            scales.push(l.abs().max(SCALE_FLOOR));
            zero_points.push(i64::from(l < 0.0));
            continue;
        }
        let (l, h) = (l.min(0.0), h.max(0.0));
        let s = ((h - l) / qmax).max(SCALE_FLOOR);
        scales.push(s);
        zero_points.push((-l / s).round_ties_even().clamp(0.0, qmax) as i64);
    }
    QuantParams::new(bits, granularity, scales, zero_points)
}

pub fn quantize(x: &Matrix, p: &QuantParams) -> Result<IntMatrix> {
    let (rows, cols) = x.shape();
    p.check_shape(rows, cols)?;
    let mut codes = Vec::with_capacity(x.len());
    for i in 0..rows {
        for (j, &v) in x.row(i).iter().enumerate() {
            codes.push(p.code(v, p.granularity.group_of(i, j)) as u32);
        }
    }
    Ok(IntMatrix {
        rows,
        cols,
        codes,
        params: p.clone(),
    })
}

pub fn dequantize(q: &IntMatrix) -> Matrix {
    let p = &q.params;
    Matrix::from_fn(q.rows, q.cols, |i, j| {
        let g = p.granularity.group_of(i, j);
        p.scales[g] * (q.codes[i * q.cols + j] as i64 - p.zero_points[g]) as f64
    })
}

pub fn fake_quant(x: &Matrix, p: &QuantParams) -> Result<Matrix> {
    Ok(dequantize(&quantize(x, p)?))
}

/// Per-token min–max parameters recomputed from `x` itself, then applied.
pub fn fake_quant_dynamic(x: &Matrix, bits: u32) -> Result<Matrix> {
    let p = calibrate_minmax(x, bits, Granularity::PerToken)?;
    fake_quant(x, &p)
}

/// Sum of squared reconstruction errors.
pub fn recon_loss(x: &Matrix, p: &QuantParams) -> Result<f64> {
    let fq = fake_quant(x, p)?;
    Ok(x.data()
        .iter()
        .zip(fq.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// Quantization perturbation of the attention logits `Q Kᵀ`.
#[derive(Debug, Clone)]
pub struct QkNoise {
    /// `Q̂ K̂ᵀ − Q Kᵀ`.
    pub epsilon: Matrix,
    /// Analytic bound on `‖epsilon‖_F`, valid when nothing saturates.
    pub delta_bound: f64,
    /// True when some entry of `q` or `k` saturated; the bound does not
    /// cover that case.
    pub clipped: bool,
}

/// Bound on the Frobenius norm of a dequantization error over an
/// unclipped `rows × cols` tensor: every entry is off by at most `s/2`.
fn rounding_error_bound(rows: usize, cols: usize, p: &QuantParams) -> f64 {
    ((rows * cols) as f64).sqrt() * p.max_scale() / 2.0
}

fn any_clipped(x: &Matrix, p: &QuantParams) -> bool {
    (0..x.rows()).any(|i| {
        x.row(i)
            .iter()
            .enumerate()
            .any(|(j, &v)| !p.is_unclipped(v, p.granularity.group_of(i, j)))
    })
}

/// Perturbation `ε = Q̂K̂ᵀ − QKᵀ` with `Q̂, K̂` the fake-quantized inputs, and
/// the triangle-inequality bound
/// `‖E_Q‖_F ‖K‖₂ + ‖Q‖₂ ‖E_K‖_F + ‖E_Q‖_F ‖E_K‖_F`.
pub fn qk_noise(q: &Matrix, k: &Matrix, pq: &QuantParams, pk: &QuantParams) -> Result<QkNoise> {
    if q.cols() != k.cols() {
        return Err(Error::shape(format!(
            "q has {} columns, k has {}",
            q.cols(),
            k.cols()
        )));
    }
    let q_hat = fake_quant(q, pq)?;
    let k_hat = fake_quant(k, pk)?;
    let exact = matmul_nt(q, k)?;
    let epsilon = matmul_nt(&q_hat, &k_hat)?.sub(&exact)?;

    let eq = rounding_error_bound(q.rows(), q.cols(), pq);
    let ek = rounding_error_bound(k.rows(), k.cols(), pk);
    let delta_bound =
        eq * spectral_norm(k, SPECTRAL_ITERS) + spectral_norm(q, SPECTRAL_ITERS) * ek + eq * ek;
    Ok(QkNoise {
        epsilon,
        delta_bound,
        clipped: any_clipped(q, pq) || any_clipped(k, pk),
    })
}

impl QkNoise {
    pub fn norm(&self) -> f64 {
        frobenius(&self.epsilon)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{matmul, random_orthogonal};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(s: f64, z: i64, bits: u32) -> QuantParams {
        QuantParams::new(bits, Granularity::PerTensor, vec![s], vec![z]).unwrap()
    }

    fn one(x: f64) -> Matrix {
        Matrix::from_rows(&[[x]])
    }

    #[test]
    fn minmax_unit_grid() {
        let x = Matrix::from_fn(1, 256, |_, j| j as f64 / 255.0);
        let p = calibrate_minmax(&x, 8, Granularity::PerTensor).unwrap();
        assert!((p.scales()[0] - 1.0 / 255.0).abs() < 1e-15);
        assert_eq!(p.zero_points()[0], 0);
    }

    #[test]
    fn minmax_symmetric_midpoint() {
        let x = Matrix::from_rows(&[[-1.0, -0.3, 0.2, 1.0]]);
        let p = calibrate_minmax(&x, 4, Granularity::PerTensor).unwrap();
        assert!((p.scales()[0] - 2.0 / 15.0).abs() < 1e-15);
        // -min/s = 7.5, ties to even
        assert_eq!(p.zero_points()[0], 8);
    }

    #[test]
    fn constant_group_is_exact() {
        for c in [5.0, -3.25, 0.0, 1e-3] {
            let x = Matrix::filled(3, 2, c);
            for g in [
                Granularity::PerTensor,
                Granularity::PerChannel,
                Granularity::PerToken,
            ] {
                let p = calibrate_minmax(&x, 8, g).unwrap();
                assert_eq!(fake_quant(&x, &p).unwrap(), x, "c={c} {g:?}");
            }
        }
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(&one(0.0), &scalar(1.0, 8, 4)).unwrap().code(0, 0), 8);
        assert_eq!(quantize(&one(0.34), &scalar(0.1, 0, 4)).unwrap().code(0, 0), 3);
        assert_eq!(quantize(&one(100.0), &scalar(0.1, 0, 4)).unwrap().code(0, 0), 15);
    }

    #[test]
    fn dequantize_examples() {
        let q = quantize(&one(0.0), &scalar(1.0, 8, 4)).unwrap();
        assert_eq!(dequantize(&q).get(0, 0), 0.0);
        let q = quantize(&one(0.34), &scalar(0.1, 0, 4)).unwrap();
        assert!((dequantize(&q).get(0, 0) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn recon_loss_examples() {
        let p = scalar(0.1, 0, 4);
        assert!((recon_loss(&one(0.34), &p).unwrap() - 0.0016).abs() < 1e-15);
        let on_grid = Matrix::from_rows(&[[0.0, 0.5, 1.0]]);
        assert_eq!(recon_loss(&on_grid, &scalar(0.5, 0, 4)).unwrap(), 0.0);
    }

    #[test]
    fn recon_loss_drops_with_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let x = Matrix::gaussian(16, 8, &mut rng);
            let losses: Vec<f64> = (2..=12)
                .map(|b| {
                    let p = calibrate_minmax(&x, b, Granularity::PerChannel).unwrap();
                    recon_loss(&x, &p).unwrap()
                })
                .collect();
            assert!(losses.windows(2).all(|w| w[1] <= w[0]), "{losses:?}");
        }
    }

    #[test]
    fn shape_mismatch() {
        let p = calibrate_minmax(&Matrix::zeros(2, 3), 8, Granularity::PerChannel).unwrap();
        assert!(matches!(quantize(&Matrix::zeros(2, 4), &p), Err(Error::Shape(_))));
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(QuantParams::new(1, Granularity::PerTensor, vec![1.0], vec![0]).is_err());
        assert!(QuantParams::new(4, Granularity::PerTensor, vec![0.0], vec![0]).is_err());
        assert!(QuantParams::new(4, Granularity::PerTensor, vec![1.0], vec![16]).is_err());
        assert!(QuantParams::new(4, Granularity::PerTensor, vec![1.0], vec![]).is_err());
    }

    #[test]
    fn json_shape() {
        let p = scalar(0.5, 3, 4);
        let v: serde_json::Value = serde_json::from_str(&p.to_json()).unwrap();
        assert_eq!(v["bits"], 4);
        assert_eq!(v["granularity"], "per_tensor");
        assert_eq!(v["scales"][0], 0.5);
        assert_eq!(v["zero_points"][0], 3);
        assert_eq!(QuantParams::from_json(&p.to_json()).unwrap(), p);
        assert!(QuantParams::from_json(r#"{"bits":4,"granularity":"per_tensor","scales":[-1],"zero_points":[0]}"#).is_err());
    }

    #[test]
    fn per_channel_with_equal_stats_matches_per_tensor() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut x = Matrix::gaussian(10, 4, &mut rng);
        // give every column the same extremes
        for j in 0..4 {
            x.set(0, j, -3.0);
            x.set(1, j, 2.5);
        }
        let pt = calibrate_minmax(&x, 6, Granularity::PerTensor).unwrap();
        let pc = calibrate_minmax(&x, 6, Granularity::PerChannel).unwrap();
        assert_eq!(fake_quant(&x, &pt).unwrap(), fake_quant(&x, &pc).unwrap());
    }

    #[test]
    fn rotation_preserves_exact_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = Matrix::gaussian(12, 8, &mut rng);
        let k = Matrix::gaussian(12, 8, &mut rng);
        let h = random_orthogonal(8, 1).unwrap();
        let ht = h.transpose();
        let rotated = matmul_nt(&matmul(&q, &ht).unwrap(), &matmul(&k, &ht).unwrap()).unwrap();
        let plain = matmul_nt(&q, &k).unwrap();
        assert!(rotated.sub(&plain).unwrap().max_abs() < 1e-9);
    }

    #[test]
    fn qk_noise_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let q = Matrix::gaussian(32, 8, &mut rng);
        let k = Matrix::gaussian(32, 8, &mut rng);
        let pq = calibrate_minmax(&q, 16, Granularity::PerToken).unwrap();
        let pk = calibrate_minmax(&k, 16, Granularity::PerToken).unwrap();
        let n = qk_noise(&q, &k, &pq, &pk).unwrap();
        assert!(n.norm() < 1e-3 * frobenius(&matmul_nt(&q, &k).unwrap()));

        // already on the grid: no perturbation at all
        let pg = scalar(0.25, 8, 6);
        let qg = fake_quant(&q, &pg).unwrap();
        let kg = fake_quant(&k, &pg).unwrap();
        let n = qk_noise(&qg, &kg, &pg, &pg).unwrap();
        assert_eq!(n.norm(), 0.0);

        assert!(qk_noise(&q, &Matrix::zeros(3, 5), &pq, &pk).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn quantize_is_monotone(seed in any::<u64>(), bits in 2u32..=10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Matrix::gaussian(1, 64, &mut rng).scale(3.0);
            let p = calibrate_minmax(&x, bits, Granularity::PerTensor).unwrap();
            let mut xs = x.data().to_vec();
            xs.sort_by(f64::total_cmp);
            // widen past the calibrated range to exercise saturation
            xs.insert(0, xs[0] - 10.0);
            xs.push(xs[xs.len() - 1] + 10.0);
            let sorted = Matrix::new(1, xs.len(), xs).unwrap();
            let p = QuantParams::new(bits, Granularity::PerTensor, p.scales().to_vec(), p.zero_points().to_vec()).unwrap();
            let codes = quantize(&sorted, &p).unwrap();
            prop_assert!(codes.codes().windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn fake_quant_idempotent(seed in any::<u64>(), bits in 2u32..=16) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Matrix::gaussian(6, 5, &mut rng);
            let p = calibrate_minmax(&x, bits, Granularity::PerChannel).unwrap();
            let once = fake_quant(&x, &p).unwrap();
            prop_assert_eq!(fake_quant(&once, &p).unwrap(), once);
        }
    }
}
