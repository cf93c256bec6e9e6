//! Full and masked attention, mask construction, and the attention-shift
//! decomposition under joint quantization and sparsity.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{descending_order, frobenius, matmul, matmul_nt, row_softmax, Matrix};

#[derive(Debug, Clone)]
pub struct AttentionInputs {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub scale: f64,
}

impl AttentionInputs {
    pub fn new(q: Matrix, k: Matrix, v: Matrix) -> Result<Self> {
        if q.shape() != k.shape() || q.rows() != v.rows() {
            return Err(Error::shape(format!(
                "q {:?}, k {:?}, v {:?}",
                q.shape(),
                k.shape(),
                v.shape()
            )));
        }
        let scale = 1.0 / (q.cols() as f64).sqrt();
        Ok(Self { q, k, v, scale })
    }

    pub fn len(&self) -> usize {
        self.q.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Scaled logits `Q Kᵀ / sqrt(d_k)`.
    pub fn logits(&self) -> Result<Matrix> {
        Ok(matmul_nt(&self.q, &self.k)?.scale(self.scale))
    }
}

/// Attention map together with its product against `V`.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub map: Matrix,
    pub out: Matrix,
}

pub fn full_attention(input: &AttentionInputs) -> Result<AttentionOutput> {
    let map = row_softmax(&input.logits()?)?;
    let out = matmul(&map, &input.v)?;
    Ok(AttentionOutput { map, out })
}

/// How masked pairs enter the softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Masked logits become `-inf` and receive exactly zero probability.
    #[default]
    Exclude,
    /// Logits are multiplied by the 0/1 mask, so masked pairs keep weight
    /// `exp(0)` before normalization.
    Literal,
}

pub fn sparse_attention(input: &AttentionInputs, mask: &SparsityMask) -> Result<AttentionOutput> {
    sparse_attention_with(input, mask, MaskMode::Exclude)
}

pub fn sparse_attention_with(
    input: &AttentionInputs,
    mask: &SparsityMask,
    mode: MaskMode,
) -> Result<AttentionOutput> {
    let logits = input.logits()?;
    let masked = mask.apply(&logits, mode)?;
    let map = row_softmax(&masked)?;
    let out = matmul(&map, &input.v)?;
    Ok(AttentionOutput { map, out })
}

/// Largest mask side accepted from serialized input.
pub const MAX_MASK_SIDE: usize = 4096;

/// Square boolean keep-mask over token pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityMask {
    len: usize,
    bits: Vec<bool>,
    density: f64,
}

impl SparsityMask {
    /// Builds a mask from row-major bits. `density` is the target density the
    /// mask was built for.
    pub fn new(len: usize, bits: Vec<bool>, density: f64) -> Result<Self> {
        if len == 0 || bits.len() != len * len {
            return Err(Error::shape(format!(
                "mask of side {len} needs {} bits, got {}",
                len * len,
                bits.len()
            )));
        }
        check_density(density)?;
        if let Some(row) = (0..len).find(|&i| !bits[i * len..(i + 1) * len].iter().any(|&b| b)) {
            return Err(Error::DegenerateRow { row });
        }
        Ok(Self { len, bits, density })
    }

    pub fn full(len: usize) -> Self {
        Self::new(len, vec![true; len * len], 1.0).expect("full mask is valid")
    }

    pub fn identity(len: usize) -> Self {
        let bits = (0..len * len).map(|p| p / len == p % len).collect();
        Self::new(len, bits, 1.0 / len as f64).expect("identity mask is valid")
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn target_density(&self) -> f64 {
        self.density
    }

    #[inline]
    pub fn keep(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.len + j]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn actual_density(&self) -> f64 {
        self.popcount() as f64 / (self.len * self.len) as f64
    }

    pub fn is_subset_of(&self, other: &SparsityMask) -> bool {
        self.len == other.len && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn apply(&self, logits: &Matrix, mode: MaskMode) -> Result<Matrix> {
        if logits.shape() != (self.len, self.len) {
            return Err(Error::shape(format!(
                "mask of side {} on logits {:?}",
                self.len,
                logits.shape()
            )));
        }
        let mut out = logits.clone();
        for (x, &keep) in out.data_mut().iter_mut().zip(&self.bits) {
            if !keep {
                *x = match mode {
                    MaskMode::Exclude => f64::NEG_INFINITY,
                    MaskMode::Literal => 0.0,
                };
            }
        }
        Ok(out)
    }

    /// Run-length encoding: alternating run lengths over the row-major bits,
    /// starting with a (possibly empty) run of `false`.
    pub fn runs(&self) -> Vec<usize> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut count = 0;
        for &b in &self.bits {
            if b == current {
                count += 1;
            } else {
                runs.push(count);
                current = b;
                count = 1;
            }
        }
        runs.push(count);
        runs
    }

    pub fn from_runs(len: usize, runs: &[usize], density: f64) -> Result<Self> {
        if len > MAX_MASK_SIDE {
            return Err(Error::Format(format!(
                "mask side {len} exceeds {MAX_MASK_SIDE}"
            )));
        }
        let total = len * len;
        let mut bits = Vec::with_capacity(total);
        let mut value = false;
        for &r in runs {
            if r > total - bits.len() {
                return Err(Error::Format(format!(
                    "runs cover more than {total} cells"
                )));
            }
            bits.extend(std::iter::repeat_n(value, r));
            value = !value;
        }
        if bits.len() != total {
            return Err(Error::Format(format!(
                "runs cover {} of {total} cells",
                bits.len()
            )));
        }
        Self::new(len, bits, density)
    }

    pub fn to_rle_json(&self) -> String {
        serde_json::to_string(&MaskRle::from(self)).expect("mask serializes")
    }

    pub fn from_rle_json(text: &str) -> Result<Self> {
        let rle: MaskRle = serde_json::from_str(text)?;
        rle.try_into()
    }
}

/// JSON form of a mask: `{"len": L, "density": d, "runs": [...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskRle {
    pub len: usize,
    pub density: f64,
    pub runs: Vec<usize>,
}

impl From<&SparsityMask> for MaskRle {
    fn from(m: &SparsityMask) -> Self {
        Self {
            len: m.len,
            density: m.density,
            runs: m.runs(),
        }
    }
}

impl TryFrom<MaskRle> for SparsityMask {
    type Error = Error;

    fn try_from(rle: MaskRle) -> Result<Self> {
        SparsityMask::from_runs(rle.len, &rle.runs, rle.density)
    }
}

impl Serialize for SparsityMask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MaskRle::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for SparsityMask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rle = MaskRle::deserialize(d)?;
        rle.try_into().map_err(serde::de::Error::custom)
    }
}

fn check_density(density: f64) -> Result<()> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::param(format!("density must be in (0, 1], got {density}")));
    }
    Ok(())
}

/// Row-wise top-k mask from a reference attention map.
///
/// Each row keeps `n = ceil(density · L)` entries ranked by the reference,
/// lower index first on ties. The diagonal is always kept: when it is not
/// already ranked, it replaces the `n`-th entry (or joins the argmax when
/// `n = 1`). Popcount then stays within `L` of `density · L²` for any
/// `density >= 1/L`.
pub fn build_topk_mask(a_ref: &Matrix, density: f64) -> Result<SparsityMask> {
    check_density(density)?;
    let (l, c) = a_ref.shape();
    if l != c {
        return Err(Error::shape(format!("reference map {l}x{c} is not square")));
    }
    let keep_n = ((density * l as f64).ceil() as usize).clamp(1, l);
    let mut bits = vec![false; l * l];
    for i in 0..l {
        let order = descending_order(a_ref.row(i));
        let row = &mut bits[i * l..(i + 1) * l];
        for &j in &order[..keep_n] {
            row[j] = true;
        }
        if !row[i] {
            if keep_n > 1 {
                row[order[keep_n - 1]] = false;
            }
            row[i] = true;
        }
    }
    SparsityMask::new(l, bits, density)
}

/// Block mask: all diagonal blocks plus randomly chosen off-diagonal blocks.
///
/// Blocks are added in seeded random order while doing so brings the
/// popcount closer to `density · L²`.
pub fn build_block_mask(len: usize, block: usize, density: f64, seed: u64) -> Result<SparsityMask> {
    check_density(density)?;
    if len == 0 || block == 0 {
        return Err(Error::param("mask side and block size must be >= 1"));
    }
    let nb = len.div_ceil(block);
    let extent = |b: usize| (b * block, ((b + 1) * block).min(len));
    let area = |bi: usize, bj: usize| {
        let (r0, r1) = extent(bi);
        let (c0, c1) = extent(bj);
        (r1 - r0) * (c1 - c0)
    };
    let total = (len * len) as f64;
    let floor: usize = (0..nb).map(|b| area(b, b)).sum();
    let floor_density = floor as f64 / total;
    if density < floor_density - 1e-12 {
        return Err(Error::param(format!(
            "density {density} is below the block-diagonal floor {floor_density}"
        )));
    }

    let mut bits = vec![false; len * len];
    let fill = |bits: &mut [bool], bi: usize, bj: usize| {
        let (r0, r1) = extent(bi);
        let (c0, c1) = extent(bj);
        for i in r0..r1 {
            bits[i * len + c0..i * len + c1].fill(true);
        }
    };
    for b in 0..nb {
        fill(&mut bits, b, b);
    }
    let mut off: Vec<(usize, usize)> = (0..nb)
        .flat_map(|bi| (0..nb).filter(move |&bj| bj != bi).map(move |bj| (bi, bj)))
        .collect();
    off.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let target = density * total;
    let mut count = floor as f64;
    for (bi, bj) in off {
        let next = count + area(bi, bj) as f64;
        if (next - target).abs() >= (count - target).abs() {
            continue;
        }
        fill(&mut bits, bi, bj);
        count = next;
    }
    SparsityMask::new(len, bits, density)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Full,
    #[default]
    Topk,
    Block,
}

/// How to build a mask for a given reference map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskSpec {
    pub kind: MaskKind,
    pub density: f64,
    /// Block side for [`MaskKind::Block`].
    pub block: usize,
    pub seed: u64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            kind: MaskKind::Topk,
            density: 0.25,
            block: 8,
            seed: 0,
        }
    }
}

impl MaskSpec {
    pub fn full() -> Self {
        Self {
            kind: MaskKind::Full,
            density: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_density(self.density)?;
        if self.kind == MaskKind::Block && self.block == 0 {
            return Err(Error::param("block size must be >= 1"));
        }
        Ok(())
    }

    /// Mask for the square reference map `a_ref`; `None` means attend
    /// everywhere.
    pub fn resolve(&self, a_ref: &Matrix) -> Result<Option<SparsityMask>> {
        match self.kind {
            MaskKind::Full => Ok(None),
            MaskKind::Topk => build_topk_mask(a_ref, self.density).map(Some),
            MaskKind::Block => {
                build_block_mask(a_ref.rows(), self.block, self.density, self.seed).map(Some)
            }
        }
    }
}

/// Frobenius norms of the attention-map deviations from the full-precision,
/// full-attention reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionShiftReport {
    pub delta_sparse: f64,
    pub delta_quant: f64,
    pub delta_total: f64,
    /// `|delta_total − delta_sparse − delta_quant|`.
    pub interaction: f64,
}

pub fn measure_attention_shift(
    in_fp: &AttentionInputs,
    in_q: &AttentionInputs,
    mask: &SparsityMask,
) -> Result<AttentionShiftReport> {
    if in_fp.q.shape() != in_q.q.shape() || in_fp.v.shape() != in_q.v.shape() {
        return Err(Error::shape("full-precision and quantized inputs differ in shape"));
    }
    let full_fp = full_attention(in_fp)?.map;
    let sparse_fp = sparse_attention(in_fp, mask)?.map;
    let full_q = full_attention(in_q)?.map;
    let sparse_q = sparse_attention(in_q, mask)?.map;
    let delta_sparse = frobenius(&full_fp.sub(&sparse_fp)?);
    let delta_quant = frobenius(&full_fp.sub(&full_q)?);
    let delta_total = frobenius(&full_fp.sub(&sparse_q)?);
    Ok(AttentionShiftReport {
        delta_sparse,
        delta_quant,
        delta_total,
        interaction: (delta_total - delta_sparse - delta_quant).abs(),
    })
}
