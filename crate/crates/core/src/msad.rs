//! Multi-scale salient attention distillation: token saliency, pooled global
//! maps, salient local maps and the combined calibration objective.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attention::MaskSpec;
use crate::calib::{BlockQuant, CalibProblem, ToyBlock};
use crate::error::{Error, Result};
use crate::numerics::{avg_pool_rows, descending_order, matmul_nt, row_softmax, Matrix};

/// Weights and shapes of the distillation objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    /// Row pooling stride of the global term.
    pub stride: usize,
    /// Number of salient queries in the local term.
    #[serde(rename = "k")]
    pub salient_k: usize,
    pub lambda_global: f64,
    pub lambda_local: f64,
}

impl DistillConfig {
    /// Desk-scale defaults for sequence length `len`.
    pub fn for_len(len: usize) -> Self {
        Self {
            stride: 8,
            salient_k: (len / 4).max(4).min(len.max(1)),
            lambda_global: 1e-4,
            lambda_local: 1e-4,
        }
    }

    /// Same shapes, both guidance weights zeroed.
    pub fn without_guidance(self) -> Self {
        Self {
            lambda_global: 0.0,
            lambda_local: 0.0,
            ..self
        }
    }

    pub fn validate(&self, len: usize) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::param("stride must be >= 1"));
        }
        if self.salient_k == 0 || self.salient_k > len {
            return Err(Error::param(format!(
                "salient_k must be in 1..={len}, got {}",
                self.salient_k
            )));
        }
        for (name, v) in [
            ("lambda_global", self.lambda_global),
            ("lambda_local", self.lambda_local),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::param(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Attention mass received by each token.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyProfile {
    pub s: Vec<f64>,
    /// Token indices sorted by decreasing saliency, ties to the lower index.
    pub order: Vec<usize>,
}

impl SaliencyProfile {
    /// The `k` most salient tokens in rank order.
    pub fn top(&self, k: usize) -> Result<Vec<usize>> {
        if k == 0 || k > self.order.len() {
            return Err(Error::param(format!(
                "k must be in 1..={}, got {k}",
                self.order.len()
            )));
        }
        Ok(self.order[..k].to_vec())
    }
}

pub fn token_saliency(a: &Matrix) -> Result<SaliencyProfile> {
    if a.rows() != a.cols() {
        return Err(Error::shape(format!("saliency needs a square map, got {:?}", a.shape())));
    }
    let s = a.col_sums();
    let order = descending_order(&s);
    Ok(SaliencyProfile { s, order })
}

/// Smallest `n` whose top-`n` tokens hold at least `mass` of the total
/// saliency.
pub fn heavy_tail_stats(p: &SaliencyProfile, mass: f64) -> usize {
    let total: f64 = p.s.iter().sum();
    let target = mass * total;
    let mut acc = 0.0;
    for (n, &i) in p.order.iter().enumerate() {
        acc += p.s[i];
        // relative slack so an exactly-attained target is not missed by rounding
        if acc >= target - 1e-12 * total.abs() {
            return n + 1;
        }
    }
    p.order.len()
}

fn scaled_softmax(q: &Matrix, k: &Matrix) -> Result<Matrix> {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    row_softmax(&matmul_nt(q, k)?.scale(scale))
}

fn check_pair(q: &Matrix, k: &Matrix) -> Result<()> {
    if q.shape() != k.shape() {
        return Err(Error::shape(format!("q {:?} vs k {:?}", q.shape(), k.shape())));
    }
    Ok(())
}

/// Attention between row-pooled queries and keys, `⌈L/stride⌉` square.
pub fn global_attention(q: &Matrix, k: &Matrix, stride: usize) -> Result<Matrix> {
    check_pair(q, k)?;
    scaled_softmax(&avg_pool_rows(q, stride)?, &avg_pool_rows(k, stride)?)
}

/// Attention rows of the selected queries against every key.
pub fn local_attention(q: &Matrix, k: &Matrix, idx: &[usize]) -> Result<Matrix> {
    check_pair(q, k)?;
    scaled_softmax(&q.select_rows(idx)?, k)
}

pub fn global_loss(fp_q: &Matrix, fp_k: &Matrix, q_q: &Matrix, q_k: &Matrix, stride: usize) -> Result<f64> {
    global_attention(fp_q, fp_k, stride)?.mse(&global_attention(q_q, q_k, stride)?)
}

pub fn local_loss(fp_q: &Matrix, fp_k: &Matrix, q_q: &Matrix, q_k: &Matrix, idx: &[usize]) -> Result<f64> {
    local_attention(fp_q, fp_k, idx)?.mse(&local_attention(q_q, q_k, idx)?)
}

/// The three terms of the objective and their weighted sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillTerms {
    pub l_quant: f64,
    pub l_global: f64,
    pub l_local: f64,
    pub total: f64,
}

impl DistillTerms {
    pub fn combine(l_quant: f64, l_global: f64, l_local: f64, cfg: &DistillConfig) -> Self {
        Self {
            l_quant,
            l_global,
            l_local,
            total: l_quant + cfg.lambda_global * l_global + cfg.lambda_local * l_local,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_quant, self.l_global, self.l_local, self.total]
            .iter()
            .all(|x| x.is_finite())
    }
}

/// Batch-averaged objective of the fake-quantized twin of `block` against the
/// full-precision block. Salient queries and masks are derived from the
/// full-precision attention of each sample.
pub fn distill_objective(
    block: &ToyBlock,
    quant: &BlockQuant,
    cfg: &DistillConfig,
    batch: &[Matrix],
    mask: &MaskSpec,
) -> Result<DistillTerms> {
    let problem = CalibProblem::new(block, cfg, batch, mask)?;
    problem.objective(quant)
}

/// Writes per-iteration loss terms as CSV.
pub fn write_loss_trace<W: Write>(out: W, trace: &[DistillTerms]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iter", "l_quant", "l_global", "l_local", "total"])?;
    for (i, t) in trace.iter().enumerate() {
        w.write_record([
            i.to_string(),
            t.l_quant.to_string(),
            t.l_global.to_string(),
            t.l_local.to_string(),
            t.total.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("loss trace", e))?;
    Ok(())
}
