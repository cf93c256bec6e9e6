//! Forward pass of the fake-quantized block with a hand-written backward
//! pass for the quantizer parameters.
//!
//! Gradient conventions: inside each quantizer the integer code is held
//! fixed, so `∂/∂s [s·(q − z)] = q − z`; with respect to the quantized data
//! the rounding is an identity (zero for saturated entries). Dynamic
//! activation parameters are recomputed on every call and treated as
//! constants.

use rayon::prelude::*;

use super::{BlockQuant, ToyBlock};
use crate::attention::{MaskMode, MaskSpec, SparsityMask};
use crate::error::{Error, Result};
use crate::msad::{token_saliency, DistillConfig, DistillTerms};
use crate::numerics::{avg_pool_rows, matmul, matmul_nt, row_softmax, softmax_backward, Matrix};
use crate::quant::{calibrate_minmax, quantize, Granularity, QuantParams};

/// Gradients of the objective with respect to the quantizer parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantGradients {
    /// Per input channel of the smoothing vector.
    pub smoothing: Vec<f64>,
    /// Per group step-size gradients for `wq`, `wk`, `wv`, `wo`.
    pub scales: [Vec<f64>; 4],
}

impl QuantGradients {
    fn zeros_like(q: &BlockQuant) -> Self {
        let p = q.weight_params();
        Self {
            smoothing: vec![0.0; q.smoothing.len()],
            scales: std::array::from_fn(|t| vec![0.0; p[t].groups()]),
        }
    }

    fn add_scaled(&mut self, other: &Self, c: f64) {
        for (a, b) in self.smoothing.iter_mut().zip(&other.smoothing) {
            *a += c * b;
        }
        for (sa, sb) in self.scales.iter_mut().zip(&other.scales) {
            for (a, b) in sa.iter_mut().zip(sb) {
                *a += c * b;
            }
        }
    }
}

/// Full-precision targets for one calibration sample.
struct Teacher {
    x_rot: Matrix,
    mask: Option<SparsityMask>,
    y: Matrix,
    global: Matrix,
    local: Matrix,
    salient: Vec<usize>,
}

/// A block, its calibration batch and the frozen full-precision targets.
pub struct CalibProblem<'a> {
    block: &'a ToyBlock,
    cfg: DistillConfig,
    teachers: Vec<Teacher>,
    /// `(W H)ᵀ` for the q, k, v projections, `d_model × d_head`.
    wt: [Matrix; 3],
    /// `W_oᵀ`, `d_head × d_model`.
    wo_t: Matrix,
    scale: f64,
}

/// A quantized operand: its source, dequantized value and codes.
struct Operand {
    src: Matrix,
    value: Matrix,
    codes: Vec<u32>,
    params: QuantParams,
}

impl Operand {
    fn new(src: Matrix, params: &QuantParams) -> Result<Self> {
        let q = quantize(&src, params)?;
        let value = crate::quant::dequantize(&q);
        Ok(Self {
            codes: q.codes().to_vec(),
            src,
            value,
            params: params.clone(),
        })
    }

    fn dynamic(src: Matrix, bits: u32) -> Result<Self> {
        let p = calibrate_minmax(&src, bits, Granularity::PerToken)?;
        Self::new(src, &p)
    }

    /// Accumulates the step-size gradient into `ds` and returns the
    /// straight-through gradient for the source.
    fn backward(&self, d_value: &Matrix, ds: Option<&mut [f64]>) -> Matrix {
        let (rows, cols) = self.src.shape();
        let g = self.params.granularity();
        if let Some(ds) = ds {
            for i in 0..rows {
                for j in 0..cols {
                    let grp = g.group_of(i, j);
                    let code = self.codes[i * cols + j] as i64 - self.params.zero_points()[grp];
                    ds[grp] += d_value.get(i, j) * code as f64;
                }
            }
        }
        Matrix::from_fn(rows, cols, |i, j| {
            if self.params.is_unclipped(self.src.get(i, j), g.group_of(i, j)) {
                d_value.get(i, j)
            } else {
                0.0
            }
        })
    }
}

struct Pass {
    act: Operand,
    weights: [Operand; 3],
    q: Matrix,
    k: Matrix,
    v: Matrix,
    a: Matrix,
    o_act: Option<Operand>,
    o: Matrix,
    wo: Operand,
    y: Matrix,
    qp: Matrix,
    kp: Matrix,
    global: Matrix,
    ql: Matrix,
    local: Matrix,
}

fn mse_grad(est: &Matrix, target: &Matrix, weight: f64) -> Result<Matrix> {
    let c = 2.0 * weight / est.len() as f64;
    Ok(est.sub(target)?.scale(c))
}

fn attention_map(q: &Matrix, k: &Matrix, scale: f64, mask: Option<&SparsityMask>) -> Result<Matrix> {
    let logits = matmul_nt(q, k)?.scale(scale);
    match mask {
        Some(m) => row_softmax(&m.apply(&logits, MaskMode::Exclude)?),
        None => row_softmax(&logits),
    }
}

/// `aᵀ · b`.
fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    matmul(&a.transpose(), b)
}

impl<'a> CalibProblem<'a> {
    pub fn new(block: &'a ToyBlock, cfg: &DistillConfig, batch: &[Matrix], mask: &MaskSpec) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::param("calibration batch is empty"));
        }
        let len = batch[0].rows();
        cfg.validate(len)?;
        mask.validate()?;
        let wt = std::array::from_fn(|t| block.rotated(t).transpose());
        let wo_t = block.wo.transpose();
        let scale = 1.0 / (block.d_head() as f64).sqrt();
        let teachers = batch
            .iter()
            .map(|x| {
                if x.shape() != (len, block.d_model()) {
                    return Err(Error::shape(format!(
                        "calibration sample {:?}, expected {len}x{}",
                        x.shape(),
                        block.d_model()
                    )));
                }
                let x_rot = block.rotate_input(x)?;
                let q = matmul(&x_rot, &wt[0])?;
                let k = matmul(&x_rot, &wt[1])?;
                let v = matmul(&x_rot, &wt[2])?;
                let full = attention_map(&q, &k, scale, None)?;
                let salient = token_saliency(&full)?.top(cfg.salient_k)?;
                let mask = mask.resolve(&full)?;
                let a = match &mask {
                    Some(m) => attention_map(&q, &k, scale, Some(m))?,
                    None => full,
                };
                let y = matmul(&matmul(&a, &v)?, &wo_t)?;
                let global = crate::msad::global_attention(&q, &k, cfg.stride)?;
                let local = crate::msad::local_attention(&q, &k, &salient)?;
                Ok(Teacher {
                    x_rot,
                    mask,
                    y,
                    global,
                    local,
                    salient,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            block,
            cfg: *cfg,
            teachers,
            wt,
            wo_t,
            scale,
        })
    }

    pub fn config(&self) -> &DistillConfig {
        &self.cfg
    }

    pub fn block(&self) -> &ToyBlock {
        self.block
    }

    pub fn samples(&self) -> usize {
        self.teachers.len()
    }

    /// Masks in use, one per sample.
    pub fn masks(&self) -> impl Iterator<Item = Option<&SparsityMask>> {
        self.teachers.iter().map(|t| t.mask.as_ref())
    }

    /// Batch-averaged objective.
    pub fn objective(&self, quant: &BlockQuant) -> Result<DistillTerms> {
        quant.check_block(self.block)?;
        let per: Vec<DistillTerms> = self
            .teachers
            .par_iter()
            .map(|t| Ok(self.terms(&self.forward(t, quant)?, t)))
            .collect::<Result<_>>()?;
        Ok(self.average(&per))
    }

    /// Batch-averaged objective and its straight-through gradient.
    pub fn ste_gradient(&self, quant: &BlockQuant) -> Result<(DistillTerms, QuantGradients)> {
        quant.check_block(self.block)?;
        let per: Vec<(DistillTerms, QuantGradients)> = self
            .teachers
            .par_iter()
            .map(|t| {
                let pass = self.forward(t, quant)?;
                let grads = self.backward(&pass, t, quant)?;
                Ok((self.terms(&pass, t), grads))
            })
            .collect::<Result<_>>()?;
        let n = per.len() as f64;
        let mut grads = QuantGradients::zeros_like(quant);
        for (_, g) in &per {
            grads.add_scaled(g, 1.0 / n);
        }
        let terms: Vec<DistillTerms> = per.iter().map(|(t, _)| *t).collect();
        Ok((self.average(&terms), grads))
    }

    fn average(&self, per: &[DistillTerms]) -> DistillTerms {
        let n = per.len() as f64;
        let mean = |f: fn(&DistillTerms) -> f64| per.iter().map(f).sum::<f64>() / n;
        DistillTerms::combine(
            mean(|t| t.l_quant),
            mean(|t| t.l_global),
            mean(|t| t.l_local),
            &self.cfg,
        )
    }

    fn terms(&self, p: &Pass, t: &Teacher) -> DistillTerms {
        let mse = |a: &Matrix, b: &Matrix| a.mse(b).expect("teacher and student shapes agree");
        DistillTerms::combine(
            mse(&p.y, &t.y),
            mse(&p.global, &t.global),
            mse(&p.local, &t.local),
            &self.cfg,
        )
    }

    fn forward(&self, t: &Teacher, quant: &BlockQuant) -> Result<Pass> {
        let c = &quant.smoothing;
        let x_in = Matrix::from_fn(t.x_rot.rows(), t.x_rot.cols(), |i, k| t.x_rot.get(i, k) / c[k]);
        let act = Operand::dynamic(x_in, quant.abits)?;
        let params = quant.weight_params();
        let weights: [Operand; 3] = {
            let mut ops = Vec::with_capacity(3);
            for (w, p) in self.wt.iter().zip(params) {
                let scaled = Matrix::from_fn(w.rows(), w.cols(), |k, j| w.get(k, j) * c[k]);
                ops.push(Operand::new(scaled, p)?);
            }
            ops.try_into().map_err(|_| Error::shape("projection count"))?
        };
        let q = matmul(&act.value, &weights[0].value)?;
        let k = matmul(&act.value, &weights[1].value)?;
        let v = matmul(&act.value, &weights[2].value)?;
        let a = attention_map(&q, &k, self.scale, t.mask.as_ref())?;
        let o = matmul(&a, &v)?;
        let o_act = if quant.quantize_attn_output {
            Some(Operand::dynamic(o.clone(), quant.abits)?)
        } else {
            None
        };
        let wo = Operand::new(self.wo_t.clone(), params[3])?;
        let y = matmul(o_act.as_ref().map_or(&o, |op| &op.value), &wo.value)?;
        let qp = avg_pool_rows(&q, self.cfg.stride)?;
        let kp = avg_pool_rows(&k, self.cfg.stride)?;
        let global = attention_map(&qp, &kp, self.scale, None)?;
        let ql = q.select_rows(&t.salient)?;
        let local = attention_map(&ql, &k, self.scale, None)?;
        Ok(Pass {
            act,
            weights,
            q,
            k,
            v,
            a,
            o_act,
            o,
            wo,
            y,
            qp,
            kp,
            global,
            ql,
            local,
        })
    }

    fn backward(&self, p: &Pass, t: &Teacher, quant: &BlockQuant) -> Result<QuantGradients> {
        let mut grads = QuantGradients::zeros_like(quant);
        let cfg = &self.cfg;

        // output projection
        let dy = mse_grad(&p.y, &t.y, 1.0)?;
        let o_used = p.o_act.as_ref().map_or(&p.o, |op| &op.value);
        let d_wo = matmul_tn(o_used, &dy)?;
        p.wo.backward(&d_wo, Some(&mut grads.scales[3]));
        let mut d_o = matmul_nt(&dy, &p.wo.value)?;
        if let Some(op) = &p.o_act {
            d_o = op.backward(&d_o, None);
        }

        // attention
        let d_a = matmul_nt(&d_o, &p.v)?;
        let d_v = matmul_tn(&p.a, &d_o)?;
        let d_s = softmax_backward(&p.a, &d_a)?.scale(self.scale);
        let mut d_q = matmul(&d_s, &p.k)?;
        let mut d_k = matmul_tn(&d_s, &p.q)?;

        // pooled global guidance
        if cfg.lambda_global > 0.0 {
            let d_g = mse_grad(&p.global, &t.global, cfg.lambda_global)?;
            let d_sg = softmax_backward(&p.global, &d_g)?.scale(self.scale);
            let d_qp = matmul(&d_sg, &p.kp)?;
            let d_kp = matmul_tn(&d_sg, &p.qp)?;
            unpool_into(&mut d_q, &d_qp, cfg.stride);
            unpool_into(&mut d_k, &d_kp, cfg.stride);
        }

        // salient local guidance
        if cfg.lambda_local > 0.0 {
            let d_l = mse_grad(&p.local, &t.local, cfg.lambda_local)?;
            let d_sl = softmax_backward(&p.local, &d_l)?.scale(self.scale);
            let d_ql = matmul(&d_sl, &p.k)?;
            d_k = d_k.add(&matmul_tn(&d_sl, &p.ql)?)?;
            for (r, &i) in t.salient.iter().enumerate() {
                for (a, &b) in d_q.row_mut(i).iter_mut().zip(d_ql.row(r)) {
                    *a += b;
                }
            }
        }

        // projections
        let mut d_x = Matrix::zeros(p.act.value.rows(), p.act.value.cols());
        let c = &quant.smoothing;
        for (idx, d_out) in [d_q, d_k, d_v].iter().enumerate() {
            let op = &p.weights[idx];
            let d_b = matmul_tn(&p.act.value, d_out)?;
            let d_w = op.backward(&d_b, Some(&mut grads.scales[idx]));
            let w = &self.wt[idx];
            for (kk, gc) in grads.smoothing.iter_mut().enumerate() {
                *gc += d_w
                    .row(kk)
                    .iter()
                    .zip(w.row(kk))
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            }
            d_x = d_x.add(&matmul_nt(d_out, &op.value)?)?;
        }
        let d_in = p.act.backward(&d_x, None);
        for i in 0..d_in.rows() {
            for (kk, gc) in grads.smoothing.iter_mut().enumerate() {
                *gc -= d_in.get(i, kk) * t.x_rot.get(i, kk) / (c[kk] * c[kk]);
            }
        }
        Ok(grads)
    }
}

/// Spreads pooled-row gradients back over their source rows.
fn unpool_into(d: &mut Matrix, d_pooled: &Matrix, stride: usize) {
    let rows = d.rows();
    for g in 0..d_pooled.rows() {
        let start = g * stride;
        let end = (start + stride).min(rows);
        let inv = 1.0 / (end - start) as f64;
        for i in start..end {
            for (a, &b) in d.row_mut(i).iter_mut().zip(d_pooled.row(g)) {
                *a += inv * b;
            }
        }
    }
}
