//! Block-wise post-training calibration of a toy attention block.
//!
//! The learnable state is a per-input-channel smoothing vector `c` (the
//! activations are divided by it, the weights multiplied) and the step size
//! of every weight-quantizer group. Both are optimized in log space.

mod grad;

pub use grad::{CalibProblem, QuantGradients};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{MaskMode, MaskSpec, SparsityMask};
use crate::error::{Error, Result};
use crate::msad::{DistillConfig, DistillTerms};
use crate::numerics::{matmul, matmul_nt, random_orthogonal, row_softmax, Matrix};
use crate::quant::{
    calibrate_minmax, check_bits, fake_quant, fake_quant_dynamic, quantize, Granularity, QuantParams,
};

/// Single-head attention block. `wq`, `wk`, `wv` are `d_head × d_model`,
/// `wo` is `d_model × d_head`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBlock")]
pub struct ToyBlock {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    /// Orthogonal `d_model × d_model` preprocessing, applied as `X·H` to the
    /// input and `W·H` to the projections.
    pub rotation: Option<Matrix>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBlock {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    #[serde(default)]
    rotation: Option<Matrix>,
}

impl TryFrom<RawBlock> for ToyBlock {
    type Error = Error;

    fn try_from(r: RawBlock) -> Result<Self> {
        ToyBlock::new(r.wq, r.wk, r.wv, r.wo, r.rotation)
    }
}

const ORTHO_TOL: f64 = 1e-8;

impl ToyBlock {
    pub fn new(wq: Matrix, wk: Matrix, wv: Matrix, wo: Matrix, rotation: Option<Matrix>) -> Result<Self> {
        let (dh, dm) = wq.shape();
        if wk.shape() != (dh, dm) || wv.shape() != (dh, dm) || wo.shape() != (dm, dh) {
            return Err(Error::shape(format!(
                "projections wq {:?}, wk {:?}, wv {:?}, wo {:?}",
                wq.shape(),
                wk.shape(),
                wv.shape(),
                wo.shape()
            )));
        }
        if let Some(h) = &rotation {
            if h.shape() != (dm, dm) {
                return Err(Error::shape(format!("rotation {:?} for d_model {dm}", h.shape())));
            }
            let gram = matmul(&h.transpose(), h)?.sub(&Matrix::identity(dm))?;
            if gram.max_abs() > ORTHO_TOL {
                return Err(Error::param("rotation is not orthogonal"));
            }
        }
        Ok(Self {
            wq,
            wk,
            wv,
            wo,
            rotation,
        })
    }

    /// Gaussian weights with variance `1/d_in`.
    pub fn random(d_model: usize, d_head: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |rows: usize, cols: usize| Matrix::gaussian(rows, cols, &mut rng).scale(1.0 / (cols as f64).sqrt());
        let wq = draw(d_head, d_model);
        let wk = draw(d_head, d_model);
        let wv = draw(d_head, d_model);
        let wo = draw(d_model, d_head);
        Self::new(wq, wk, wv, wo, None).expect("consistent random shapes")
    }

    pub fn with_rotation(self, seed: u64) -> Result<Self> {
        let h = random_orthogonal(self.d_model(), seed)?;
        Self::new(self.wq, self.wk, self.wv, self.wo, Some(h))
    }

    pub fn d_model(&self) -> usize {
        self.wq.cols()
    }

    pub fn d_head(&self) -> usize {
        self.wq.rows()
    }

    fn projection(&self, t: usize) -> &Matrix {
        match t {
            0 => &self.wq,
            1 => &self.wk,
            _ => &self.wv,
        }
    }

    /// `W·H` for projection `t` (0 = q, 1 = k, 2 = v).
    pub(crate) fn rotated(&self, t: usize) -> Matrix {
        let w = self.projection(t);
        match &self.rotation {
            Some(h) => matmul(w, h).expect("validated shapes"),
            None => w.clone(),
        }
    }

    pub(crate) fn rotate_input(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.d_model() {
            return Err(Error::shape(format!(
                "input {:?} for d_model {}",
                x.shape(),
                self.d_model()
            )));
        }
        match &self.rotation {
            Some(h) => matmul(x, h),
            None => Ok(x.clone()),
        }
    }
}

/// Bit-widths and layout of the fake-quantized twin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantSetup {
    pub wbits: u32,
    pub abits: u32,
    /// Weight granularity over the `d_in × d_out` layout, so `per_channel`
    /// means one group per output channel.
    pub granularity: Granularity,
    /// Also quantize the attention output before `W_o`.
    pub quantize_attn_output: bool,
}

impl Default for QuantSetup {
    fn default() -> Self {
        Self {
            wbits: 4,
            abits: 8,
            granularity: Granularity::PerChannel,
            quantize_attn_output: false,
        }
    }
}

impl QuantSetup {
    pub fn validate(&self) -> Result<()> {
        check_bits(self.wbits)?;
        check_bits(self.abits)
    }
}

/// Learnable quantizer state of one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockQuant {
    pub abits: u32,
    #[serde(default)]
    pub quantize_attn_output: bool,
    /// Positive per-input-channel smoothing factors.
    pub smoothing: Vec<f64>,
    pub wq: QuantParams,
    pub wk: QuantParams,
    pub wv: QuantParams,
    pub wo: QuantParams,
}

impl BlockQuant {
    /// Min–max initialization with unit smoothing.
    pub fn minmax(block: &ToyBlock, setup: &QuantSetup) -> Result<Self> {
        setup.validate()?;
        let cal = |w: &Matrix| calibrate_minmax(w, setup.wbits, setup.granularity);
        Ok(Self {
            abits: setup.abits,
            quantize_attn_output: setup.quantize_attn_output,
            smoothing: vec![1.0; block.d_model()],
            wq: cal(&block.rotated(0).transpose())?,
            wk: cal(&block.rotated(1).transpose())?,
            wv: cal(&block.rotated(2).transpose())?,
            wo: cal(&block.wo.transpose())?,
        })
    }

    pub fn weight_params(&self) -> [&QuantParams; 4] {
        [&self.wq, &self.wk, &self.wv, &self.wo]
    }

    fn weight_params_mut(&mut self) -> [&mut QuantParams; 4] {
        [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo]
    }

    /// Replaces the step sizes of tensor `t` (0..4 for q, k, v, o).
    pub fn set_scales(&mut self, t: usize, scales: Vec<f64>) -> Result<()> {
        let p = self.weight_params_mut();
        let slot = p
            .into_iter()
            .nth(t)
            .ok_or_else(|| Error::param(format!("tensor index {t} out of range")))?;
        *slot = slot.with_scales(scales)?;
        Ok(())
    }

    pub fn check_block(&self, block: &ToyBlock) -> Result<()> {
        check_bits(self.abits)?;
        if self.smoothing.len() != block.d_model() {
            return Err(Error::shape(format!(
                "{} smoothing factors for d_model {}",
                self.smoothing.len(),
                block.d_model()
            )));
        }
        if let Some(c) = self.smoothing.iter().find(|c| !(c.is_finite() && **c > 0.0)) {
            return Err(Error::param(format!("smoothing factor must be positive, got {c}")));
        }
        let (dm, dh) = (block.d_model(), block.d_head());
        for p in &self.weight_params()[..3] {
            p.check_shape(dm, dh)?;
        }
        self.wo.check_shape(dh, dm)
    }
}

/// Fake-quantized (or full-precision) `Q`, `K`, `V` of `x`.
pub fn project(block: &ToyBlock, x: &Matrix, quant: Option<&BlockQuant>) -> Result<[Matrix; 3]> {
    let x_rot = block.rotate_input(x)?;
    let Some(qz) = quant else {
        return Ok(std::array::from_fn(|t| {
            matmul_nt(&x_rot, &block.rotated(t)).expect("validated shapes")
        }));
    };
    qz.check_block(block)?;
    let c = &qz.smoothing;
    let x_in = Matrix::from_fn(x_rot.rows(), x_rot.cols(), |i, k| x_rot.get(i, k) / c[k]);
    let x_hat = fake_quant_dynamic(&x_in, qz.abits)?;
    let params = qz.weight_params();
    let mut out = Vec::with_capacity(3);
    for (t, p) in params[..3].iter().enumerate() {
        let w = block.rotated(t).transpose();
        let scaled = Matrix::from_fn(w.rows(), w.cols(), |k, j| w.get(k, j) * c[k]);
        out.push(matmul(&x_hat, &fake_quant(&scaled, p)?)?);
    }
    Ok(out.try_into().expect("three projections"))
}

/// Block output: projections, optionally masked attention, output projection.
pub fn forward_block(
    block: &ToyBlock,
    x: &Matrix,
    mask: Option<&SparsityMask>,
    quant: Option<&BlockQuant>,
) -> Result<Matrix> {
    let [q, k, v] = project(block, x, quant)?;
    let logits = matmul_nt(&q, &k)?.scale(1.0 / (block.d_head() as f64).sqrt());
    let a = match mask {
        Some(m) => row_softmax(&m.apply(&logits, MaskMode::Exclude)?)?,
        None => row_softmax(&logits)?,
    };
    let o = matmul(&a, &v)?;
    match quant {
        None => matmul_nt(&o, &block.wo),
        Some(qz) => {
            let o = if qz.quantize_attn_output {
                fake_quant_dynamic(&o, qz.abits)?
            } else {
                o
            };
            matmul(&o, &fake_quant(&block.wo.transpose(), &qz.wo)?)
        }
    }
}

/// Straight-through gradient of the batch objective.
pub fn ste_gradient(problem: &CalibProblem, quant: &BlockQuant) -> Result<(DistillTerms, QuantGradients)> {
    problem.ste_gradient(quant)
}

/// Per-group step-size gradient of [`crate::quant::recon_loss`], holding the
/// integer codes fixed.
pub fn recon_loss_gradient(x: &Matrix, p: &QuantParams) -> Result<Vec<f64>> {
    let q = quantize(x, p)?;
    let g = p.granularity();
    let mut grad = vec![0.0; p.groups()];
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let grp = g.group_of(i, j);
            let level = (q.code(i, j) as i64 - p.zero_points()[grp]) as f64;
            let err = x.get(i, j) - p.scales()[grp] * level;
            grad[grp] -= 2.0 * err * level;
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    #[default]
    Cosine,
    Constant,
}

/// Update rule applied to the log-space parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Heavy-ball momentum; step length scales with the gradient.
    #[default]
    Momentum,
    /// Adam; step length is roughly the learning rate regardless of the
    /// gradient magnitude.
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibSchedule {
    pub epochs: usize,
    pub samples: usize,
    /// Learning rate of the smoothing factors.
    pub lr_scale: f64,
    /// Learning rate of the quantizer step sizes.
    pub lr_affine: f64,
    pub lr_decay: LrDecay,
    pub optimizer: Optimizer,
}

impl Default for CalibSchedule {
    fn default() -> Self {
        Self {
            epochs: 15,
            samples: 20,
            lr_scale: 5e-3,
            lr_affine: 5e-2,
            lr_decay: LrDecay::Cosine,
            optimizer: Optimizer::Momentum,
        }
    }
}

impl CalibSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.samples == 0 {
            return Err(Error::param("epochs and samples must be >= 1"));
        }
        for (name, lr) in [("lr_scale", self.lr_scale), ("lr_affine", self.lr_affine)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::param(format!("{name} must be positive, got {lr}")));
            }
        }
        Ok(())
    }

    fn factor(&self, epoch: usize) -> f64 {
        match self.lr_decay {
            LrDecay::Constant => 1.0,
            LrDecay::Cosine => {
                0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / self.epochs as f64).cos())
            }
        }
    }
}

/// Outcome of one calibration run; loadable for inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibResult {
    pub block: ToyBlock,
    pub setup: QuantSetup,
    pub schedule: CalibSchedule,
    pub distill: DistillConfig,
    pub mask: MaskSpec,
    /// Parameters at the best objective seen.
    pub params: BlockQuant,
    pub initial: DistillTerms,
    /// Objective after each epoch's update.
    pub loss_trace: Vec<f64>,
    pub term_trace: Vec<DistillTerms>,
    pub final_report: DistillTerms,
    /// 0 when the min–max initialization was never improved on.
    pub best_epoch: usize,
}

impl CalibResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        r.params.check_block(&r.block)?;
        if r.loss_trace.len() != r.schedule.epochs || r.term_trace.len() != r.schedule.epochs {
            return Err(Error::Format(format!(
                "trace of {} entries for {} epochs",
                r.loss_trace.len(),
                r.schedule.epochs
            )));
        }
        Ok(r)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_PATIENCE: usize = 3;

/// Log-space parameter vector with its moment estimates.
struct State {
    kind: Optimizer,
    theta: Vec<f64>,
    lr: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl State {
    fn step(&mut self, grad: &[f64], factor: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for i in 0..self.theta.len() {
            match self.kind {
                Optimizer::Momentum => {
                    self.m[i] = BETA1 * self.m[i] + grad[i];
                    self.theta[i] -= factor * self.lr[i] * self.m[i];
                }
                Optimizer::Adam => {
                    self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * grad[i];
                    self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * grad[i] * grad[i];
                    let m_hat = self.m[i] / c1;
                    let v_hat = self.v[i] / c2;
                    self.theta[i] -= factor * self.lr[i] * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

fn flatten(q: &BlockQuant) -> Vec<f64> {
    let mut v: Vec<f64> = q.smoothing.iter().map(|c| c.ln()).collect();
    for p in q.weight_params() {
        v.extend(p.scales().iter().map(|s| s.ln()));
    }
    v
}

fn unflatten(theta: &[f64], template: &BlockQuant) -> Result<BlockQuant> {
    let mut q = template.clone();
    let n = q.smoothing.len();
    q.smoothing = theta[..n].iter().map(|t| t.exp()).collect();
    let mut at = n;
    for t in 0..4 {
        let g = q.weight_params()[t].groups();
        q.set_scales(t, theta[at..at + g].iter().map(|x| x.exp()).collect())?;
        at += g;
    }
    Ok(q)
}

/// Chain rule into log space.
fn log_gradient(q: &BlockQuant, g: &QuantGradients) -> Vec<f64> {
    let mut out: Vec<f64> = q.smoothing.iter().zip(&g.smoothing).map(|(c, d)| c * d).collect();
    for (p, d) in q.weight_params().iter().zip(&g.scales) {
        out.extend(p.scales().iter().zip(d).map(|(s, d)| s * d));
    }
    out
}

/// Calibrates the fake-quantized twin of `fp` on `data` against the
/// distillation objective, keeping the best parameters seen.
pub fn calibrate_block(
    fp: &ToyBlock,
    setup: &QuantSetup,
    sched: &CalibSchedule,
    cfg: &DistillConfig,
    data: &[Matrix],
    mask: &MaskSpec,
) -> Result<CalibResult> {
    sched.validate()?;
    if data.len() != sched.samples {
        return Err(Error::param(format!(
            "schedule expects {} samples, got {}",
            sched.samples,
            data.len()
        )));
    }
    let problem = CalibProblem::new(fp, cfg, data, mask)?;
    let init = BlockQuant::minmax(fp, setup)?;
    let (initial, mut grads) = problem.ste_gradient(&init)?;
    if !initial.is_finite() {
        return Err(Error::CalibrationDiverged {
            epoch: 0,
            trace: Vec::new(),
        });
    }

    let theta = flatten(&init);
    let n_smooth = init.smoothing.len();
    let lr = (0..theta.len())
        .map(|i| if i < n_smooth { sched.lr_scale } else { sched.lr_affine })
        .collect();
    let mut opt = State {
        kind: sched.optimizer,
        m: vec![0.0; theta.len()],
        v: vec![0.0; theta.len()],
        theta,
        lr,
        t: 0,
    };

    let mut current = init.clone();
    let mut best = (initial, init, 0);
    let mut loss_trace = Vec::with_capacity(sched.epochs);
    let mut term_trace = Vec::with_capacity(sched.epochs);
    let mut above = 0;
    for epoch in 0..sched.epochs {
        opt.step(&log_gradient(&current, &grads), sched.factor(epoch));
        current = unflatten(&opt.theta, &current)?;
        let (terms, g) = problem.ste_gradient(&current)?;
        grads = g;
        loss_trace.push(terms.total);
        term_trace.push(terms);
        if !terms.is_finite() || terms.total > DIVERGENCE_FACTOR * initial.total {
            above += 1;
            if above >= DIVERGENCE_PATIENCE || !terms.is_finite() {
                return Err(Error::CalibrationDiverged {
                    epoch: epoch + 1,
                    trace: loss_trace,
                });
            }
        } else {
            above = 0;
        }
        if terms.total < best.0.total {
            best = (terms, current.clone(), epoch + 1);
        }
    }

    Ok(CalibResult {
        block: fp.clone(),
        setup: *setup,
        schedule: *sched,
        distill: *cfg,
        mask: *mask,
        params: best.1,
        initial,
        loss_trace,
        term_trace,
        final_report: best.0,
        best_epoch: best.2,
    })
}
