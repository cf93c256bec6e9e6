//! End-to-end driver: exact oracle, compressed path and cached corrections
//! over a multi-timestep workload.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::config::{Config, Level, ModeSelection};
use super::metrics::{matrix_psnr, median};
use super::workload::{generate_workload, weight_drift, NoiseMode, WorkloadSpec};
use crate::attention::{
    full_attention, measure_attention_shift, sparse_attention, AttentionInputs, AttentionShiftReport, MaskSpec,
    SparsityMask,
};
use crate::calib::{project, BlockQuant, CalibResult, ToyBlock};
use crate::error::{Error, Result};
use crate::msad::{heavy_tail_stats, token_saliency};
use crate::numerics::{frobenius, Matrix};
use crate::ssar::{
    first_order_apply, full_rank, residual, second_order_apply, second_order_build,
    extrapolation_check, ExtrapolationErrors, RefreshPlan, ResidualCache,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheMode {
    /// Sparse quantized result, uncorrected.
    None,
    First,
    /// Second order with the untruncated difference term.
    Second,
    /// Second order with the rank-truncated difference term.
    Ssar,
}

impl CacheMode {
    pub const ALL: [CacheMode; 4] = [CacheMode::None, CacheMode::First, CacheMode::Second, CacheMode::Ssar];

    pub fn as_str(self) -> &'static str {
        match self {
            CacheMode::None => "none",
            CacheMode::First => "first",
            CacheMode::Second => "second",
            CacheMode::Ssar => "ssar",
        }
    }

    fn second_order(self) -> bool {
        matches!(self, CacheMode::Second | CacheMode::Ssar)
    }
}

impl ModeSelection {
    pub fn modes(self) -> Vec<CacheMode> {
        match self {
            ModeSelection::All => CacheMode::ALL.to_vec(),
            ModeSelection::None => vec![CacheMode::None],
            ModeSelection::First => vec![CacheMode::First],
            ModeSelection::Second => vec![CacheMode::Second],
            ModeSelection::Ssar => vec![CacheMode::Ssar],
        }
    }
}

/// Per-step tensors of one run.
#[derive(Debug, Clone)]
pub struct TimestepTrace {
    pub inputs: Vec<Matrix>,
    /// Full-precision full attention maps.
    pub attn_full: Vec<Matrix>,
    /// Exact result at the residual level.
    pub full: Vec<Matrix>,
    /// Full-precision sparse result at the residual level.
    pub sparse_fp: Vec<Matrix>,
    /// Quantized sparse result at the residual level.
    pub sparse_q: Vec<Matrix>,
    /// `full − sparse_q`.
    pub residuals: Vec<Matrix>,
    /// Index of the mask in force at each step; masks are rebuilt at
    /// refresh steps.
    pub mask_epoch: Vec<usize>,
    pub mask_density: Vec<f64>,
    pub shift: Vec<AttentionShiftReport>,
    pub level: Level,
    /// `(wbits, abits)` of the compressed path, absent when unquantized.
    pub bits: Option<(u32, u32)>,
}

impl TimestepTrace {
    pub fn len(&self) -> usize {
        self.full.len()
    }

    pub fn is_empty(&self) -> bool {
        self.full.is_empty()
    }
}

fn wbits_of(q: &BlockQuant) -> u32 {
    q.wq.bits()
}

/// Computes the oracle and the compressed path at every step.
pub fn build_trace(
    block: &ToyBlock,
    quant: &BlockQuant,
    spec: &WorkloadSpec,
    mask: &MaskSpec,
    plan: &RefreshPlan,
    level: Level,
) -> Result<TimestepTrace> {
    if plan.total_steps != spec.steps {
        return Err(Error::param(format!(
            "plan covers {} steps, workload has {}",
            plan.total_steps, spec.steps
        )));
    }
    if block.d_model() != spec.d {
        return Err(Error::shape(format!(
            "block width {} for workload width {}",
            block.d_model(),
            spec.d
        )));
    }
    quant.check_block(block)?;
    let inputs = generate_workload(spec)?;
    let drift = weight_drift(spec, block.d_head())?;
    let quantized = spec.noise_mode != NoiseMode::None;
    let n = inputs.len();
    let mut tr = TimestepTrace {
        attn_full: Vec::with_capacity(n),
        full: Vec::with_capacity(n),
        sparse_fp: Vec::with_capacity(n),
        sparse_q: Vec::with_capacity(n),
        residuals: Vec::with_capacity(n),
        mask_epoch: Vec::with_capacity(n),
        mask_density: Vec::with_capacity(n),
        shift: Vec::with_capacity(n),
        level,
        bits: quantized.then(|| (wbits_of(quant), quant.abits)),
        inputs,
    };
    let mut current: Option<SparsityMask> = None;
    let mut epoch = 0;
    for t in 0..n {
        let drifted;
        let block = match &drift {
            None => block,
            Some(d) => {
                let f = t as f64 / (n - 1) as f64;
                let mut b = block.clone();
                b.wq = b.wq.add(&d[0].scale(f))?;
                b.wk = b.wk.add(&d[1].scale(f))?;
                b.wv = b.wv.add(&d[2].scale(f))?;
                drifted = b;
                &drifted
            }
        };
        let [q, k, v] = project(block, &tr.inputs[t], None)?;
        let fp = AttentionInputs::new(q, k, v)?;
        let full = full_attention(&fp)?;
        if plan.is_refresh(t) || current.is_none() {
            current = Some(match mask.resolve(&full.map)? {
                Some(m) => m,
                None => SparsityMask::full(full.map.rows()),
            });
            if t > 0 {
                epoch += 1;
            }
        }
        let m = current.as_ref().expect("mask set above");
        let qin = if quantized {
            let [q, k, v] = project(block, &tr.inputs[t], Some(quant))?;
            AttentionInputs::new(q, k, v)?
        } else {
            fp.clone()
        };
        let sparse_fp = sparse_attention(&fp, m)?;
        let sparse_q = sparse_attention(&qin, m)?;
        tr.shift.push(measure_attention_shift(&fp, &qin, m)?);
        let (f, s_fp, s_q) = match level {
            Level::Attention => (full.map.clone(), sparse_fp.map, sparse_q.map),
            Level::Output => (full.out, sparse_fp.out, sparse_q.out),
        };
        tr.residuals.push(residual(&f, &s_q)?);
        tr.full.push(f);
        tr.sparse_fp.push(s_fp);
        tr.sparse_q.push(s_q);
        tr.attn_full.push(full.map);
        tr.mask_epoch.push(epoch);
        tr.mask_density.push(m.actual_density());
    }
    Ok(tr)
}

/// Error series of one cache mode over the corrected steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSeries {
    pub mode: CacheMode,
    pub steps: Vec<usize>,
    pub frob_err: Vec<f64>,
    /// `null` in JSON stands for an exact (infinite-PSNR) step.
    #[serde(with = "psnr_serde")]
    pub psnr: Vec<f64>,
    pub mean_frob: f64,
    pub median_psnr: Option<f64>,
    pub flops_fraction: f64,
    /// Largest error at an exactly computed step.
    pub refresh_max_err: f64,
    /// Largest `|row sum − 1|` of corrected maps (attention level only).
    pub max_row_sum_deviation: Option<f64>,
}

mod psnr_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let opt: Vec<Option<f64>> = v.iter().map(|x| x.is_finite().then_some(*x)).collect();
        opt.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let opt = Vec::<Option<f64>>::deserialize(d)?;
        Ok(opt.into_iter().map(|x| x.unwrap_or(f64::INFINITY)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: Option<Config>,
    pub level: Level,
    pub rank: usize,
    pub plan: RefreshPlan,
    pub series: Vec<ModeSeries>,
    /// Mean over steps of the attention-shift decomposition.
    pub shift: AttentionShiftReport,
    pub mask_density: f64,
    pub extrapolation: Option<ExtrapolationErrors>,
    /// Fraction of tokens holding half the attention mass at step 0.
    pub salient_fraction: f64,
    pub notes: Vec<String>,
}

impl RunReport {
    pub fn series(&self, mode: CacheMode) -> Option<&ModeSeries> {
        self.series.iter().find(|s| s.mode == mode)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Writes `step,mode,frob_err,psnr` rows, grouped by mode.
    pub fn write_errors_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "mode", "frob_err", "psnr"])?;
        for s in &self.series {
            for ((step, e), p) in s.steps.iter().zip(&s.frob_err).zip(&s.psnr) {
                w.write_record([step.to_string(), s.mode.as_str().into(), e.to_string(), p.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io("errors.csv", e))?;
        Ok(())
    }
}

/// Options of [`run_pipeline`] beyond the workload itself.
#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub modes: Vec<CacheMode>,
    pub level: Level,
    /// Truncation rank of the `Ssar` mode.
    pub rank: usize,
}

struct ModeState {
    mode: CacheMode,
    cache: Option<ResidualCache>,
    frozen_second: Option<Matrix>,
    series: ModeSeries,
}

pub fn run_pipeline(
    block: &ToyBlock,
    quant: &BlockQuant,
    spec: &WorkloadSpec,
    mask: &MaskSpec,
    plan: &RefreshPlan,
    opts: &PipelineOptions,
) -> Result<RunReport> {
    let trace = build_trace(block, quant, spec, mask, plan, opts.level)?;
    drive(&trace, mask, plan, opts)
}

/// Applies every requested cache mode to an existing trace.
pub fn drive(trace: &TimestepTrace, mask: &MaskSpec, plan: &RefreshPlan, opts: &PipelineOptions) -> Result<RunReport> {
    drive_with(trace, mask, plan, opts, |_| {})
}

/// One emitted result of [`drive_with`].
#[derive(Debug, Clone, Copy)]
pub struct StepOutput<'a> {
    pub mode: CacheMode,
    pub step: usize,
    /// True at steps where the exact result was computed.
    pub exact: bool,
    pub output: &'a Matrix,
}

/// As [`drive`], handing every emitted result to `sink`.
pub fn drive_with(
    trace: &TimestepTrace,
    mask: &MaskSpec,
    plan: &RefreshPlan,
    opts: &PipelineOptions,
    mut sink: impl FnMut(StepOutput<'_>),
) -> Result<RunReport> {
    if opts.modes.is_empty() {
        return Err(Error::param("no cache modes selected"));
    }
    let shape = trace.full[0].shape();
    let max_rank = full_rank(shape);
    if opts.rank == 0 || opts.rank > max_rank {
        return Err(Error::param(format!("rank must be in 1..={max_rank}, got {}", opts.rank)));
    }
    let pairs = opts.modes.iter().any(|m| m.second_order());
    let flops = plan.flops_fraction(mask.density, pairs);
    let mut states: Vec<ModeState> = opts
        .modes
        .iter()
        .map(|&mode| ModeState {
            mode,
            cache: None,
            frozen_second: None,
            series: ModeSeries {
                mode,
                steps: Vec::new(),
                frob_err: Vec::new(),
                psnr: Vec::new(),
                mean_frob: 0.0,
                median_psnr: None,
                flops_fraction: flops,
                refresh_max_err: 0.0,
                max_row_sum_deviation: (opts.level == Level::Attention).then_some(0.0),
            },
        })
        .collect();

    for t in 0..trace.len() {
        let exact = plan.is_refresh(t) || (pairs && plan.is_pair(t));
        let (full, sq) = (&trace.full[t], &trace.sparse_q[t]);
        for st in states.iter_mut() {
            if exact {
                // the computed exact result is emitted as is
                let out = full;
                st.series.refresh_max_err = st.series.refresh_max_err.max(full.sub(out)?.max_abs());
                sink(StepOutput {
                    mode: st.mode,
                    step: t,
                    exact,
                    output: out,
                });
                update_cache(st, trace, plan, t, opts.rank, max_rank)?;
                continue;
            }
            let out = match (st.mode, &st.cache) {
                (CacheMode::None, _) => sq.clone(),
                (_, None) => return Err(Error::param(format!("no cache before step {t}"))),
                (CacheMode::First, Some(c)) => first_order_apply(sq, c)?,
                (_, Some(c)) => second_order_apply(sq, c)?,
            };
            sink(StepOutput {
                mode: st.mode,
                step: t,
                exact,
                output: &out,
            });
            let err = full.sub(&out)?;
            st.series.steps.push(t);
            st.series.frob_err.push(frobenius(&err));
            st.series.psnr.push(matrix_psnr(full, &out)?);
            if let Some(dev) = st.series.max_row_sum_deviation.as_mut() {
                let worst = out.row_sums().iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
                *dev = dev.max(worst);
            }
        }
    }

    let mut series = Vec::with_capacity(states.len());
    for st in states {
        let mut s = st.series;
        if s.frob_err.is_empty() {
            return Err(Error::param("plan leaves no corrected steps"));
        }
        s.mean_frob = s.frob_err.iter().sum::<f64>() / s.frob_err.len() as f64;
        s.median_psnr = median(&s.psnr);
        series.push(s);
    }

    let n = trace.len() as f64;
    let mean_of = |f: fn(&AttentionShiftReport) -> f64| trace.shift.iter().map(f).sum::<f64>() / n;
    let shift = AttentionShiftReport {
        delta_sparse: mean_of(|r| r.delta_sparse),
        delta_quant: mean_of(|r| r.delta_quant),
        delta_total: mean_of(|r| r.delta_total),
        interaction: mean_of(|r| r.interaction),
    };
    let len = trace.attn_full[0].rows();
    let salient = heavy_tail_stats(&token_saliency(&trace.attn_full[0])?, 0.5);
    let mut notes = vec![
        "quantized matmuls: q/k/v/output projections and their input activations".to_string(),
        "rotation, when enabled, is fixed rather than learned".to_string(),
    ];
    if trace.bits.is_none() {
        notes.push("compressed path is unquantized (noise_mode none)".to_string());
    }
    Ok(RunReport {
        config: None,
        level: trace.level,
        rank: opts.rank,
        plan: plan.clone(),
        series,
        shift,
        mask_density: trace.mask_density.iter().sum::<f64>() / n,
        extrapolation: extrapolation_check(trace, plan.interval - 1).ok(),
        salient_fraction: salient as f64 / len as f64,
        notes,
    })
}

fn update_cache(
    st: &mut ModeState,
    trace: &TimestepTrace,
    plan: &RefreshPlan,
    t: usize,
    rank: usize,
    max_rank: usize,
) -> Result<()> {
    let (full, sq) = (&trace.full[t], &trace.sparse_q[t]);
    match st.mode {
        CacheMode::None => {}
        CacheMode::First => st.cache = Some(ResidualCache::first_order(full, sq, t)?),
        CacheMode::Second | CacheMode::Ssar => {
            let r = if st.mode == CacheMode::Ssar { rank } else { max_rank };
            if plan.is_pair(t) && t >= 1 {
                let c = second_order_build(full, sq, &trace.full[t - 1], &trace.sparse_q[t - 1], r)?
                    .at(t, Some(t - 1));
                if st.frozen_second.is_none() {
                    st.frozen_second = Some(c.second_term.clone());
                }
                st.cache = Some(c);
            } else {
                let mut c = ResidualCache::first_order(full, sq, t)?;
                if let Some(second) = &st.frozen_second {
                    c.combined = c.delta_ref.add(second)?;
                    c.second_term = second.clone();
                    c.rank = r;
                }
                st.cache = Some(c);
            }
        }
    }
    Ok(())
}

/// Runs the pipeline described by `cfg` with calibrated parameters.
pub fn run_config(cfg: &Config, calib: &CalibResult) -> Result<RunReport> {
    cfg.validate()?;
    let plan = cfg.plan()?;
    let opts = PipelineOptions {
        modes: cfg.ssar.mode.modes(),
        level: cfg.ssar.level,
        rank: cfg.rank(),
    };
    let mut report = run_pipeline(&calib.block, &calib.params, &cfg.workload, &cfg.mask, &plan, &opts)?;
    report.config = Some(cfg.clone());
    Ok(report)
}

/// Calibrates the block described by `cfg` on samples from its workload.
pub fn calibrate_config(cfg: &Config) -> Result<CalibResult> {
    cfg.validate()?;
    let block = cfg.build_block()?;
    let data = super::workload::calibration_samples(&cfg.workload, cfg.calib.samples)?;
    crate::calib::calibrate_block(
        &block,
        &cfg.quant,
        &cfg.schedule(),
        &cfg.distill(),
        &data,
        &cfg.calib_mask(),
    )
}

/// The rank-`rank` second-order cache built from the last reference pair
/// of the plan.
pub fn last_pair_cache(trace: &TimestepTrace, plan: &RefreshPlan, rank: usize) -> Result<ResidualCache> {
    let p = *plan
        .pair_steps
        .iter()
        .rev()
        .find(|&&p| p >= 1 && p < trace.len())
        .ok_or_else(|| Error::param("plan has no reference pair inside the trace"))?;
    Ok(second_order_build(&trace.full[p], &trace.sparse_q[p], &trace.full[p - 1], &trace.sparse_q[p - 1], rank)?
        .at(p, Some(p - 1)))
}
