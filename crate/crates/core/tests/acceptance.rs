//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::time::{Duration, Instant};

use quantsparse::attention::{full_attention, sparse_attention, AttentionInputs, MaskSpec, SparsityMask};
use quantsparse::calib::{BlockQuant, CalibProblem, QuantSetup, ToyBlock};
use quantsparse::harness::{
    build_trace, calibrate_config, calibration_samples, cli_main_with, drive_with, last_pair_cache, CacheMode, Config,
    PipelineOptions,
};
use quantsparse::msad::{distill_objective, local_attention, token_saliency, DistillConfig};
use quantsparse::numerics::{frobenius, matmul, row_softmax, svd, truncate_rank};
use quantsparse::quant::{calibrate_minmax, fake_quant, qk_noise, quantize, Granularity, QuantParams};
use quantsparse::ssar::{first_order_apply, second_order_apply, ResidualCache};
use quantsparse::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn seeded_config(seed: u64) -> Config {
    let mut cfg = Config::default();
    cfg.workload.seed = seed;
    cfg
}

fn quantizer_round_trip() -> Outcome {
    let mut r = rng(1);
    let (mut checked, mut worst) = (0usize, f64::NEG_INFINITY);
    for bits in [4, 6, 8] {
        for g in [Granularity::PerTensor, Granularity::PerChannel, Granularity::PerToken] {
            let x = Matrix::from_fn(125, 80, |_, _| r.random_range(-3.0..3.0));
            let mm = calibrate_minmax(&x, bits, g).unwrap();
            // shrink some steps so that clipped entries occur as well
            let scales = mm.scales().iter().map(|s| s * r.random_range(0.6..1.0)).collect();
            for p in [mm.clone(), mm.with_scales(scales).unwrap()] {
                let fq = fake_quant(&x, &p).unwrap();
                for i in 0..x.rows() {
                    for j in 0..x.cols() {
                        let grp = g.group_of(i, j);
                        if !p.is_unclipped(x.get(i, j), grp) {
                            continue;
                        }
                        let excess = (x.get(i, j) - fq.get(i, j)).abs() - (p.scales()[grp] / 2.0 + 1e-12);
                        worst = worst.max(excess);
                        checked += 1;
                    }
                }
            }
        }
    }
    outcome(
        worst <= 0.0 && checked >= 9 * 10_000,
        format!("{checked} unclipped entries, max excess over s/2 {worst:.3e}"),
    )
}

fn qk_noise_bound() -> Outcome {
    let mut violations = 0;
    let mut max_ratio = 0.0f64;
    for seed in 0..100 {
        let mut r = rng(1000 + seed);
        let q = Matrix::gaussian(32, 8, &mut r);
        let k = Matrix::gaussian(32, 8, &mut r);
        let pq = calibrate_minmax(&q, 4, Granularity::PerToken).unwrap();
        let pk = calibrate_minmax(&k, 4, Granularity::PerToken).unwrap();
        let n = qk_noise(&q, &k, &pq, &pk).unwrap();
        if n.clipped || n.norm() > n.delta_bound {
            violations += 1;
        }
        max_ratio = max_ratio.max(n.norm() / n.delta_bound);
    }
    outcome(violations == 0, format!("{violations} violations in 100 pairs, max ||eps||/delta {max_ratio:.3}"))
}

fn naive_masked_softmax(logits: &Matrix, mask: &SparsityMask) -> Matrix {
    let n = logits.rows();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        let kept: Vec<usize> = (0..n).filter(|&j| mask.keep(i, j)).collect();
        let m = kept.iter().map(|&j| logits.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = kept.iter().map(|&j| (logits.get(i, j) - m).exp()).sum();
        for &j in &kept {
            out.set(i, j, (logits.get(i, j) - m).exp() / z);
        }
    }
    out
}

fn sparse_attention_oracle() -> Outcome {
    let (mut full_exact, mut worst) = (true, 0.0f64);
    for seed in 0..100 {
        let mut r = rng(2000 + seed);
        let len = r.random_range(2..=16);
        let d = r.random_range(1..=8);
        let inp = AttentionInputs::new(
            Matrix::gaussian(len, d, &mut r),
            Matrix::gaussian(len, d, &mut r),
            Matrix::gaussian(len, d, &mut r),
        )
        .unwrap();
        let full = full_attention(&inp).unwrap();
        let sp = sparse_attention(&inp, &SparsityMask::full(len)).unwrap();
        full_exact &= full.map == sp.map && full.out == sp.out;

        let p = r.random_range(0.1..0.9);
        let mut bits: Vec<bool> = (0..len * len).map(|_| r.random_bool(p)).collect();
        for i in 0..len {
            let j = r.random_range(0..len);
            bits[i * len + j] = true;
        }
        let mask = SparsityMask::new(len, bits, p).unwrap();
        let want = naive_masked_softmax(&inp.logits().unwrap(), &mask);
        let got = sparse_attention(&inp, &mask).unwrap();
        worst = worst.max(got.map.sub(&want).unwrap().max_abs());
        let want_out = matmul(&want, &inp.v).unwrap();
        worst = worst.max(got.out.sub(&want_out).unwrap().max_abs());
    }
    outcome(
        full_exact && worst <= 1e-9,
        format!("full mask bit-exact: {full_exact}; max deviation from masked-softmax oracle {worst:.3e}"),
    )
}

fn saliency_conservation() -> Outcome {
    let (mut worst, mut commutes) = (0.0f64, true);
    for seed in 0..100 {
        let mut r = rng(3000 + seed);
        let len = r.random_range(4..=64);
        let a = row_softmax(&Matrix::gaussian(len, len, &mut r).scale(3.0)).unwrap();
        let s = token_saliency(&a).unwrap();
        worst = worst.max((s.s.iter().sum::<f64>() - len as f64).abs());

        let d = r.random_range(2..=8);
        let q = Matrix::gaussian(len, d, &mut r);
        let k = Matrix::gaussian(len, d, &mut r);
        let inp = AttentionInputs::new(q.clone(), k.clone(), k.clone()).unwrap();
        let map = full_attention(&inp).unwrap().map;
        let idx: Vec<usize> = (0..len).filter(|_| r.random_bool(0.3)).collect();
        if idx.is_empty() {
            continue;
        }
        commutes &= local_attention(&q, &k, &idx).unwrap() == map.select_rows(&idx).unwrap();
    }
    outcome(
        worst <= 1e-6 && commutes,
        format!("max |sum s - L| {worst:.3e}; row slice commutes with softmax bit-exactly: {commutes}"),
    )
}

fn eckart_young() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let mut r = rng(4000 + seed);
        let rows = r.random_range(1..=128);
        let cols = r.random_range(1..=128);
        let m = Matrix::gaussian(rows, cols, &mut r);
        let f = svd(&m).unwrap();
        let rank = r.random_range(1..=rows.min(cols));
        let err = frobenius(&m.sub(&truncate_rank(&f, rank).unwrap()).unwrap());
        worst = worst.max((err - f.tail_energy(rank)).abs());
    }
    outcome(worst <= 1e-8, format!("max |truncation error - tail energy| {worst:.3e} over 50 matrices"))
}

fn calibration_descent() -> Outcome {
    let (mut descended, mut with_msad, mut without) = (0, Vec::new(), Vec::new());
    for seed in 0..20 {
        let cfg = seeded_config(seed);
        let cal = calibrate_config(&cfg).unwrap();
        if cal.final_report.total < cal.initial.total {
            descended += 1;
        }
        with_msad.push(cal.final_report.total);

        let mut plain = cfg.clone();
        plain.msad.lambda_global = 0.0;
        plain.msad.lambda_local = 0.0;
        let base = calibrate_config(&plain).unwrap();
        // the guidance-free parameters, scored by the same objective
        let data = calibration_samples(&cfg.workload, cfg.calib.samples).unwrap();
        let score = distill_objective(&base.block, &base.params, &cfg.distill(), &data, &cfg.calib_mask()).unwrap();
        without.push(score.total);
    }
    let med = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        (v[9] + v[10]) / 2.0
    };
    let (a, b) = (med(&mut with_msad), med(&mut without));
    outcome(
        descended >= 19 && a <= b,
        format!("{descended}/20 runs end below their initial objective; median final {a:.9e} with guidance vs {b:.9e} without"),
    )
}

fn ste_fidelity() -> Outcome {
    let (mut checked, mut failed, mut worst) = (0usize, 0usize, 0.0f64);
    let mut seed = 0;
    while checked < 60 && seed < 20 {
        let mut r = rng(5000 + seed);
        seed += 1;
        let block = ToyBlock::random(8, 8, 5100 + seed);
        let data: Vec<Matrix> = (0..3).map(|_| Matrix::gaussian(16, 8, &mut r)).collect();
        let cfg = DistillConfig {
            stride: 4,
            salient_k: 4,
            lambda_global: 0.5,
            lambda_local: 0.5,
        };
        let mask = MaskSpec::default();
        let problem = CalibProblem::new(&block, &cfg, &data, &mask).unwrap();
        let mut quant = BlockQuant::minmax(&block, &QuantSetup::default()).unwrap();
        for c in quant.smoothing.iter_mut() {
            *c = r.random_range(0.7..1.4);
        }
        for t in 0..4 {
            let s: Vec<f64> = quant.weight_params()[t].scales().iter().map(|s| s * r.random_range(0.9..1.1)).collect();
            quant.set_scales(t, s).unwrap();
        }
        let (_, grads) = problem.ste_gradient(&quant).unwrap();
        for t in 0..4 {
            let params: QuantParams = quant.weight_params()[t].clone();
            let w = if t == 3 {
                block.wo.transpose()
            } else {
                let w = [&block.wq, &block.wk, &block.wv][t].transpose();
                Matrix::from_fn(w.rows(), w.cols(), |k, j| w.get(k, j) * quant.smoothing[k])
            };
            let codes = quantize(&w, &params).unwrap();
            for g in 0..params.groups() {
                let h = 1e-7 * params.scales()[g];
                let shifted = |delta: f64| {
                    let mut s = params.scales().to_vec();
                    s[g] += delta;
                    params.with_scales(s).unwrap()
                };
                let (pu, pd) = (shifted(h), shifted(-h));
                // smooth point: no code moves inside the difference stencil
                if quantize(&w, &pu).unwrap().codes() != codes.codes()
                    || quantize(&w, &pd).unwrap().codes() != codes.codes()
                {
                    continue;
                }
                let mut up = quant.clone();
                up.set_scales(t, pu.scales().to_vec()).unwrap();
                let mut down = quant.clone();
                down.set_scales(t, pd.scales().to_vec()).unwrap();
                let fd = (problem.objective(&up).unwrap().total - problem.objective(&down).unwrap().total) / (2.0 * h);
                let ste = grads.scales[t][g];
                let rel = (ste - fd).abs() / fd.abs().max(1e-12);
                worst = worst.max(rel);
                if rel > 0.05 {
                    failed += 1;
                }
                checked += 1;
            }
        }
    }
    outcome(
        checked >= 50 && failed == 0,
        format!("{checked} smooth points, {failed} outside 5%, worst relative gap {worst:.3e}"),
    )
}

fn trace_for(cfg: &Config) -> (quantsparse::harness::TimestepTrace, quantsparse::ssar::RefreshPlan, PipelineOptions) {
    let cal = calibrate_config(cfg).unwrap();
    let plan = cfg.plan().unwrap();
    let opts = PipelineOptions {
        modes: CacheMode::ALL.to_vec(),
        level: cfg.ssar.level,
        rank: cfg.rank(),
    };
    let trace = build_trace(&cal.block, &cal.params, &cfg.workload, &cfg.mask, &plan, opts.level).unwrap();
    (trace, plan, opts)
}

fn proof_identities() -> Outcome {
    let (mut worst, mut steps) = (0.0f64, 0usize);
    for seed in 0..3 {
        let cfg = seeded_config(seed);
        let (trace, plan, opts) = trace_for(&cfg);
        let report = drive_with(&trace, &cfg.mask, &plan, &opts, |_| {}).unwrap();
        let delta = &trace.residuals;
        let full_steps = plan.full_steps(true);
        for mode in [CacheMode::First, CacheMode::Second] {
            let s = report.series(mode).unwrap();
            for (&t, &err) in s.steps.iter().zip(&s.frob_err) {
                let r = *full_steps.iter().rev().find(|&&f| f < t).unwrap();
                let drift = delta[t].sub(&delta[r]).unwrap();
                let want = match mode {
                    CacheMode::First => frobenius(&drift),
                    _ => {
                        assert!(plan.is_pair(r), "second-order reference {r} is not a pair step");
                        let hat_ref = delta[r].sub(&delta[r - 1]).unwrap();
                        frobenius(&drift.sub(&hat_ref).unwrap())
                    }
                };
                worst = worst.max((err - want).abs());
                steps += 1;
            }
        }
    }
    outcome(worst <= 1e-12, format!("{steps} corrected steps, max |error - identity| {worst:.3e}"))
}

fn cache_ladder() -> Outcome {
    let (mut ladder, mut strict) = (0, 0);
    let mut means = [0.0f64; 4];
    for seed in 0..20 {
        let cfg = seeded_config(seed);
        let (trace, plan, opts) = trace_for(&cfg);
        let report = drive_with(&trace, &cfg.mask, &plan, &opts, |_| {}).unwrap();
        let m = CacheMode::ALL.map(|c| report.series(c).unwrap().mean_frob);
        for (acc, v) in means.iter_mut().zip(m) {
            *acc += v / 20.0;
        }
        if m[0] >= m[1] && m[1] >= m[2] && m[2] >= m[3] {
            ladder += 1;
        }
        if m[2] < m[1] {
            strict += 1;
        }
    }
    outcome(
        ladder >= 18 && strict >= 18,
        format!(
            "ordered ladder in {ladder}/20 seeds, second below first in {strict}/20; mean errors none {:.3} first {:.3} second {:.3} ssar {:.3}",
            means[0], means[1], means[2], means[3]
        ),
    )
}

fn refresh_exactness() -> Outcome {
    let cfg = Config::default();
    let (trace, plan, opts) = trace_for(&cfg);
    let mut exact_steps = 0;
    let mut all_exact = true;
    drive_with(&trace, &cfg.mask, &plan, &opts, |o| {
        if plan.is_refresh(o.step) {
            assert!(o.exact);
            all_exact &= o.output == &trace.full[o.step];
            exact_steps += 1;
        }
    })
    .unwrap();
    let expected = plan.refresh_steps.len() * opts.modes.len();

    let t = plan.pair_steps[0];
    let first = ResidualCache::first_order(&trace.full[t], &trace.sparse_q[t], t).unwrap();
    let second = last_pair_cache(&trace, &plan, opts.rank).unwrap();
    let (rows, cols) = first.shape();
    let parity = first.footprint() == rows * cols && second.footprint() == first.footprint();

    // with the second term zeroed the second-order rule is the first-order one
    let mut zeroed = second.clone();
    zeroed.second_term = Matrix::zeros(rows, cols);
    zeroed.combined = zeroed.delta_ref.clone();
    let sq = &trace.sparse_q[t + 1];
    let reduces = second_order_apply(sq, &zeroed).unwrap()
        == first_order_apply(sq, &ResidualCache::first_order(&trace.full[second.t_ref], &trace.sparse_q[second.t_ref], second.t_ref).unwrap()).unwrap();
    outcome(
        all_exact && exact_steps == expected && parity && reduces,
        format!(
            "{exact_steps}/{expected} refresh outputs equal the exact result bit-for-bit; footprint {} vs {} entries; zero second term reduces to first order: {reduces}",
            second.footprint(),
            first.footprint()
        ),
    )
}

fn run_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(&config, Config::default().to_json()).unwrap();
    let mut csv = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let args = ["quantsparse", "run", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
        let code = cli_main_with(args, &mut Vec::new(), &mut Vec::new());
        if code != 0 {
            return outcome(false, format!("run exited with {code}"));
        }
        csv.push(std::fs::read(out.join("errors.csv")).unwrap());
    }
    outcome(csv[0] == csv[1], format!("two runs, errors.csv of {} bytes, identical: {}", csv[0].len(), csv[0] == csv[1]))
}

type Criterion = (u32, &'static str, fn() -> Outcome, Option<Duration>);

fn main() {
    let criteria: [Criterion; 11] = [
        (1, "quantizer round trip", quantizer_round_trip, Some(Duration::from_secs(1))),
        (2, "logit noise bound", qk_noise_bound, None),
        (3, "sparse attention oracle", sparse_attention_oracle, None),
        (4, "saliency conservation", saliency_conservation, None),
        (5, "truncated SVD error", eckart_young, None),
        (6, "calibration descent", calibration_descent, Some(Duration::from_secs(60))),
        (7, "STE gradient fidelity", ste_fidelity, None),
        (8, "cache error identities", proof_identities, None),
        (9, "cache error ladder", cache_ladder, Some(Duration::from_secs(120))),
        (10, "refresh exactness and storage parity", refresh_exactness, None),
        (11, "run determinism", run_determinism, None),
    ];
    let mut failed = Vec::new();
    for (id, name, check, limit) in criteria {
        let start = Instant::now();
        let o = check();
        let took = start.elapsed();
        let in_time = limit.is_none_or(|l| took <= l);
        let pass = o.pass && in_time;
        let budget = limit.map_or(String::new(), |l| format!(" (limit {:.0}s)", l.as_secs_f64()));
        println!(
            "criterion {id:>2} {}: {name}: {}; {:.2}s{budget}",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            took.as_secs_f64()
        );
        if !pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all 11 criteria pass");
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
