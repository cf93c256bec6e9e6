//! Ablation grids over a base configuration.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::Config;
use super::pipeline::{calibrate_config, run_config, CacheMode, RunReport};
use crate::error::{Error, Result};

/// Upper bound on the number of cells in one grid.
pub const MAX_CELLS: usize = 4096;

/// Axis values to sweep. An empty axis keeps the base config's value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub stride: Vec<usize>,
    pub k: Vec<usize>,
    pub lambda_global: Vec<f64>,
    pub lambda_local: Vec<f64>,
    pub rank: Vec<usize>,
    pub density: Vec<f64>,
    pub wbits: Vec<u32>,
    pub abits: Vec<u32>,
    pub interval: Vec<usize>,
    pub seed: Vec<u64>,
}

/// One grid point, with every axis resolved.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub stride: usize,
    pub k: usize,
    pub lambda_global: f64,
    pub lambda_local: f64,
    pub rank: usize,
    pub density: f64,
    pub wbits: u32,
    pub abits: u32,
    pub interval: usize,
    pub seed: u64,
}

impl SweepGrid {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("grid: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Number of cells, or `None` on overflow.
    pub fn size(&self) -> Option<usize> {
        [
            self.stride.len(),
            self.k.len(),
            self.lambda_global.len(),
            self.lambda_local.len(),
            self.rank.len(),
            self.density.len(),
            self.wbits.len(),
            self.abits.len(),
            self.interval.len(),
            self.seed.len(),
        ]
        .iter()
        .try_fold(1usize, |acc, &n| acc.checked_mul(n.max(1)))
    }

    /// Cells in row-major order, the last axis varying fastest.
    pub fn cells(&self, base: &Config) -> Result<Vec<SweepCell>> {
        let n = self.size().filter(|&n| n <= MAX_CELLS).ok_or_else(|| {
            Error::Config(format!("grid exceeds {MAX_CELLS} cells"))
        })?;
        fn axis<T: Copy>(v: &[T], base: T) -> Vec<T> {
            if v.is_empty() {
                vec![base]
            } else {
                v.to_vec()
            }
        }
        let stride = axis(&self.stride, base.msad.stride);
        let k = axis(&self.k, base.distill().salient_k);
        let lg = axis(&self.lambda_global, base.msad.lambda_global);
        let ll = axis(&self.lambda_local, base.msad.lambda_local);
        let rank = axis(&self.rank, base.rank());
        let density = axis(&self.density, base.mask.density);
        let wbits = axis(&self.wbits, base.quant.wbits);
        let abits = axis(&self.abits, base.quant.abits);
        let interval = axis(&self.interval, base.ssar.interval);
        let seed = axis(&self.seed, base.workload.seed);
        let mut out = Vec::with_capacity(n);
        for &stride in &stride {
            for &k in &k {
                for &lambda_global in &lg {
                    for &lambda_local in &ll {
                        for &rank in &rank {
                            for &density in &density {
                                for &wbits in &wbits {
                                    for &abits in &abits {
                                        for &interval in &interval {
                                            for &seed in &seed {
                                                out.push(SweepCell {
                                                    stride,
                                                    k,
                                                    lambda_global,
                                                    lambda_local,
                                                    rank,
                                                    density,
                                                    wbits,
                                                    abits,
                                                    interval,
                                                    seed,
                                                });
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

impl SweepCell {
    /// `base` with this cell's values substituted, validated.
    pub fn apply(&self, base: &Config) -> Result<Config> {
        let mut cfg = base.clone();
        cfg.msad.stride = self.stride;
        cfg.msad.k = Some(self.k);
        cfg.msad.lambda_global = self.lambda_global;
        cfg.msad.lambda_local = self.lambda_local;
        cfg.ssar.rank = Some(self.rank);
        cfg.mask.density = self.density;
        cfg.quant.wbits = self.wbits;
        cfg.quant.abits = self.abits;
        cfg.ssar.interval = self.interval;
        cfg.workload.seed = self.seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Outcome of one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub index: usize,
    pub cell: SweepCell,
    pub outcome: std::result::Result<CellSummary, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub calib_initial: f64,
    pub calib_final: f64,
    /// Mean Frobenius error per mode, in [`CacheMode::ALL`] order.
    pub mean_frob: [Option<f64>; 4],
    pub median_psnr: [Option<f64>; 4],
    pub flops_fraction: f64,
}

fn summarize(report: &RunReport, initial: f64, fin: f64) -> CellSummary {
    let pick = |f: fn(&super::pipeline::ModeSeries) -> Option<f64>| {
        CacheMode::ALL.map(|m| report.series(m).and_then(f))
    };
    CellSummary {
        calib_initial: initial,
        calib_final: fin,
        mean_frob: pick(|s| Some(s.mean_frob)),
        median_psnr: pick(|s| s.median_psnr),
        flops_fraction: report.series.first().map_or(f64::NAN, |s| s.flops_fraction),
    }
}

/// Calibrates and runs one cell.
pub fn run_cell(base: &Config, cell: &SweepCell) -> Result<CellSummary> {
    let cfg = cell.apply(base)?;
    let cal = calibrate_config(&cfg)?;
    let report = run_config(&cfg, &cal)?;
    Ok(summarize(&report, cal.initial.total, cal.final_report.total))
}

/// Thread count from `QS_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var("QS_THREADS").ok()?.trim().parse().ok().filter(|&n| n > 0)
}

/// Runs every cell. A failing cell is recorded and the sweep continues;
/// rows come back in grid order whatever the scheduling.
pub fn sweep(base: &Config, grid: &SweepGrid) -> Result<Vec<SweepRow>> {
    let cells = grid.cells(base)?;
    let work = || {
        cells
            .par_iter()
            .enumerate()
            .map(|(index, cell)| SweepRow {
                index,
                cell: *cell,
                outcome: run_cell(base, cell).map_err(|e| e.to_string()),
            })
            .collect::<Vec<_>>()
    };
    match thread_cap() {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(work))
        }
        None => Ok(work()),
    }
}

pub const SWEEP_HEADER: [&str; 24] = [
    "cell",
    "stride",
    "k",
    "lambda_global",
    "lambda_local",
    "rank",
    "density",
    "wbits",
    "abits",
    "interval",
    "seed",
    "status",
    "calib_initial",
    "calib_final",
    "mean_none",
    "mean_first",
    "mean_second",
    "mean_ssar",
    "psnr_none",
    "psnr_first",
    "psnr_second",
    "psnr_ssar",
    "flops_fraction",
    "error",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_sweep_csv<W: Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SWEEP_HEADER)?;
    for r in rows {
        let c = &r.cell;
        let mut rec = vec![
            r.index.to_string(),
            c.stride.to_string(),
            c.k.to_string(),
            c.lambda_global.to_string(),
            c.lambda_local.to_string(),
            c.rank.to_string(),
            c.density.to_string(),
            c.wbits.to_string(),
            c.abits.to_string(),
            c.interval.to_string(),
            c.seed.to_string(),
        ];
        match &r.outcome {
            Ok(s) => {
                rec.push("ok".into());
                rec.push(s.calib_initial.to_string());
                rec.push(s.calib_final.to_string());
                rec.extend(s.mean_frob.iter().map(|&v| opt(v)));
                rec.extend(s.median_psnr.iter().map(|&v| opt(v)));
                rec.push(s.flops_fraction.to_string());
                rec.push(String::new());
            }
            Err(e) => {
                rec.push("error".into());
                rec.extend(std::iter::repeat_n(String::new(), 11));
                rec.push(e.clone());
            }
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("sweep table", e))?;
    Ok(())
}
