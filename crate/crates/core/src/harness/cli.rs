//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 for usage, configuration and I/O errors,
//! 2 when the numerics fail.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use super::config::Config;
use super::pipeline::{build_trace, calibrate_config, drive, last_pair_cache, PipelineOptions, RunReport};
use super::sweep::{sweep, write_sweep_csv, SweepGrid};
use crate::calib::CalibResult;
use crate::error::{Error, Result};
use crate::ssar::{encode_cache, residual_spectrum, write_spectrum_csv};

#[derive(Debug, Parser)]
#[command(name = "quantsparse", version, about = "Quantized sparse attention lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Calibrate the configured block and write the result as JSON.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the cached pipeline and write a report directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Calibration result; calibrates from the config when absent.
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Calibrate and run every cell of a grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a report directory on stdout.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

/// Parses `argv` (program name first) and runs the command.
pub fn cli_main<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    cli_main_with(argv, &mut stdout.lock(), &mut stderr.lock())
}

pub fn cli_main_with<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_numerical() {
                2
            } else {
                1
            }
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Calibrate { config, out: dest } => {
            let cfg = Config::load(&config)?;
            let cal = calibrate_config(&cfg)?;
            cal.save(&dest)?;
            let _ = writeln!(
                out,
                "calibrated: objective {:.6e} -> {:.6e} (best epoch {})",
                cal.initial.total, cal.final_report.total, cal.best_epoch
            );
            Ok(())
        }
        Command::Run { config, calib, out: dir } => {
            let cfg = Config::load(&config)?;
            let cal = match &calib {
                Some(p) => {
                    let c = CalibResult::load(p)?;
                    check_calibration(&cfg, &c).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                    c
                }
                None => calibrate_config(&cfg)?,
            };
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            if calib.is_none() {
                cal.save(&dir.join("calib.json"))?;
                let mut w = create(&dir.join("loss_trace.csv"))?;
                crate::msad::write_loss_trace(&mut w, &cal.term_trace)?;
                w.flush().map_err(|e| Error::io(dir.join("loss_trace.csv"), e))?;
            }
            let report = run_to_dir(&cfg, &cal, &dir)?;
            for s in &report.series {
                let _ = writeln!(
                    out,
                    "{:<6} mean_frob {:.6e}  median_psnr {}",
                    s.mode.as_str(),
                    s.mean_frob,
                    s.median_psnr.map_or("inf".into(), |p| format!("{p:.3}"))
                );
            }
            Ok(())
        }
        Command::Sweep { config, grid, out: dest } => {
            let cfg = Config::load(&config)?;
            let grid = SweepGrid::load(&grid)?;
            let rows = sweep(&cfg, &grid)?;
            let mut w = create(&dest)?;
            write_sweep_csv(&mut w, &rows)?;
            w.flush().map_err(|e| Error::io(&dest, e))?;
            let failed = rows.iter().filter(|r| r.outcome.is_err()).count();
            let _ = writeln!(out, "{} cells, {failed} failed", rows.len());
            Ok(())
        }
        Command::Report { input, format } => {
            let path = input.join("report.json");
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let report = RunReport::from_json(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            write_summary(&report, format, out)
        }
    }
}

fn check_calibration(cfg: &Config, cal: &CalibResult) -> Result<()> {
    if cal.block.d_model() != cfg.workload.d {
        return Err(Error::Config(format!(
            "calibrated block has width {}, workload has {}",
            cal.block.d_model(),
            cfg.workload.d
        )));
    }
    if cal.setup != cfg.quant {
        return Err(Error::Config("calibration used different quantization settings".into()));
    }
    Ok(())
}

fn run_to_dir(cfg: &Config, cal: &CalibResult, dir: &Path) -> Result<RunReport> {
    let plan = cfg.plan()?;
    let opts = PipelineOptions {
        modes: cfg.ssar.mode.modes(),
        level: cfg.ssar.level,
        rank: cfg.rank(),
    };
    let trace = build_trace(&cal.block, &cal.params, &cfg.workload, &cfg.mask, &plan, opts.level)?;
    let mut report = drive(&trace, &cfg.mask, &plan, &opts)?;
    report.config = Some(cfg.clone());

    let errors = dir.join("errors.csv");
    let mut w = create(&errors)?;
    report.write_errors_csv(&mut w)?;
    w.flush().map_err(|e| Error::io(&errors, e))?;

    let spectrum = dir.join("spectrum.csv");
    let mut w = create(&spectrum)?;
    write_spectrum_csv(&mut w, &residual_spectrum(&trace, opts.rank)?)?;
    w.flush().map_err(|e| Error::io(&spectrum, e))?;

    let cache = last_pair_cache(&trace, &plan, opts.rank)?;
    let blob = dir.join("cache.bin");
    fs::write(&blob, encode_cache(&cache)).map_err(|e| Error::io(&blob, e))?;

    write_text(&dir.join("report.json"), &report.to_json())?;
    Ok(report)
}

fn write_summary(report: &RunReport, format: Format, out: &mut dyn Write) -> Result<()> {
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(out);
            w.write_record(["mode", "mean_frob", "median_psnr", "flops_fraction", "corrected_steps"])?;
            for s in &report.series {
                w.write_record([
                    s.mode.as_str().to_string(),
                    s.mean_frob.to_string(),
                    s.median_psnr.map_or("inf".into(), |p| p.to_string()),
                    s.flops_fraction.to_string(),
                    s.steps.len().to_string(),
                ])?;
            }
            w.flush().map_err(|e| Error::io("stdout", e))?;
        }
        Format::Json => {
            let modes: Vec<serde_json::Value> = report
                .series
                .iter()
                .map(|s| {
                    serde_json::json!({
                        "mode": s.mode,
                        "mean_frob": s.mean_frob,
                        "median_psnr": s.median_psnr,
                        "flops_fraction": s.flops_fraction,
                        "corrected_steps": s.steps.len(),
                    })
                })
                .collect();
            let summary = serde_json::json!({
                "level": report.level,
                "rank": report.rank,
                "mask_density": report.mask_density,
                "shift": report.shift,
                "extrapolation": report.extrapolation,
                "salient_fraction": report.salient_fraction,
                "modes": modes,
            });
            let text = serde_json::to_string_pretty(&summary)?;
            writeln!(out, "{text}").map_err(|e| Error::io("stdout", e))?;
        }
    }
    Ok(())
}
