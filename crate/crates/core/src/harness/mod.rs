//! Synthetic workloads, the end-to-end driver, metrics, sweeps and the CLI.
pub mod cli;
pub mod config;
pub mod metrics;
pub mod pipeline;
pub mod sweep;
pub mod workload;

pub use cli::{cli_main, cli_main_with};
pub use config::{Config, Level, ModeSelection};
pub use metrics::{matrix_psnr, median};
pub use pipeline::{
    build_trace, calibrate_config, drive, drive_with, last_pair_cache, run_config, run_pipeline, CacheMode, ModeSeries,
    PipelineOptions, RunReport, StepOutput, TimestepTrace,
};
pub use sweep::{sweep, write_sweep_csv, SweepCell, SweepGrid, SweepRow};
pub use workload::{calibration_samples, generate_workload, weight_drift, NoiseMode, WorkloadSpec};
