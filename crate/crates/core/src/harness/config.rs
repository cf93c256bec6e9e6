//! Run configuration. Every field has a default, so `{}` is a valid config.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::workload::WorkloadSpec;
use crate::attention::MaskSpec;
use crate::calib::{CalibSchedule, LrDecay, Optimizer, QuantSetup, ToyBlock};
use crate::error::{Error, Result};
use crate::msad::DistillConfig;
use crate::ssar::{full_rank, make_refresh_plan, RefreshPlan};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub workload: WorkloadSpec,
    pub quant: QuantSetup,
    pub mask: MaskSpec,
    pub msad: MsadSection,
    pub calib: CalibSection,
    pub ssar: SsarSection,
    pub block: BlockSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MsadSection {
    pub stride: usize,
    /// Salient query count; `max(4, L/4)` when absent.
    pub k: Option<usize>,
    pub lambda_global: f64,
    pub lambda_local: f64,
}

impl Default for MsadSection {
    fn default() -> Self {
        let d = DistillConfig::for_len(64);
        Self {
            stride: d.stride,
            k: None,
            lambda_global: d.lambda_global,
            lambda_local: d.lambda_local,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibSection {
    pub epochs: usize,
    pub samples: usize,
    pub lr_scale: f64,
    pub lr_affine: f64,
    pub lr_decay: LrDecay,
    pub optimizer: Optimizer,
    /// Apply the sparse mask while calibrating.
    pub mask_in_calib: bool,
}

impl Default for CalibSection {
    fn default() -> Self {
        let s = CalibSchedule::default();
        Self {
            epochs: s.epochs,
            samples: s.samples,
            lr_scale: s.lr_scale,
            lr_affine: s.lr_affine,
            lr_decay: s.lr_decay,
            optimizer: s.optimizer,
            mask_in_calib: true,
        }
    }
}

/// Which cache variants a run evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeSelection {
    #[default]
    All,
    None,
    First,
    Second,
    Ssar,
}

/// Where residuals are taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    /// On the attention map `A`.
    Attention,
    /// On the attention output `A·V`.
    #[default]
    Output,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsarSection {
    /// Truncation rank of the second-order term; `min(16, dim/4)` when
    /// absent, where `dim` is the smaller side of the residual.
    pub rank: Option<usize>,
    pub interval: usize,
    pub mode: ModeSelection,
    pub level: Level,
    /// Build the second-order term once from steps 0 and 1 and reuse it.
    pub freeze_second_order: bool,
}

impl Default for SsarSection {
    fn default() -> Self {
        Self {
            rank: None,
            interval: 5,
            mode: ModeSelection::All,
            level: Level::Output,
            freeze_second_order: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockSection {
    /// Head width; equals the model width when absent.
    pub d_head: Option<usize>,
    /// Weight seed; derived from the workload seed when absent.
    pub seed: Option<u64>,
    pub rotation: bool,
}

const BLOCK_SEED_SALT: u64 = 0xb10c_0000_0000_0017;
const ROTATION_SEED_SALT: u64 = 0x0707_a7e0_0000_0003;

/// Default rank clamp for a residual of the given shape.
pub fn default_rank(shape: (usize, usize)) -> usize {
    (full_rank(shape) / 4).clamp(1, 16)
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config(e.to_string());
        self.workload.validate().map_err(wrap)?;
        self.quant.validate().map_err(wrap)?;
        self.mask.validate().map_err(wrap)?;
        self.distill().validate(self.workload.len).map_err(wrap)?;
        self.schedule().validate().map_err(wrap)?;
        self.plan().map_err(wrap)?;
        if self.block.d_head == Some(0) {
            return Err(Error::Config("block.d_head must be >= 1".into()));
        }
        let rank = self.rank();
        let max = full_rank(self.residual_shape());
        if rank == 0 || rank > max {
            return Err(Error::Config(format!("ssar.rank must be in 1..={max}, got {rank}")));
        }
        Ok(())
    }

    pub fn distill(&self) -> DistillConfig {
        let len = self.workload.len;
        DistillConfig {
            stride: self.msad.stride,
            salient_k: self.msad.k.unwrap_or_else(|| DistillConfig::for_len(len).salient_k),
            lambda_global: self.msad.lambda_global,
            lambda_local: self.msad.lambda_local,
        }
    }

    pub fn schedule(&self) -> CalibSchedule {
        CalibSchedule {
            epochs: self.calib.epochs,
            samples: self.calib.samples,
            lr_scale: self.calib.lr_scale,
            lr_affine: self.calib.lr_affine,
            lr_decay: self.calib.lr_decay,
            optimizer: self.calib.optimizer,
        }
    }

    /// Mask used during calibration.
    pub fn calib_mask(&self) -> MaskSpec {
        if self.calib.mask_in_calib {
            self.mask
        } else {
            MaskSpec::full()
        }
    }

    pub fn plan(&self) -> Result<RefreshPlan> {
        let plan = make_refresh_plan(self.workload.steps, self.ssar.interval)?;
        Ok(if self.ssar.freeze_second_order {
            plan.with_frozen_second_order()
        } else {
            plan
        })
    }

    pub fn d_head(&self) -> usize {
        self.block.d_head.unwrap_or(self.workload.d)
    }

    pub fn residual_shape(&self) -> (usize, usize) {
        let len = self.workload.len;
        match self.ssar.level {
            Level::Attention => (len, len),
            Level::Output => (len, self.d_head()),
        }
    }

    pub fn rank(&self) -> usize {
        self.ssar.rank.unwrap_or_else(|| default_rank(self.residual_shape()))
    }

    /// The block this configuration describes.
    pub fn build_block(&self) -> Result<ToyBlock> {
        let seed = self.block.seed.unwrap_or(self.workload.seed ^ BLOCK_SEED_SALT);
        let block = ToyBlock::random(self.workload.d, self.d_head(), seed);
        if self.block.rotation {
            block.with_rotation(seed ^ ROTATION_SEED_SALT)
        } else {
            Ok(block)
        }
    }
}
