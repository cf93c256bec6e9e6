//! Joint post-training quantization and sparse attention for toy
//! transformer blocks: fake quantization, masked attention, multi-scale
//! salient attention distillation, block calibration, and second-order
//! residual caching across timesteps.

pub mod error;
pub mod numerics;
pub mod quant;
pub mod attention;
pub mod calib;
pub mod msad;
pub mod harness;
pub mod ssar;

pub use error::{Error, Result};
pub use numerics::Matrix;
