//! Synthetic multi-timestep inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Where the step-to-step variation of the residuals comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// Full-precision pipeline; residuals come from sparsity alone.
    None,
    /// Residuals include the error of the fake-quantized block.
    #[default]
    QuantOnly,
    /// As `QuantOnly`, plus a rank-one drift of the q/k/v weights that grows
    /// linearly over the steps.
    QuantPlusDrift,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    #[serde(rename = "L")]
    pub len: usize,
    pub d: usize,
    #[serde(rename = "T")]
    pub steps: usize,
    pub rho: f64,
    pub seed: u64,
    pub noise_mode: NoiseMode,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            len: 64,
            d: 16,
            steps: 50,
            rho: 0.95,
            seed: 0,
            noise_mode: NoiseMode::QuantOnly,
        }
    }
}

/// Drift amplitude at the last step, relative to the `1/sqrt(d)` weight
/// scale.
const DRIFT_SCALE: f64 = 0.5;
const DRIFT_SEED_SALT: u64 = 0xd21f_7000_0000_0005;

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.len < 4 || self.d < 2 || self.steps < 3 {
            return Err(Error::param(format!(
                "workload needs L >= 4, d >= 2, T >= 3; got L={}, d={}, T={}",
                self.len, self.d, self.steps
            )));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::param(format!("rho must be in [0, 1), got {}", self.rho)));
        }
        Ok(())
    }
}

/// `X_0 ~ N(0, 1)`, `X_t = ρ X_{t−1} + sqrt(1 − ρ²) ξ_t`.
pub fn generate_workload(spec: &WorkloadSpec) -> Result<Vec<Matrix>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let innovation = (1.0 - spec.rho * spec.rho).sqrt();
    let mut x = Matrix::gaussian(spec.len, spec.d, &mut rng);
    let mut steps = Vec::with_capacity(spec.steps);
    steps.push(x.clone());
    for _ in 1..spec.steps {
        let xi = Matrix::gaussian(spec.len, spec.d, &mut rng);
        x = x.scale(spec.rho).add(&xi.scale(innovation))?;
        steps.push(x.clone());
    }
    Ok(steps)
}

/// Rank-one directions `u vᵀ` for the q, k and v weights of a
/// `d_head × d_model` block, scaled to their value at the last step.
/// `None` unless the mode is [`NoiseMode::QuantPlusDrift`].
pub fn weight_drift(spec: &WorkloadSpec, d_head: usize) -> Result<Option<[Matrix; 3]>> {
    spec.validate()?;
    if spec.noise_mode != NoiseMode::QuantPlusDrift {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ DRIFT_SEED_SALT);
    let scale = DRIFT_SCALE / (spec.d as f64).sqrt();
    let mut one = || -> Result<Matrix> {
        let u = Matrix::gaussian(d_head, 1, &mut rng);
        let v = Matrix::gaussian(1, spec.d, &mut rng);
        let uv = crate::numerics::matmul(&u, &v)?;
        let norm = crate::numerics::frobenius(&uv).max(f64::MIN_POSITIVE);
        Ok(uv.scale(scale * ((d_head * spec.d) as f64).sqrt() / norm))
    };
    Ok(Some([one()?, one()?, one()?]))
}

/// Calibration inputs: independent draws from the same process, seeded
/// apart from any run that uses `spec.seed`.
pub fn calibration_samples(spec: &WorkloadSpec, samples: usize) -> Result<Vec<Matrix>> {
    let cal = WorkloadSpec {
        steps: samples.max(3),
        seed: spec.seed ^ CALIB_SEED_SALT,
        noise_mode: NoiseMode::QuantOnly,
        ..*spec
    };
    let mut xs = generate_workload(&cal)?;
    xs.truncate(samples);
    Ok(xs)
}

const CALIB_SEED_SALT: u64 = 0x5eed_ca11_b000_0001;
