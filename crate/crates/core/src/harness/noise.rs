use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::{noise_simaou_check, NoiseCheck};
use crate::numerics::Prng;

/// Value the normalized variant converges to on the constructed noise.
pub const EXPECTED_NORM_VARIANT: f64 = 0.25;
/// Allowed deviation before the check fails.
pub const NORM_VARIANT_TOLERANCE: f64 = 0.03;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub seed: u64,
    #[serde(flatten)]
    pub result: NoiseCheck,
    pub passed: bool,
}

/// Runs the noise analysis and judges it.
///
/// Normally passes when the normalized mean is within 0.03 of 1/4. With
/// `force_equal` both noise draws coincide and the plain variant must be 1.
pub fn run_noise_check(d: usize, trials: usize, seed: u64, force_equal: bool) -> Result<NoiseReport> {
    let mut prng = Prng::new(seed).split_named("noise-check");
    let result = noise_simaou_check(d, trials, &mut prng, force_equal)?;
    let passed = if force_equal {
        (result.mean_plain_variant - 1.0).abs() <= 1e-12
    } else {
        (result.mean_norm_variant - EXPECTED_NORM_VARIANT).abs() <= NORM_VARIANT_TOLERANCE
    };
    Ok(NoiseReport { seed, result, passed })
}
