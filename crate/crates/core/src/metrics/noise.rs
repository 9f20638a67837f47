use serde::{Deserialize, Serialize};

use super::similarity::{cosine, mean_std, EXCLUSION_EPS};
use crate::error::{Error, Result};
use crate::numerics::Prng;

/// Monte-Carlo estimate of both attention-output similarity variants on
/// pure-noise updates, plus a uniform random-update reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseCheck {
    pub d: usize,
    pub trials: usize,
    pub force_equal: bool,
    pub mean_norm_variant: f64,
    pub stderr_norm_variant: f64,
    pub mean_plain_variant: f64,
    pub stderr_plain_variant: f64,
    /// Cosine between the noise update and `u - z` with `u` uniform in `[-1, 1]^d`.
    pub mean_random_update: f64,
    pub stderr_random_update: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    v.iter().map(|x| x / n).collect()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Draws `z ~ N(0, I)` and two noise vectors rescaled to `‖r‖² = 3‖z‖²`,
/// then scores `z + r` against `z + r'` relative to `z`.
///
/// With `force_equal`, `r' = r`.
pub fn noise_simaou_check(d: usize, trials: usize, prng: &mut Prng, force_equal: bool) -> Result<NoiseCheck> {
    if d < 2 || trials == 0 {
        return Err(Error::InvalidArgument(format!(
            "noise check needs d >= 2 and trials >= 1 (got d = {d}, trials = {trials})"
        )));
    }
    let (mut norm_v, mut plain_v, mut rand_v) = (Vec::new(), Vec::new(), Vec::new());
    let gauss = |prng: &mut Prng| -> Vec<f64> { (0..d).map(|_| prng.standard_normal()).collect() };
    for _ in 0..trials {
        let z = gauss(prng);
        let target = 3.0f64.sqrt() * norm(&z);
        let rescale = |r: Vec<f64>| -> Vec<f64> {
            let s = target / norm(&r);
            r.into_iter().map(|x| x * s).collect()
        };
        let r = rescale(gauss(prng));
        let r2 = if force_equal { r.clone() } else { rescale(gauss(prng)) };
        let icl: Vec<f64> = z.iter().zip(&r).map(|(a, b)| a + b).collect();
        let ft: Vec<f64> = z.iter().zip(&r2).map(|(a, b)| a + b).collect();
        let uz = unit(&z);
        let pair = |a: &[f64], b: &[f64]| cosine(a, b, EXCLUSION_EPS).map(|c| c.value());
        plain_v.extend(pair(&sub(&icl, &z), &sub(&ft, &z))?);
        norm_v.extend(pair(&sub(&unit(&icl), &uz), &sub(&unit(&ft), &uz))?);
        let u: Vec<f64> = (0..d).map(|_| prng.uniform_range(-1.0, 1.0)).collect();
        rand_v.extend(pair(&sub(&icl, &z), &sub(&u, &z))?);
    }
    let summarize = |v: &[f64]| {
        let (m, s) = mean_std(v.iter().copied());
        (m.unwrap_or(f64::NAN), s.unwrap_or(0.0) / (v.len() as f64).sqrt())
    };
    let (mean_norm_variant, stderr_norm_variant) = summarize(&norm_v);
    let (mean_plain_variant, stderr_plain_variant) = summarize(&plain_v);
    let (mean_random_update, stderr_random_update) = summarize(&rand_v);
    Ok(NoiseCheck {
        d,
        trials,
        force_equal,
        mean_norm_variant,
        stderr_norm_variant,
        mean_plain_variant,
        stderr_plain_variant,
        mean_random_update,
        stderr_random_update,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalized_variant_is_one_quarter() {
        let r = noise_simaou_check(1024, 256, &mut Prng::new(0), false).unwrap();
        assert!((r.mean_norm_variant - 0.25).abs() <= 0.02, "{r:?}");
        assert!(r.mean_plain_variant.abs() <= 0.02, "{r:?}");
    }

    #[test]
    fn equal_noise_gives_one() {
        let r = noise_simaou_check(64, 1, &mut Prng::new(3), true).unwrap();
        assert_eq!(r.mean_plain_variant, 1.0);
    }

    #[test]
    fn rejects_tiny_dimension() {
        assert!(noise_simaou_check(1, 4, &mut Prng::new(0), false).is_err());
    }
}
