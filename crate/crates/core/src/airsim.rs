//! One uplink round at the parameter server.
//!
//! OTA devices pre-scale by `gamma / h` so the channel cancels exactly; the
//! simulation therefore works after cancellation and adds receiver noise of
//! per-entry variance `N0 / gamma^2` straight onto the gradient sum. Digital
//! devices are delivered without error.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Relative slack on the per-sample energy constraint.
pub const ENERGY_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AirsimError {
    #[error("OTA aggregation needs at least one transmitting device")]
    NoOtaDevices,
    #[error("OTA pre-scaler must be positive, got {0}")]
    InvalidPrescaler(f64),
    #[error("nothing to reconstruct: no OTA aggregate and no digital gradients")]
    NothingReceived,
    #[error("vector length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("divisor {divisor} is smaller than the {contributors} contributing devices")]
    Divisor { divisor: usize, contributors: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct OtaAggregate {
    /// `v = y / gamma`: the OTA gradients' sum plus scaled receiver noise.
    pub noisy_sum: Vec<f64>,
    pub gamma: f64,
    /// Per-entry noise variance `N0 / gamma^2`.
    pub noise_variance: f64,
    /// Number of devices superposed in `noisy_sum`.
    pub contributors: usize,
}

pub fn ota_aggregate<R: Rng + ?Sized>(
    ota_gradients: &[&[f64]],
    gamma: f64,
    noise_density: f64,
    rng: &mut R,
) -> Result<OtaAggregate, AirsimError> {
    let first = ota_gradients.first().ok_or(AirsimError::NoOtaDevices)?;
    if !(gamma > 0.0) {
        return Err(AirsimError::InvalidPrescaler(gamma));
    }
    let dim = first.len();
    let mut sum = vec![0.0; dim];
    for g in ota_gradients {
        if g.len() != dim {
            return Err(AirsimError::LengthMismatch {
                expected: dim,
                found: g.len(),
            });
        }
        for (s, x) in sum.iter_mut().zip(g.iter()) {
            *s += x;
        }
    }
    let noise_variance = noise_density / (gamma * gamma);
    if noise_variance > 0.0 {
        let sd = noise_variance.sqrt();
        for s in &mut sum {
            let z: f64 = rng.sample(StandardNormal);
            *s += sd * z;
        }
    }
    Ok(OtaAggregate {
        noisy_sum: sum,
        gamma,
        noise_variance,
        contributors: ota_gradients.len(),
    })
}

/// Ratio `max_i |gamma g_i / h|^2 / E_s` of the transmitted peak sample
/// energy to the budget.
pub fn energy_ratio(g: &[f64], gain: Complex64, gamma: f64, sample_energy: f64) -> f64 {
    let peak = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let amp = gamma * peak / gain.norm();
    amp * amp / sample_energy
}

/// Whether channel inversion with `gamma` respects `|x_i|^2 <= E_s`.
pub fn energy_check(g: &[f64], gain: Complex64, gamma: f64, sample_energy: f64) -> bool {
    energy_ratio(g, gain, gamma, sample_energy) <= 1.0 + ENERGY_TOL
}

/// `(sum digital + v) / divisor`.
pub fn reconstruct_global(
    ota: Option<&OtaAggregate>,
    digital_decoded: &[Vec<f64>],
    divisor: usize,
) -> Result<Vec<f64>, AirsimError> {
    let dim = match (ota, digital_decoded.first()) {
        (Some(agg), _) => agg.noisy_sum.len(),
        (None, Some(g)) => g.len(),
        (None, None) => return Err(AirsimError::NothingReceived),
    };
    let contributors = ota.map_or(0, |a| a.contributors) + digital_decoded.len();
    if divisor == 0 || divisor < contributors {
        return Err(AirsimError::Divisor {
            divisor,
            contributors,
        });
    }
    let mut sum = ota.map_or_else(|| vec![0.0; dim], |a| a.noisy_sum.clone());
    for g in digital_decoded {
        if g.len() != dim {
            return Err(AirsimError::LengthMismatch {
                expected: dim,
                found: g.len(),
            });
        }
        for (s, x) in sum.iter_mut().zip(g) {
            *s += x;
        }
    }
    let scale = 1.0 / divisor as f64;
    sum.iter_mut().for_each(|s| *s *= scale);
    Ok(sum)
}

/// `||g_true - g_hat||^2`.
pub fn empirical_mse(g_true: &[f64], g_hat: &[f64]) -> Result<f64, AirsimError> {
    if g_true.len() != g_hat.len() {
        return Err(AirsimError::LengthMismatch {
            expected: g_true.len(),
            found: g_hat.len(),
        });
    }
    Ok(g_true
        .iter()
        .zip(g_hat)
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}
