//! Wireless uplink model: log-distance path loss, Rayleigh block fading,
//! per-device SNR and airtime for analog (OTA) and digital transmissions.
//!
//! All quantities are linear (not dB) unless a name says otherwise.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("channel parameter `{name}` must be finite and strictly positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("distance {distance_m} m is below the reference distance {ref_distance_m} m")]
    BelowReference { distance_m: f64, ref_distance_m: f64 },
    #[error("average path loss must be finite and strictly positive, got {0}")]
    InvalidPathLoss(f64),
    #[error("zero SNR: the device cannot transmit digitally in finite time")]
    ZeroSnr,
}

/// Physical-layer constants shared by every device in a deployment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    /// System bandwidth B in Hz.
    pub bandwidth_hz: f64,
    /// Receiver noise power spectral density N0 in W/Hz.
    pub noise_density: f64,
    /// Per-sample transmit energy budget E_s in J.
    pub sample_energy: f64,
    pub carrier_freq_hz: f64,
    pub pathloss_exponent: f64,
    pub ref_distance_m: f64,
}

impl ChannelParams {
    pub fn new(
        bandwidth_hz: f64,
        noise_density: f64,
        sample_energy: f64,
        carrier_freq_hz: f64,
        pathloss_exponent: f64,
        ref_distance_m: f64,
    ) -> Result<Self, ChannelError> {
        let params = Self {
            bandwidth_hz,
            noise_density,
            sample_energy,
            carrier_freq_hz,
            pathloss_exponent,
            ref_distance_m,
        };
        params.validate()?;
        Ok(params)
    }

    /// Builds parameters from a transmit power budget, using one complex
    /// sample per second per hertz: `E_s = P_tx / B`.
    pub fn from_power_budget(
        bandwidth_hz: f64,
        tx_power_dbm: f64,
        noise_density_dbm_hz: f64,
        carrier_freq_hz: f64,
        pathloss_exponent: f64,
        ref_distance_m: f64,
    ) -> Result<Self, ChannelError> {
        let tx_power_w = dbm_to_watts(tx_power_dbm);
        Self::new(
            bandwidth_hz,
            dbm_to_watts(noise_density_dbm_hz),
            tx_power_w / bandwidth_hz,
            carrier_freq_hz,
            pathloss_exponent,
            ref_distance_m,
        )
    }

    /// 1 MHz at 2.4 GHz, 20 dBm, -174 dBm/Hz, exponent 2.2, 1 m reference.
    pub fn default_cell() -> Self {
        Self::from_power_budget(1e6, 20.0, -174.0, 2.4e9, 2.2, 1.0)
            .expect("default channel parameters are valid")
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        let fields = [
            ("bandwidth_hz", self.bandwidth_hz),
            ("noise_density", self.noise_density),
            ("sample_energy", self.sample_energy),
            ("carrier_freq_hz", self.carrier_freq_hz),
            ("pathloss_exponent", self.pathloss_exponent),
            ("ref_distance_m", self.ref_distance_m),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value > 0.0) {
                return Err(ChannelError::NonPositive { name, value });
            }
        }
        Ok(())
    }

    /// Free-space (Friis) power gain at the reference distance.
    pub fn reference_gain(&self) -> f64 {
        let amplitude = SPEED_OF_LIGHT / (4.0 * PI * self.carrier_freq_hz * self.ref_distance_m);
        amplitude * amplitude
    }
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0) * 1e-3
}

/// A device's channel for one round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelRealization {
    pub gain: Complex64,
    pub avg_path_loss: f64,
    pub distance_m: f64,
}

impl ChannelRealization {
    pub fn draw<R: Rng + ?Sized>(
        distance_m: f64,
        params: &ChannelParams,
        rng: &mut R,
    ) -> Result<Self, ChannelError> {
        let avg_path_loss = path_loss(distance_m, params)?;
        let gain = draw_fading(avg_path_loss, rng)?;
        Ok(Self {
            gain,
            avg_path_loss,
            distance_m,
        })
    }

    pub fn snr(&self, params: &ChannelParams) -> f64 {
        snr(self.gain, params)
    }
}

/// Average power gain `PL_ref * (d0 / d)^beta` of the log-distance model.
pub fn path_loss(distance_m: f64, params: &ChannelParams) -> Result<f64, ChannelError> {
    if !(distance_m >= params.ref_distance_m) {
        return Err(ChannelError::BelowReference {
            distance_m,
            ref_distance_m: params.ref_distance_m,
        });
    }
    let ratio = params.ref_distance_m / distance_m;
    Ok(params.reference_gain() * ratio.powf(params.pathloss_exponent))
}

/// Draws `h ~ CN(0, avg_path_loss)`. An exact zero is redrawn since channel
/// inversion divides by `h`.
pub fn draw_fading<R: Rng + ?Sized>(
    avg_path_loss: f64,
    rng: &mut R,
) -> Result<Complex64, ChannelError> {
    if !(avg_path_loss.is_finite() && avg_path_loss > 0.0) {
        return Err(ChannelError::InvalidPathLoss(avg_path_loss));
    }
    let scale = (avg_path_loss / 2.0).sqrt();
    loop {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        let h = Complex64::new(scale * re, scale * im);
        if h.norm_sqr() > 0.0 {
            return Ok(h);
        }
    }
}

/// `E_s |h|^2 / N0`.
pub fn snr(gain: Complex64, params: &ChannelParams) -> f64 {
    params.sample_energy * gain.norm_sqr() / params.noise_density
}

/// Shannon-rate airtime for a digital payload on its own resource block.
pub fn digital_tx_time(payload_bits: u64, snr: f64, bandwidth_hz: f64) -> Result<f64, ChannelError> {
    if !(snr > 0.0) {
        return Err(ChannelError::ZeroSnr);
    }
    Ok(payload_bits as f64 / shannon_rate(snr, bandwidth_hz))
}

/// `B log2(1 + snr)` in bit/s.
pub fn shannon_rate(snr: f64, bandwidth_hz: f64) -> f64 {
    bandwidth_hz * snr.ln_1p() / std::f64::consts::LN_2
}

/// Airtime of one analog superposition round: `d / B` regardless of how many
/// devices transmit.
pub fn ota_tx_time(dim: usize, bandwidth_hz: f64) -> f64 {
    dim as f64 / bandwidth_hz
}
