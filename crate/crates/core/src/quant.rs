//! Unbiased stochastic uniform quantization of gradients for digital uplinks.
//!
//! A gradient `g` is normalized by its infinity norm, each entry is rounded at
//! random to one of the two neighbouring points of a `2^bits`-level grid on
//! `[-1, 1]` so that the expected decoded value equals the input, and the norm
//! travels alongside the level indices as a 64-bit float.

use rand::Rng;
use thiserror::Error;

/// Bits spent on the infinity norm in every digital payload.
pub const NORM_BITS: u64 = 64;

/// Widest level index the encoder can represent.
pub const MAX_BITS: u32 = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("bit width must lie in 1..={MAX_BITS}, got {0}")]
    BitWidth(u32),
    #[error("gradient entry {index} is not finite ({value})")]
    NonFinite { index: usize, value: f64 },
    #[error("level index {index} at entry {entry} does not fit in {bits} bits")]
    IndexOutOfRange { entry: usize, index: u64, bits: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedGradient {
    bits: u32,
    inf_norm: f64,
    level_indices: Vec<u64>,
}

impl QuantizedGradient {
    pub fn from_parts(bits: u32, inf_norm: f64, level_indices: Vec<u64>) -> Result<Self, QuantError> {
        check_bits(bits)?;
        if !(inf_norm.is_finite() && inf_norm >= 0.0) {
            return Err(QuantError::NonFinite {
                index: 0,
                value: inf_norm,
            });
        }
        let top = top_index(bits);
        if let Some((entry, &index)) = level_indices.iter().enumerate().find(|(_, &i)| i > top) {
            return Err(QuantError::IndexOutOfRange { entry, index, bits });
        }
        Ok(Self {
            bits,
            inf_norm,
            level_indices,
        })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn inf_norm(&self) -> f64 {
        self.inf_norm
    }

    pub fn level_indices(&self) -> &[u64] {
        &self.level_indices
    }

    pub fn dim(&self) -> usize {
        self.level_indices.len()
    }

    pub fn payload_bits(&self) -> u64 {
        payload_bits(self.bits, self.dim())
    }
}

fn check_bits(bits: u32) -> Result<(), QuantError> {
    if (1..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(QuantError::BitWidth(bits))
    }
}

fn top_index(bits: u32) -> u64 {
    if bits == 64 {
        u64::MAX
    } else {
        (1u64 << bits) - 1
    }
}

/// Number of grid intervals, `2^bits - 1`.
fn steps(bits: u32) -> f64 {
    top_index(bits) as f64
}

/// Grid point `k` on `[-1, 1]`: `-1 + 2k / (2^bits - 1)`.
pub fn level(index: u64, bits: u32) -> f64 {
    let k = index as f64;
    let s = steps(bits);
    if index == top_index(bits) {
        1.0
    } else {
        -1.0 + 2.0 * k / s
    }
}

pub fn quantize<R: Rng + ?Sized>(
    g: &[f64],
    bits: u32,
    rng: &mut R,
) -> Result<QuantizedGradient, QuantError> {
    check_bits(bits)?;
    if let Some((index, &value)) = g.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(QuantError::NonFinite { index, value });
    }
    let inf_norm = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if inf_norm == 0.0 {
        return Ok(QuantizedGradient {
            bits,
            inf_norm,
            level_indices: vec![0; g.len()],
        });
    }
    let top = top_index(bits);
    let s = steps(bits);
    let level_indices = g
        .iter()
        .map(|&v| {
            let x = (v / inf_norm).clamp(-1.0, 1.0);
            let pos = (x + 1.0) * 0.5 * s;
            let lower = pos.floor();
            // pos can land on the top point (x = 1), which is its own upper neighbour
            let j = (lower as u64).min(top);
            if j == top {
                return top;
            }
            let p = pos - lower;
            if p > 0.0 && rng.gen::<f64>() < p {
                j + 1
            } else {
                j
            }
        })
        .collect();
    Ok(QuantizedGradient {
        bits,
        inf_norm,
        level_indices,
    })
}

pub fn dequantize(q: &QuantizedGradient) -> Vec<f64> {
    q.level_indices
        .iter()
        .map(|&k| q.inf_norm * level(k, q.bits))
        .collect()
}

/// Digital payload `64 + d * bits`.
pub fn payload_bits(bits: u32, dim: usize) -> u64 {
    NORM_BITS + dim as u64 * bits as u64
}

/// Per-entry worst-case quantization variance `(inf_norm / (2^bits - 1))^2`.
pub fn quant_mse_term(inf_norm: f64, bits: u32) -> f64 {
    // 2^bits - 1 stays exact in f64 far beyond MAX_BITS, and the bound is
    // also evaluated for relaxed allocations wider than the encoder supports.
    let steps = 2f64.powi(bits as i32) - 1.0;
    let r = inf_norm / steps;
    r * r
}
