//! Per-round analog/digital scheduling and digital bit allocation.
//!
//! For a fixed set of digital devices the bit allocation is relaxed to
//! continuous excess bits `r'_m >= 0` with the linearized objective
//! `sum d * norm_m^2 / (1 + 2 ln2 r'_m)^2` under the round delay budget, and
//! solved through its concave Lagrangian dual. Integer bits are recovered as
//! `floor(r'_m) + 1`. Device scheduling reduces to a linear search over the
//! `N + 1` configurations in which the `K` devices with the smallest
//! scheduling metric go digital.
//!
//! [`brute_force_schedule`] enumerates all `2^N` configurations and serves as
//! the test oracle for the linear search.

use crate::channel::{self, ChannelParams};
use crate::quant::{self, NORM_BITS};
use num_complex::Complex64;
use std::cmp::Ordering;
use std::f64::consts::LN_2;
use thiserror::Error;

/// Absolute slack, in seconds, tolerated on the round delay budget.
pub const FEASIBILITY_TOL: f64 = 1e-12;

/// Largest device count [`brute_force_schedule`] accepts.
pub const BRUTE_FORCE_MAX_DEVICES: usize = 12;

/// Relative tolerance under which two MSE bounds count as tied.
const TIE_REL_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchedError {
    #[error("scheduling metric is undefined for a zero gradient norm")]
    ZeroNorm,
    #[error("no OTA devices: the pre-scaler is undefined")]
    EmptyOtaSet,
    #[error("the digital device set is empty")]
    EmptyDigitalSet,
    #[error("OTA term requested with a zero pre-scaler")]
    ZeroPrescaler,
    #[error("digital device {0} has zero SNR and cannot be scheduled digitally")]
    ZeroSnr(usize),
    #[error("round budget {t_max} s is below the OTA airtime {ota_time} s")]
    BudgetBelowOta { t_max: f64, ota_time: f64 },
    #[error("no device to schedule")]
    NoDevices,
    #[error("brute force refuses {0} devices (limit {BRUTE_FORCE_MAX_DEVICES})")]
    TooManyDevices(usize),
    #[error("no feasible scheduling configuration")]
    Infeasible,
    #[error("flag vector has length {found}, expected {expected}")]
    LengthMismatch { expected: usize, found: usize },
}

/// What the parameter server knows about a device when it schedules a round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviceSnapshot {
    pub id: usize,
    pub gain: Complex64,
    pub snr: f64,
    pub grad_inf_norm: f64,
    /// `|gain| / grad_inf_norm`, `+inf` for a zero gradient.
    pub sm: f64,
}

impl DeviceSnapshot {
    pub fn new(id: usize, gain: Complex64, grad_inf_norm: f64, params: &ChannelParams) -> Self {
        let sm = scheduling_metric(gain, grad_inf_norm).unwrap_or(f64::INFINITY);
        Self {
            id,
            gain,
            snr: channel::snr(gain, params),
            grad_inf_norm,
            sm,
        }
    }

    /// Shannon rate of the device's resource block, bit/s.
    pub fn rate(&self, bandwidth_hz: f64) -> f64 {
        channel::shannon_rate(self.snr, bandwidth_hz)
    }
}

/// The outcome of scheduling one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleDecision {
    /// Per device (input order): transmits digitally.
    pub digital: Vec<bool>,
    /// At least one device uses OTA aggregation.
    pub ota: bool,
    /// Common OTA pre-scaler; 0 when `ota` is false.
    pub gamma: f64,
    /// Integer bit width per device, `Some` exactly for digital devices.
    pub bits: Vec<Option<u32>>,
    pub mse_bound: f64,
    pub latency_s: f64,
}

impl ScheduleDecision {
    pub fn digital_count(&self) -> usize {
        self.digital.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualBreakpoint {
    pub lambda_m: f64,
    pub device: usize,
}

pub fn scheduling_metric(gain: Complex64, grad_inf_norm: f64) -> Result<f64, SchedError> {
    if !(grad_inf_norm > 0.0) {
        return Err(SchedError::ZeroNorm);
    }
    Ok(gain.norm() / grad_inf_norm)
}

/// `sqrt(E_s) * min SM` over the OTA devices: the largest common scaling that
/// keeps every OTA device within its per-sample energy budget.
pub fn ota_prescaler<I>(ota_sms: I, sample_energy: f64) -> Result<f64, SchedError>
where
    I: IntoIterator<Item = f64>,
{
    let min_sm = ota_sms
        .into_iter()
        .fold(None, |acc: Option<f64>, sm| Some(acc.map_or(sm, |m| m.min(sm))))
        .ok_or(SchedError::EmptyOtaSet)?;
    Ok(sample_energy.sqrt() * min_sm)
}

/// Upper bound `d * (sum_digital (norm / (2^r - 1))^2 + c * N0 / gamma^2)` on
/// the squared error of the reconstructed gradient sum.
pub fn mse_bound<I>(
    digital: I,
    ota: bool,
    gamma: f64,
    noise_density: f64,
    dim: usize,
) -> Result<f64, SchedError>
where
    I: IntoIterator<Item = (f64, u32)>,
{
    let quant: f64 = digital
        .into_iter()
        .map(|(norm, bits)| quant::quant_mse_term(norm, bits))
        .sum();
    let ota_term = if ota {
        if gamma == 0.0 {
            return Err(SchedError::ZeroPrescaler);
        }
        noise_density / (gamma * gamma)
    } else {
        0.0
    };
    Ok(dim as f64 * (quant + ota_term))
}

/// `c * d / B + sum_digital payload / (B log2(1 + snr))`.
pub fn round_latency<I>(digital: I, ota: bool, dim: usize, bandwidth_hz: f64) -> Result<f64, SchedError>
where
    I: IntoIterator<Item = (u64, f64)>,
{
    let mut total = if ota {
        channel::ota_tx_time(dim, bandwidth_hz)
    } else {
        0.0
    };
    for (i, (payload, snr)) in digital.into_iter().enumerate() {
        total += channel::digital_tx_time(payload, snr, bandwidth_hz)
            .map_err(|_| SchedError::ZeroSnr(i))?;
    }
    Ok(total)
}

/// Dual breakpoint `4 ln2 norm^2 B log2(1 + snr)` above which the device
/// receives no excess bits.
pub fn lambda_threshold(grad_inf_norm: f64, snr: f64, bandwidth_hz: f64) -> f64 {
    4.0 * LN_2 * grad_inf_norm * grad_inf_norm * channel::shannon_rate(snr, bandwidth_hz)
}

/// `floor(r') + 1`.
pub fn integer_bits(r_prime: f64) -> u32 {
    debug_assert!(r_prime >= 0.0);
    let floor = r_prime.max(0.0).floor();
    if floor >= (u32::MAX - 1) as f64 {
        u32::MAX
    } else {
        floor as u32 + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedAllocation {
    /// Continuous excess bits, aligned with the digital set passed in.
    pub r_prime: Vec<f64>,
    pub lambda_star: f64,
    pub feasible: bool,
}

/// The relaxed bit allocation problem for a fixed digital set.
#[derive(Debug, Clone)]
pub struct RelaxedProblem {
    dim: f64,
    norms: Vec<f64>,
    rates: Vec<f64>,
    ota: bool,
    t_max: f64,
    bandwidth_hz: f64,
}

impl RelaxedProblem {
    pub fn new(
        digital: &[DeviceSnapshot],
        ota: bool,
        t_max: f64,
        dim: usize,
        bandwidth_hz: f64,
    ) -> Result<Self, SchedError> {
        if digital.is_empty() {
            return Err(SchedError::EmptyDigitalSet);
        }
        if let Some(dev) = digital.iter().find(|d| !(d.snr > 0.0)) {
            return Err(SchedError::ZeroSnr(dev.id));
        }
        Ok(Self {
            dim: dim as f64,
            norms: digital.iter().map(|d| d.grad_inf_norm).collect(),
            rates: digital.iter().map(|d| d.rate(bandwidth_hz)).collect(),
            ota,
            t_max,
            bandwidth_hz,
        })
    }

    pub fn len(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }

    /// Seconds left for excess bits once every device sends one bit per entry:
    /// `T_max - c d / B - sum (64 + d) / R_m`.
    pub fn slack_budget(&self) -> f64 {
        let ota_time = if self.ota {
            self.dim / self.bandwidth_hz
        } else {
            0.0
        };
        let base: f64 = self
            .rates
            .iter()
            .map(|r| (NORM_BITS as f64 + self.dim) / r)
            .sum();
        self.t_max - ota_time - base
    }

    /// Airtime per excess bit, `d / R_m`.
    fn bit_time(&self, m: usize) -> f64 {
        self.dim / self.rates[m]
    }

    pub fn lambda(&self, m: usize) -> f64 {
        4.0 * LN_2 * self.norms[m] * self.norms[m] * self.rates[m]
    }

    pub fn breakpoints(&self) -> Vec<DualBreakpoint> {
        (0..self.len())
            .map(|m| DualBreakpoint {
                lambda_m: self.lambda(m),
                device: m,
            })
            .collect()
    }

    /// Minimizer of the Lagrangian over `r' >= 0` for a given multiplier.
    pub fn r_star(&self, lambda: f64) -> Vec<f64> {
        (0..self.len())
            .map(|m| {
                let lm = self.lambda(m);
                if lm <= lambda {
                    0.0
                } else {
                    ((lm / lambda).cbrt() - 1.0) / (2.0 * LN_2)
                }
            })
            .collect()
    }

    /// Linearized quantization error `sum d norm^2 / (1 + 2 ln2 r')^2`.
    pub fn objective(&self, r_prime: &[f64]) -> f64 {
        self.norms
            .iter()
            .zip(r_prime)
            .map(|(n, r)| {
                let denom = 1.0 + 2.0 * LN_2 * r;
                self.dim * n * n / (denom * denom)
            })
            .sum()
    }

    /// Round latency under the relaxed payloads `64 + d + d r'`.
    pub fn relaxed_latency(&self, r_prime: &[f64]) -> f64 {
        let ota_time = if self.ota {
            self.dim / self.bandwidth_hz
        } else {
            0.0
        };
        // same accumulation order as `round_latency`, so flooring comparisons
        // are exact in floating point
        self.rates
            .iter()
            .zip(r_prime)
            .fold(ota_time, |acc, (rate, r)| acc + (NORM_BITS as f64 + self.dim + self.dim * r) / rate)
    }

    /// `sum d/R_m r'_m(lambda) - S`: the dual's derivative (envelope theorem).
    pub fn dual_slope(&self, lambda: f64) -> f64 {
        let r = self.r_star(lambda);
        self.excess_time(&r) - self.slack_budget()
    }

    fn excess_time(&self, r_prime: &[f64]) -> f64 {
        r_prime
            .iter()
            .enumerate()
            .map(|(m, r)| self.bit_time(m) * r)
            .sum()
    }

    /// Lagrangian dual `q(lambda)`.
    pub fn dual(&self, lambda: f64) -> f64 {
        let r = self.r_star(lambda);
        self.objective(&r) + lambda * (self.excess_time(&r) - self.slack_budget())
    }

    pub fn solve(&self) -> RelaxedAllocation {
        let k = self.len();
        let slack = self.slack_budget();
        let lambda_max = (0..k).map(|m| self.lambda(m)).fold(0.0, f64::max);
        if slack < -FEASIBILITY_TOL {
            return RelaxedAllocation {
                r_prime: vec![0.0; k],
                lambda_star: lambda_max,
                feasible: false,
            };
        }
        if slack <= 0.0 || lambda_max == 0.0 {
            // Either no room for excess bits, or every gradient is zero and the
            // objective is flat; the dual peaks at any lambda >= max lambda_m.
            return RelaxedAllocation {
                r_prime: vec![0.0; k],
                lambda_star: if lambda_max == 0.0 { 0.0 } else { lambda_max },
                feasible: true,
            };
        }

        let lambda_star = self
            .closed_form_multiplier(slack)
            .unwrap_or_else(|| self.bisect_multiplier(lambda_max));
        RelaxedAllocation {
            r_prime: self.r_star(lambda_star),
            lambda_star,
            feasible: true,
        }
    }

    /// Walks the intervals between sorted breakpoints. Inside an interval the
    /// active set is fixed and the stationarity condition solves in closed form.
    fn closed_form_multiplier(&self, slack: f64) -> Option<f64> {
        let mut order: Vec<usize> = (0..self.len()).filter(|&m| self.lambda(m) > 0.0).collect();
        order.sort_by(|&a, &b| self.lambda(b).total_cmp(&self.lambda(a)));

        let mut sum_t = 0.0;
        let mut sum_tl = 0.0;
        for (pos, &m) in order.iter().enumerate() {
            let t = self.bit_time(m);
            sum_t += t;
            sum_tl += t * self.lambda(m).cbrt();
            let upper = self.lambda(m);
            let lower = order.get(pos + 1).map_or(0.0, |&n| self.lambda(n));
            let candidate = (sum_tl / (2.0 * LN_2 * slack + sum_t)).powi(3);
            if candidate >= lower && candidate <= upper {
                return Some(candidate);
            }
        }
        None
    }

    fn bisect_multiplier(&self, lambda_max: f64) -> f64 {
        // dual_slope is continuous, decreasing, +inf at 0 and -S at lambda_max.
        let mut hi = lambda_max;
        let mut lo = lambda_max;
        while self.dual_slope(lo) <= 0.0 && lo > f64::MIN_POSITIVE {
            lo *= 0.5;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.dual_slope(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    }
}

/// Solves the relaxed bit allocation for a fixed digital set.
pub fn allocate_bits(
    digital: &[DeviceSnapshot],
    ota: bool,
    t_max: f64,
    dim: usize,
    bandwidth_hz: f64,
) -> Result<RelaxedAllocation, SchedError> {
    Ok(RelaxedProblem::new(digital, ota, t_max, dim, bandwidth_hz)?.solve())
}

/// How integer bit widths are chosen for a given digital set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitRule {
    /// `floor(r') + 1` from the relaxed allocation, as the scheduler does.
    FloorRelaxed,
    /// Exact minimum of the integer-bit MSE bound with widths in `1..=max_bits`.
    Exhaustive { max_bits: u32 },
}

/// Evaluates one scheduling configuration. `Ok(None)` when it cannot meet
/// the delay budget.
pub fn evaluate_configuration(
    devices: &[DeviceSnapshot],
    digital: &[bool],
    t_max: f64,
    dim: usize,
    params: &ChannelParams,
    rule: BitRule,
) -> Result<Option<ScheduleDecision>, SchedError> {
    if digital.len() != devices.len() {
        return Err(SchedError::LengthMismatch {
            expected: devices.len(),
            found: digital.len(),
        });
    }
    let n = devices.len();
    let digital_set: Vec<DeviceSnapshot> = devices
        .iter()
        .zip(digital)
        .filter(|(_, &b)| b)
        .map(|(d, _)| *d)
        .collect();
    if digital_set.iter().any(|d| !(d.snr > 0.0)) {
        return Ok(None);
    }
    let ota = digital_set.len() < n;
    let gamma = if ota {
        ota_prescaler(
            devices.iter().zip(digital).filter(|(_, &b)| !b).map(|(d, _)| d.sm),
            params.sample_energy,
        )?
    } else {
        0.0
    };

    let bits_for_set: Vec<u32> = if digital_set.is_empty() {
        Vec::new()
    } else {
        let found = match rule {
            BitRule::FloorRelaxed => floor_relaxed_bits(&digital_set, ota, t_max, dim, params),
            BitRule::Exhaustive { max_bits } => {
                exact_integer_bits(&digital_set, ota, t_max, dim, params.bandwidth_hz, max_bits)
            }
        };
        match found {
            Some(bits) => bits,
            None => return Ok(None),
        }
    };

    let latency = latency_of(&digital_set, &bits_for_set, ota, dim, params.bandwidth_hz);
    if latency > t_max + FEASIBILITY_TOL {
        return Ok(None);
    }
    let mse = if ota && gamma == 0.0 {
        f64::INFINITY
    } else {
        mse_bound(
            digital_set
                .iter()
                .zip(&bits_for_set)
                .map(|(d, &b)| (d.grad_inf_norm, b)),
            ota,
            gamma,
            params.noise_density,
            dim,
        )?
    };

    let mut bits = vec![None; n];
    let mut next = bits_for_set.iter();
    for (slot, &is_digital) in bits.iter_mut().zip(digital) {
        if is_digital {
            *slot = next.next().copied();
        }
    }
    Ok(Some(ScheduleDecision {
        digital: digital.to_vec(),
        ota,
        gamma,
        bits,
        mse_bound: mse,
        latency_s: latency,
    }))
}

fn latency_of(set: &[DeviceSnapshot], bits: &[u32], ota: bool, dim: usize, bandwidth_hz: f64) -> f64 {
    let mut total = if ota {
        channel::ota_tx_time(dim, bandwidth_hz)
    } else {
        0.0
    };
    for (d, &b) in set.iter().zip(bits) {
        total += quant::payload_bits(b, dim) as f64 / d.rate(bandwidth_hz);
    }
    total
}

fn floor_relaxed_bits(
    set: &[DeviceSnapshot],
    ota: bool,
    t_max: f64,
    dim: usize,
    params: &ChannelParams,
) -> Option<Vec<u32>> {
    let relaxed = allocate_bits(set, ota, t_max, dim, params.bandwidth_hz).ok()?;
    if !relaxed.feasible {
        return None;
    }
    let mut bits: Vec<u32> = relaxed.r_prime.iter().map(|&r| integer_bits(r)).collect();
    // Flooring cannot exceed the relaxed latency, but the relaxed solution
    // itself may overshoot T_max by rounding; shave bits until it fits.
    while latency_of(set, &bits, ota, dim, params.bandwidth_hz) > t_max + FEASIBILITY_TOL {
        let widest = (0..bits.len()).filter(|&m| bits[m] > 1).max_by_key(|&m| bits[m])?;
        bits[widest] -= 1;
    }
    Some(bits)
}

/// Exact integer minimizer of `sum norm_m^2 / (2^r_m - 1)^2` subject to the
/// delay budget, `r_m in 1..=max_bits`. Full enumeration for up to three
/// devices, depth-first branch and bound otherwise.
fn exact_integer_bits(
    set: &[DeviceSnapshot],
    ota: bool,
    t_max: f64,
    dim: usize,
    bandwidth_hz: f64,
    max_bits: u32,
) -> Option<Vec<u32>> {
    let max_bits = max_bits.max(1);
    let rates: Vec<f64> = set.iter().map(|d| d.rate(bandwidth_hz)).collect();
    let weights: Vec<f64> = set.iter().map(|d| d.grad_inf_norm * d.grad_inf_norm).collect();
    let cost: Vec<f64> = rates.iter().map(|r| dim as f64 / r).collect();
    let ota_time = if ota {
        channel::ota_tx_time(dim, bandwidth_hz)
    } else {
        0.0
    };
    let budget = t_max - ota_time - rates.iter().map(|r| NORM_BITS as f64 / r).sum::<f64>();
    let term = |m: usize, b: u32| weights[m] * quant::quant_mse_term(1.0, b);

    if set.len() <= 3 {
        let mut best: Option<(f64, Vec<u32>)> = None;
        let k = set.len();
        let mut bits = vec![1u32; k];
        loop {
            let time: f64 = (0..k).map(|m| cost[m] * bits[m] as f64).sum();
            if time <= budget + FEASIBILITY_TOL {
                let obj: f64 = (0..k).map(|m| term(m, bits[m])).sum();
                if best.as_ref().map_or(true, |(b, _)| obj < *b) {
                    best = Some((obj, bits.clone()));
                }
            }
            // odometer increment
            let mut pos = 0;
            loop {
                if pos == k {
                    return best.map(|(_, b)| b);
                }
                if bits[pos] < max_bits {
                    bits[pos] += 1;
                    break;
                }
                bits[pos] = 1;
                pos += 1;
            }
        }
    }

    let min_time: f64 = cost.iter().sum();
    if min_time > budget + FEASIBILITY_TOL {
        return None;
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]));

    struct Search<'a> {
        order: &'a [usize],
        cost: &'a [f64],
        max_bits: u32,
        term: &'a dyn Fn(usize, u32) -> f64,
        best_obj: f64,
        best_bits: Vec<u32>,
        bits: Vec<u32>,
    }

    impl Search<'_> {
        /// Widest affordable width for device `m` given `spare` seconds beyond
        /// the one-bit reservation.
        fn widest(&self, m: usize, spare: f64) -> u32 {
            let extra = ((spare + FEASIBILITY_TOL) / self.cost[m]).floor();
            if extra >= (self.max_bits - 1) as f64 {
                self.max_bits
            } else {
                1 + extra.max(0.0) as u32
            }
        }

        fn bound(&self, from: usize, spare: f64) -> f64 {
            self.order[from..]
                .iter()
                .map(|&m| (self.term)(m, self.widest(m, spare)))
                .sum()
        }

        fn run(&mut self, pos: usize, spare: f64, obj: f64) {
            let m = self.order[pos];
            let widest = self.widest(m, spare);
            if pos + 1 == self.order.len() {
                let total = obj + (self.term)(m, widest);
                if total < self.best_obj {
                    self.best_obj = total;
                    self.bits[m] = widest;
                    self.best_bits = self.bits.clone();
                }
                return;
            }
            for b in (1..=widest).rev() {
                let used = self.cost[m] * (b - 1) as f64;
                let here = obj + (self.term)(m, b);
                let rest_spare = spare - used;
                if here + self.bound(pos + 1, rest_spare) >= self.best_obj {
                    // narrower widths only increase this device's term and
                    // leave the rest's bound unchanged or lower; keep going
                    // while the bound can still improve
                    if here >= self.best_obj {
                        break;
                    }
                    continue;
                }
                self.bits[m] = b;
                self.run(pos + 1, rest_spare, here);
            }
        }
    }

    // incumbent: the scheduler's own rounding of the relaxed solution, clipped
    let mut search = Search {
        order: &order,
        cost: &cost,
        max_bits,
        term: &term,
        best_obj: f64::INFINITY,
        best_bits: vec![1; set.len()],
        bits: vec![1; set.len()],
    };
    if let Ok(relaxed) = allocate_bits(set, ota, t_max, dim, bandwidth_hz) {
        if relaxed.feasible {
            let mut guess: Vec<u32> = relaxed
                .r_prime
                .iter()
                .map(|&r| integer_bits(r).min(max_bits))
                .collect();
            while (0..guess.len()).map(|m| cost[m] * guess[m] as f64).sum::<f64>()
                > budget + FEASIBILITY_TOL
            {
                match (0..guess.len()).filter(|&m| guess[m] > 1).max_by_key(|&m| guess[m]) {
                    Some(w) => guess[w] -= 1,
                    None => break,
                }
            }
            if (0..guess.len()).map(|m| cost[m] * guess[m] as f64).sum::<f64>()
                <= budget + FEASIBILITY_TOL
            {
                // nudge the incumbent up so the search can still match it exactly
                search.best_obj = (0..guess.len()).map(|m| term(m, guess[m])).sum::<f64>()
                    * (1.0 + 1e-12)
                    + f64::MIN_POSITIVE;
                search.best_bits = guess;
            }
        }
    }
    search.run(0, budget - min_time, 0.0);
    Some(search.best_bits)
}

/// True when `a` should be preferred over `b`: smaller MSE bound, then
/// smaller latency, then fewer digital devices.
fn prefer(a: &ScheduleDecision, b: &ScheduleDecision) -> bool {
    let scale = a.mse_bound.abs().max(b.mse_bound.abs());
    let diff = a.mse_bound - b.mse_bound;
    if a.mse_bound.is_finite() && b.mse_bound.is_finite() && diff.abs() > TIE_REL_TOL * scale {
        return diff < 0.0;
    }
    if !(a.mse_bound.is_finite() && b.mse_bound.is_finite()) && a.mse_bound != b.mse_bound {
        return a.mse_bound < b.mse_bound;
    }
    match a.latency_s.partial_cmp(&b.latency_s) {
        Some(Ordering::Less) => true,
        Some(Ordering::Greater) => false,
        _ => a.digital_count() < b.digital_count(),
    }
}

fn check_budget(t_max: f64, dim: usize, bandwidth_hz: f64) -> Result<(), SchedError> {
    let ota_time = channel::ota_tx_time(dim, bandwidth_hz);
    if !(t_max >= ota_time - FEASIBILITY_TOL) {
        return Err(SchedError::BudgetBelowOta { t_max, ota_time });
    }
    Ok(())
}

/// Device indices sorted by nondecreasing scheduling metric (ties by index).
pub fn sm_order(devices: &[DeviceSnapshot]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..devices.len()).collect();
    order.sort_by(|&a, &b| devices[a].sm.total_cmp(&devices[b].sm).then(a.cmp(&b)));
    order
}

/// Linear search over the `N + 1` SM-prefix configurations.
///
/// Devices with a zero gradient (infinite metric) are never made digital.
pub fn optimize_schedule(
    devices: &[DeviceSnapshot],
    t_max: f64,
    dim: usize,
    params: &ChannelParams,
) -> Result<ScheduleDecision, SchedError> {
    if devices.is_empty() {
        return Err(SchedError::NoDevices);
    }
    check_budget(t_max, dim, params.bandwidth_hz)?;
    let order = sm_order(devices);
    let max_digital = devices.iter().filter(|d| d.sm.is_finite()).count();

    let mut best: Option<ScheduleDecision> = None;
    let mut digital = vec![false; devices.len()];
    for k in 0..=max_digital {
        if k > 0 {
            digital[order[k - 1]] = true;
        }
        let Some(decision) =
            evaluate_configuration(devices, &digital, t_max, dim, params, BitRule::FloorRelaxed)?
        else {
            continue;
        };
        if best.as_ref().map_or(true, |b| prefer(&decision, b)) {
            best = Some(decision);
        }
    }
    best.ok_or(SchedError::Infeasible)
}

/// Exhaustive search over all `2^N` digital/OTA assignments.
pub fn brute_force_schedule(
    devices: &[DeviceSnapshot],
    t_max: f64,
    dim: usize,
    params: &ChannelParams,
    rule: BitRule,
) -> Result<ScheduleDecision, SchedError> {
    let n = devices.len();
    if n == 0 {
        return Err(SchedError::NoDevices);
    }
    if n > BRUTE_FORCE_MAX_DEVICES {
        return Err(SchedError::TooManyDevices(n));
    }
    check_budget(t_max, dim, params.bandwidth_hz)?;
    let mut best: Option<ScheduleDecision> = None;
    for mask in 0u32..(1 << n) {
        let digital: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
        if let Some(decision) = evaluate_configuration(devices, &digital, t_max, dim, params, rule)? {
            if best.as_ref().map_or(true, |b| prefer(&decision, b)) {
                best = Some(decision);
            }
        }
    }
    best.ok_or(SchedError::Infeasible)
}

/// Whether the digital devices of `digital` are exactly a prefix of the SM
/// order, allowing any arrangement among devices with equal metric.
pub fn is_sm_prefix(devices: &[DeviceSnapshot], digital: &[bool]) -> bool {
    let max_digital = devices
        .iter()
        .zip(digital)
        .filter(|(_, &b)| b)
        .map(|(d, _)| d.sm)
        .fold(f64::NEG_INFINITY, f64::max);
    let min_ota = devices
        .iter()
        .zip(digital)
        .filter(|(_, &b)| !b)
        .map(|(d, _)| d.sm)
        .fold(f64::INFINITY, f64::min);
    max_digital <= min_ota
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params() -> ChannelParams {
        ChannelParams::default_cell()
    }

    /// A device whose resource block carries `spectral_eff` bit/s/Hz.
    fn device(id: usize, spectral_eff: f64, norm: f64, p: &ChannelParams) -> DeviceSnapshot {
        let snr = 2f64.powf(spectral_eff) - 1.0;
        let gain = Complex64::new((snr * p.noise_density / p.sample_energy).sqrt(), 0.0);
        DeviceSnapshot::new(id, gain, norm, p)
    }

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
    }

    #[test]
    fn scheduling_metric_values() {
        assert_eq!(scheduling_metric(Complex64::new(1.0, 0.0), 1.0).unwrap(), 1.0);
        assert_eq!(scheduling_metric(Complex64::new(0.0, 0.5), 2.0).unwrap(), 0.25);
        let h = Complex64::new(0.3, -0.4);
        let a = scheduling_metric(h, 0.7).unwrap();
        assert!(close(scheduling_metric(h, 0.7 * 3.0).unwrap(), a / 3.0, 1e-15));
        assert_eq!(scheduling_metric(h, 0.0), Err(SchedError::ZeroNorm));
    }

    #[test]
    fn prescaler_takes_min() {
        assert_eq!(ota_prescaler([2.0, 3.0], 1.0).unwrap(), 2.0);
        assert_eq!(ota_prescaler([5.0], 4.0).unwrap(), 10.0);
        assert_eq!(ota_prescaler([2.0, 3.0, 9.0], 1.0).unwrap(), 2.0);
        assert_eq!(ota_prescaler([], 1.0), Err(SchedError::EmptyOtaSet));
    }

    #[test]
    fn mse_bound_cases() {
        // all OTA
        assert_eq!(mse_bound([], true, 2.0, 8.0, 5).unwrap(), 5.0 * 2.0);
        // all digital: no OTA term regardless of gamma
        assert_eq!(mse_bound([(1.0, 1), (7.0, 3)], false, 0.0, 8.0, 3).unwrap(), 6.0);
        // d = 2, one digital device (norm 1, r 1) plus N0 / gamma^2 = 3
        let gamma = (1.0f64 / 3.0).sqrt();
        assert!(close(mse_bound([(1.0, 1)], true, gamma, 1.0, 2).unwrap(), 8.0, 1e-12));
        assert_eq!(mse_bound([], true, 0.0, 1.0, 2), Err(SchedError::ZeroPrescaler));
    }

    #[test]
    fn latency_cases() {
        assert!(close(round_latency([], true, 7850, 1e6).unwrap(), 7.85e-3, 1e-12));
        assert_eq!(round_latency([(84, 1.0)], true, 10, 1.0).unwrap(), 94.0);
        assert_eq!(round_latency([(84, 0.0)], true, 10, 1.0), Err(SchedError::ZeroSnr(0)));
    }

    #[test]
    fn lambda_threshold_values() {
        assert!(close(lambda_threshold(1.0, 1.0, 1.0), 2.772588722239781, 1e-12));
        assert!(close(lambda_threshold(2.0, 5.0, 3.0), 4.0 * lambda_threshold(1.0, 5.0, 3.0), 1e-12));
        assert_eq!(lambda_threshold(1.0, 0.0, 1.0), 0.0);
    }

    #[test]
    fn integer_bits_values() {
        assert_eq!(integer_bits(0.0), 1);
        assert_eq!(integer_bits(14.47), 15);
        assert_eq!(integer_bits(3.0), 4);
    }

    #[test]
    fn single_device_fills_budget() {
        let p = params();
        let dev = device(0, 10.0, 1.0, &p);
        let alloc = allocate_bits(&[dev], true, 0.02, 7850, p.bandwidth_hz).unwrap();
        assert!(alloc.feasible);
        let expected = (1e7 * (0.02 - 0.00785) - 64.0 - 7850.0) / 7850.0;
        assert!(close(alloc.r_prime[0], expected, 1e-9), "{:?}", alloc);
        assert!(close(expected, 14.469554140127391, 1e-12));
        assert_eq!(integer_bits(alloc.r_prime[0]), 15);
    }

    #[test]
    fn exact_budget_gives_zero_excess() {
        let p = params();
        let devs = [device(0, 4.0, 1.0, &p), device(1, 6.0, 2.0, &p)];
        let t_max = 7850.0 / 1e6 + (64.0 + 7850.0) / 4e6 + (64.0 + 7850.0) / 6e6;
        let alloc = allocate_bits(&devs, true, t_max, 7850, p.bandwidth_hz).unwrap();
        assert!(alloc.feasible);
        assert!(alloc.r_prime.iter().all(|&r| r.abs() < 1e-6), "{:?}", alloc);
        let short = allocate_bits(&devs, true, t_max - 1e-6, 7850, p.bandwidth_hz).unwrap();
        assert!(!short.feasible);
    }

    #[test]
    fn allocate_rejects_empty_set() {
        assert_eq!(
            allocate_bits(&[], true, 1.0, 10, 1.0),
            Err(SchedError::EmptyDigitalSet)
        );
    }

    #[test]
    fn nonpositive_budget_is_infeasible() {
        let p = params();
        let dev = device(0, 3.0, 1.0, &p);
        assert!(!allocate_bits(&[dev], false, 0.0, 16, p.bandwidth_hz).unwrap().feasible);
        assert!(!allocate_bits(&[dev], false, -1.0, 16, p.bandwidth_hz).unwrap().feasible);
    }

    #[test]
    fn complementary_slackness() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = params();
        for _ in 0..300 {
            let k = rng.gen_range(1..=6);
            let dim = rng.gen_range(4..200);
            let devs: Vec<_> = (0..k)
                .map(|i| device(i, rng.gen_range(0.5..14.0), rng.gen_range(0.01..10.0), &p))
                .collect();
            let problem = RelaxedProblem::new(&devs, rng.gen(), 1.0, dim, p.bandwidth_hz).unwrap();
            let t_max = problem.relaxed_latency(&vec![0.0; k]) + rng.gen_range(0.0..5.0) * dim as f64 / 1e6;
            let problem = RelaxedProblem { t_max, ..problem };
            let alloc = problem.solve();
            assert!(alloc.feasible);
            if alloc.r_prime.iter().any(|&r| r > 0.0) {
                let lat = problem.relaxed_latency(&alloc.r_prime);
                assert!(close(lat, t_max, 1e-9), "{lat} vs {t_max}");
                assert!(alloc.lambda_star > 0.0);
            }
        }
    }

    #[test]
    fn flooring_never_exceeds_relaxed_latency() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            let r: f64 = rng.gen_range(0.0..60.0);
            let d: u64 = rng.gen_range(1..10_000);
            let int_payload = NORM_BITS + d * integer_bits(r) as u64;
            let relaxed_payload = NORM_BITS as f64 + d as f64 + d as f64 * r;
            assert!(int_payload as f64 <= relaxed_payload);
        }
    }

    #[test]
    fn budget_equal_to_ota_time_forces_all_ota() {
        let p = params();
        let devs: Vec<_> = (0..4).map(|i| device(i, 2.0 + i as f64, 1.0 + i as f64, &p)).collect();
        let dim = 100;
        let decision = optimize_schedule(&devs, dim as f64 / p.bandwidth_hz, dim, &p).unwrap();
        assert_eq!(decision.digital_count(), 0);
        assert!(decision.ota);
        assert!(decision.bits.iter().all(Option::is_none));
    }

    #[test]
    fn budget_below_ota_time_is_rejected() {
        let p = params();
        let devs = [device(0, 3.0, 1.0, &p)];
        assert!(matches!(
            optimize_schedule(&devs, 0.5e-4, 100, &p),
            Err(SchedError::BudgetBelowOta { .. })
        ));
    }

    #[test]
    fn single_device_picks_better_option() {
        let p = params();
        let dev = device(0, 12.0, 1.0, &p);
        let dim = 50;
        let t_max = 4.0 * dim as f64 / p.bandwidth_hz;
        let decision = optimize_schedule(&[dev], t_max, dim, &p).unwrap();
        let all_ota = evaluate_configuration(&[dev], &[false], t_max, dim, &p, BitRule::FloorRelaxed)
            .unwrap()
            .unwrap();
        let all_digital = evaluate_configuration(&[dev], &[true], t_max, dim, &p, BitRule::FloorRelaxed)
            .unwrap()
            .unwrap();
        assert!(!all_digital.ota);
        assert_eq!(all_digital.gamma, 0.0);
        assert_eq!(decision.mse_bound, all_ota.mse_bound.min(all_digital.mse_bound));
    }

    #[test]
    fn decision_invariants_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let p = params();
        for _ in 0..200 {
            let n = rng.gen_range(1..10);
            let dim = rng.gen_range(8..300);
            let devs: Vec<_> = (0..n)
                .map(|i| device(i, rng.gen_range(0.2..15.0), rng.gen_range(0.01..5.0), &p))
                .collect();
            let t_max = dim as f64 / p.bandwidth_hz * rng.gen_range(1.0..6.0);
            let dec = optimize_schedule(&devs, t_max, dim, &p).unwrap();
            assert!(dec.latency_s <= t_max + FEASIBILITY_TOL);
            assert_eq!(dec.ota, dec.digital_count() < n);
            for (flag, bits) in dec.digital.iter().zip(&dec.bits) {
                assert_eq!(*flag, bits.is_some());
                assert!(bits.map_or(true, |b| b >= 1));
            }
            if dec.ota {
                let expected = ota_prescaler(
                    devs.iter().zip(&dec.digital).filter(|(_, &b)| !b).map(|(d, _)| d.sm),
                    p.sample_energy,
                )
                .unwrap();
                assert_eq!(dec.gamma, expected);
            } else {
                assert_eq!(dec.gamma, 0.0);
            }
            assert!(is_sm_prefix(&devs, &dec.digital));
        }
    }

    #[test]
    fn zero_gradient_device_stays_ota() {
        let p = params();
        let devs = [device(0, 1.0, 5.0, &p), device(1, 0.3, 0.0, &p), device(2, 8.0, 1.0, &p)];
        let dim = 20;
        let dec = optimize_schedule(&devs, 10.0 * dim as f64 / 1e6, dim, &p).unwrap();
        assert!(!dec.digital[1]);
        assert!(devs[1].sm.is_infinite());
    }

    #[test]
    fn larger_budget_never_hurts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = params();
        for _ in 0..100 {
            let n = rng.gen_range(1..8);
            let dim = rng.gen_range(8..64);
            let devs: Vec<_> = (0..n)
                .map(|i| device(i, rng.gen_range(0.2..15.0), rng.gen_range(0.01..5.0), &p))
                .collect();
            let tau = dim as f64 / p.bandwidth_hz;
            let mut prev = f64::INFINITY;
            for step in 0..12 {
                let t_max = tau * (1.0 + 0.5 * step as f64);
                let dec = optimize_schedule(&devs, t_max, dim, &p).unwrap();
                assert!(dec.mse_bound <= prev * (1.0 + 1e-12));
                prev = dec.mse_bound;
            }
        }
    }

    #[test]
    fn moving_high_sm_digital_device_to_ota_keeps_gamma() {
        // exchange step: digital device 2 has SM above the OTA minimum (device 0)
        let p = params();
        let devs = [device(0, 3.0, 2.0, &p), device(1, 9.0, 1.0, &p), device(2, 11.0, 0.5, &p)];
        assert!(devs[2].sm > devs[0].sm);
        let dim = 16;
        let t_max = 6.0 * dim as f64 / 1e6;
        let rule = BitRule::Exhaustive { max_bits: 6 };
        let before = evaluate_configuration(&devs, &[false, false, true], t_max, dim, &p, rule)
            .unwrap()
            .unwrap();
        let after = evaluate_configuration(&devs, &[false, false, false], t_max, dim, &p, rule)
            .unwrap()
            .unwrap();
        assert_eq!(before.gamma, after.gamma);
        assert!(after.mse_bound < before.mse_bound);
        assert!(after.latency_s < before.latency_s);
    }

    #[test]
    fn exhaustive_matches_enumeration_beyond_three_devices() {
        // branch and bound against a plain odometer over all widths
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = params();
        for _ in 0..30 {
            let k = rng.gen_range(4..=5);
            let dim = rng.gen_range(8..40);
            let max_bits = 6;
            let devs: Vec<_> = (0..k)
                .map(|i| device(i, rng.gen_range(0.5..8.0), rng.gen_range(0.1..4.0), &p))
                .collect();
            let tau = dim as f64 / p.bandwidth_hz;
            let t_max = tau * rng.gen_range(1.5..12.0);
            let got = exact_integer_bits(&devs, false, t_max, dim, p.bandwidth_hz, max_bits);

            let rates: Vec<f64> = devs.iter().map(|d| d.rate(p.bandwidth_hz)).collect();
            let mut best: Option<f64> = None;
            let mut bits = vec![1u32; k];
            'outer: loop {
                let lat: f64 = (0..k)
                    .map(|m| quant::payload_bits(bits[m], dim) as f64 / rates[m])
                    .sum();
                if lat <= t_max + FEASIBILITY_TOL {
                    let obj: f64 = (0..k)
                        .map(|m| quant::quant_mse_term(devs[m].grad_inf_norm, bits[m]))
                        .sum();
                    best = Some(best.map_or(obj, |b: f64| b.min(obj)));
                }
                let mut pos = 0;
                loop {
                    if pos == k {
                        break 'outer;
                    }
                    if bits[pos] < max_bits {
                        bits[pos] += 1;
                        break;
                    }
                    bits[pos] = 1;
                    pos += 1;
                }
            }
            match (got, best) {
                (None, None) => {}
                (Some(bits), Some(best)) => {
                    let obj: f64 = (0..k)
                        .map(|m| quant::quant_mse_term(devs[m].grad_inf_norm, bits[m]))
                        .sum();
                    assert!(close(obj, best, 1e-12), "{obj} vs {best}");
                }
                other => panic!("feasibility disagreement: {other:?}"),
            }
        }
    }

    #[test]
    fn brute_force_refuses_large_instances() {
        let p = params();
        let devs: Vec<_> = (0..13).map(|i| device(i, 3.0, 1.0, &p)).collect();
        assert_eq!(
            brute_force_schedule(&devs, 1.0, 10, &p, BitRule::FloorRelaxed),
            Err(SchedError::TooManyDevices(13))
        );
    }

    #[test]
    fn symmetric_devices_agree_with_oracle() {
        let p = params();
        let devs: Vec<_> = (0..5).map(|i| device(i, 6.0, 1.5, &p)).collect();
        let dim = 24;
        let t_max = 3.0 * dim as f64 / 1e6;
        let fast = optimize_schedule(&devs, t_max, dim, &p).unwrap();
        let slow = brute_force_schedule(&devs, t_max, dim, &p, BitRule::FloorRelaxed).unwrap();
        assert!(close(fast.mse_bound, slow.mse_bound, 1e-9));
    }
}
