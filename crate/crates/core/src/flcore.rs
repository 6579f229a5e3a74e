//! Federated training over the simulated uplink.
//!
//! The learner is multinomial logistic regression (a single softmax layer)
//! with an L2 penalty. Each round every device computes a mini-batch gradient
//! at the current model, the chosen policy decides who transmits and how, the
//! server reconstructs the average gradient from what it received and takes
//! one SGD step.

use crate::airsim::{self, OtaAggregate};
use crate::channel::{self, ChannelError, ChannelParams};
use crate::data::LabeledDataset;
use crate::quant::{self, QuantError};
use crate::sched::{self, DeviceSnapshot, SchedError};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Upper bound on rounds in a single training run.
pub const MAX_ROUNDS: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("sample has {found} features, model expects {expected}")]
    FeatureMismatch { expected: usize, found: usize },
    #[error("label {label} outside 0..{classes}")]
    Label { label: usize, classes: usize },
    #[error("partition needs {needed} samples but only {available} are available")]
    InsufficientData { needed: usize, available: usize },
    #[error("cannot partition: {0}")]
    Partition(String),
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error("device {0} holds no data")]
    EmptyDevice(usize),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Sched(#[from] SchedError),
    #[error(transparent)]
    Airsim(#[from] airsim::AirsimError),
}

/// A feature vector with its trailing bias coordinate, and its label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub label: usize,
}

/// Appends the constant bias coordinate to every row.
pub fn with_bias(ds: &LabeledDataset) -> Vec<Sample> {
    ds.features
        .iter()
        .zip(&ds.labels)
        .map(|(f, &label)| {
            let mut x = Vec::with_capacity(f.len() + 1);
            x.extend_from_slice(f);
            x.push(1.0);
            Sample { x, label }
        })
        .collect()
}

/// `classes` stacked parameter blocks, one per class, each of `width`
/// entries (features plus bias).
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    theta: Vec<f64>,
    classes: usize,
    width: usize,
}

impl Model {
    pub fn zeros(classes: usize, width: usize) -> Self {
        Self {
            theta: vec![0.0; classes * width],
            classes,
            width,
        }
    }

    pub fn from_theta(theta: Vec<f64>, classes: usize, width: usize) -> Result<Self, TrainError> {
        if theta.len() != classes * width {
            return Err(TrainError::Invalid(format!(
                "theta has {} entries, expected {classes} x {width}",
                theta.len()
            )));
        }
        Ok(Self {
            theta,
            classes,
            width,
        })
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn width(&self) -> usize {
        self.width
    }

    fn block(&self, c: usize) -> &[f64] {
        &self.theta[c * self.width..(c + 1) * self.width]
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.classes).map(|c| dot(self.block(c), x)).collect()
    }

    /// Most likely class; ties go to the lowest index.
    pub fn predict(&self, x: &[f64]) -> usize {
        let logits = self.logits(x);
        let mut best = 0;
        for (c, &z) in logits.iter().enumerate().skip(1) {
            if z > logits[best] {
                best = c;
            }
        }
        best
    }

    fn check(&self, s: &Sample) -> Result<(), TrainError> {
        if s.x.len() != self.width {
            return Err(TrainError::FeatureMismatch {
                expected: self.width,
                found: s.x.len(),
            });
        }
        if s.label >= self.classes {
            return Err(TrainError::Label {
                label: s.label,
                classes: self.classes,
            });
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m: f64, x| m.max(x.abs()))
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Mean regularized cross-entropy over the batch and its exact gradient.
pub fn loss_and_gradient(
    model: &Model,
    batch: &[&Sample],
    reg_coeff: f64,
) -> Result<(f64, Vec<f64>), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let width = model.width;
    let mut grad = vec![0.0; model.dim()];
    let mut data_loss = 0.0;
    let mut probs = vec![0.0; model.classes];
    for s in batch {
        model.check(s)?;
        let logits = model.logits(&s.x);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (p, z) in probs.iter_mut().zip(&logits) {
            *p = (z - max).exp();
            total += *p;
        }
        data_loss += max + total.ln() - logits[s.label];
        for (c, p) in probs.iter().enumerate() {
            let coef = p / total - if c == s.label { 1.0 } else { 0.0 };
            if coef != 0.0 {
                for (g, x) in grad[c * width..(c + 1) * width].iter_mut().zip(&s.x) {
                    *g += coef * x;
                }
            }
        }
    }
    let n = batch.len() as f64;
    let sq_norm: f64 = model.theta.iter().map(|t| t * t).sum();
    for (g, t) in grad.iter_mut().zip(&model.theta) {
        *g = *g / n + reg_coeff * t;
    }
    Ok((data_loss / n + 0.5 * reg_coeff * sq_norm, grad))
}

/// `theta - stepsize * g_hat`.
pub fn sgd_step(model: &Model, g_hat: &[f64], stepsize: f64) -> Model {
    let theta = model
        .theta
        .iter()
        .zip(g_hat)
        .map(|(t, g)| t - stepsize * g)
        .collect();
    Model {
        theta,
        classes: model.classes,
        width: model.width,
    }
}

/// Fraction of `test` the model labels correctly.
pub fn evaluate(model: &Model, test: &[Sample]) -> f64 {
    if test.is_empty() {
        return 0.0;
    }
    let correct = test
        .iter()
        .filter(|s| model.predict(&s.x) == s.label)
        .count();
    correct as f64 / test.len() as f64
}

/// Disjoint shards of `per_device` samples drawn without replacement.
pub fn partition_iid<R: Rng + ?Sized>(
    samples: &[Sample],
    devices: usize,
    per_device: usize,
    rng: &mut R,
) -> Result<Vec<Vec<Sample>>, TrainError> {
    let needed = devices * per_device;
    if needed > samples.len() {
        return Err(TrainError::InsufficientData {
            needed,
            available: samples.len(),
        });
    }
    let picked = index::sample(rng, samples.len(), needed).into_vec();
    Ok(picked
        .chunks(per_device.max(1))
        .take(devices)
        .map(|chunk| chunk.iter().map(|&i| samples[i].clone()).collect())
        .collect())
}

/// Gives every device `labels_per_device` distinct labels, each label shared
/// by at most `ceil(devices * labels_per_device / classes)` devices, and
/// splits every label's samples evenly among the devices holding it.
pub fn partition_noniid<R: Rng + ?Sized>(
    samples: &[Sample],
    devices: usize,
    labels_per_device: usize,
    classes: usize,
    rng: &mut R,
) -> Result<Vec<Vec<Sample>>, TrainError> {
    if labels_per_device == 0 || labels_per_device > classes {
        return Err(TrainError::Partition(format!(
            "{labels_per_device} labels per device with {classes} classes"
        )));
    }
    let slots_needed = devices * labels_per_device;
    let cap = slots_needed.div_ceil(classes);
    let mut slots: Vec<usize> = (0..classes).flat_map(|c| std::iter::repeat(c).take(cap)).collect();

    let mut assignment = None;
    for _ in 0..10_000 {
        slots.shuffle(rng);
        let labels: Vec<Vec<usize>> = slots[..slots_needed]
            .chunks(labels_per_device)
            .map(<[usize]>::to_vec)
            .collect();
        let distinct = labels.iter().all(|ls| {
            let mut sorted = ls.clone();
            sorted.sort_unstable();
            sorted.windows(2).all(|w| w[0] != w[1])
        });
        if distinct {
            assignment = Some(labels);
            break;
        }
    }
    let assignment = assignment.ok_or_else(|| {
        TrainError::Partition(format!(
            "no label assignment found for {devices} devices x {labels_per_device} labels"
        ))
    })?;

    let mut holders: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (dev, labels) in assignment.iter().enumerate() {
        for &l in labels {
            holders[l].push(dev);
        }
    }
    let mut shards: Vec<Vec<Sample>> = vec![Vec::new(); devices];
    for (class, devs) in holders.iter().enumerate() {
        if devs.is_empty() {
            continue;
        }
        let mut members: Vec<&Sample> = samples.iter().filter(|s| s.label == class).collect();
        members.shuffle(rng);
        let k = devs.len();
        let base = members.len() / k;
        let extra = members.len() % k;
        let mut start = 0;
        for (j, &dev) in devs.iter().enumerate() {
            let take = base + usize::from(j < extra);
            shards[dev].extend(members[start..start + take].iter().map(|&s| s.clone()));
            start += take;
        }
    }
    if let Some(dev) = shards.iter().position(Vec::is_empty) {
        return Err(TrainError::EmptyDevice(dev));
    }
    Ok(shards)
}

/// Sampling weights `sqrt(rho) ||g_m|| / ((1 - rho) T_m)`, normalized.
/// All-zero weights fall back to uniform.
pub fn digital_prob_weights(grad_norms: &[f64], tx_times: &[f64], rho: f64) -> Result<Vec<f64>, TrainError> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(TrainError::Invalid(format!("rho {rho} must lie in (0, 1)")));
    }
    if grad_norms.len() != tx_times.len() || grad_norms.is_empty() {
        return Err(TrainError::Invalid("norms and airtimes must be nonempty and aligned".into()));
    }
    let raw: Vec<f64> = grad_norms
        .iter()
        .zip(tx_times)
        .map(|(&g, &t)| {
            let w = rho.sqrt() * g / ((1.0 - rho) * t);
            if w.is_finite() && w > 0.0 {
                w
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = raw.iter().sum();
    if total > 0.0 {
        Ok(raw.iter().map(|w| w / total).collect())
    } else {
        Ok(vec![1.0 / raw.len() as f64; raw.len()])
    }
}

/// How a round's uplink is organized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Policy {
    /// Analog-digital scheduling under a round delay budget.
    Adfl { t_max_s: f64 },
    /// Every device aggregates over the air.
    OtaOnly,
    /// One device per round, sampled by gradient norm and airtime, sends a
    /// `bits`-wide quantized gradient digitally.
    DigitalProb { rho: f64, bits: u32 },
    /// OTA over the devices within `r_in_m` of the server only.
    BbInterior { r_in_m: f64 },
    /// Even rounds OTA over everyone, odd rounds as `BbInterior`.
    BbAlternating { r_in_m: f64 },
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::Adfl { .. } => "adfl",
            Policy::OtaOnly => "ota_only",
            Policy::DigitalProb { .. } => "digital_prob",
            Policy::BbInterior { .. } => "bb_interior",
            Policy::BbAlternating { .. } => "bb_alternating",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Device {
    pub data: Vec<Sample>,
    pub distance_m: f64,
    pub avg_path_loss: f64,
}

/// Test-only knobs that idealize the uplink.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UplinkOverrides {
    /// Drop the receiver noise from OTA aggregation.
    pub noiseless_receiver: bool,
    /// Quantize digital devices with this width instead of the scheduled one.
    pub forced_bits: Option<u32>,
}

/// A deployment: devices with their data and positions plus shared settings.
#[derive(Debug, Clone)]
pub struct Federation {
    pub devices: Vec<Device>,
    pub channel: ChannelParams,
    pub classes: usize,
    pub width: usize,
    pub batch_size: usize,
    pub reg_coeff: f64,
    pub test: Vec<Sample>,
    pub overrides: UplinkOverrides,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub model: Model,
    pub latency_s: f64,
    pub mse_bound: f64,
    pub empirical_mse: f64,
    pub train_loss: f64,
    pub digital_devices: usize,
    pub participants: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round_index: usize,
    pub latency_s: f64,
    pub mse_bound: f64,
    pub empirical_mse: f64,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub cumulative_time_s: f64,
    pub digital_devices: usize,
    pub participants: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTrace {
    pub initial_accuracy: f64,
    pub rounds: Vec<RoundMetrics>,
    pub final_model: Model,
}

/// Who transmits how in one round.
struct UplinkPlan {
    digital: Vec<(usize, u32)>,
    ota: Vec<usize>,
    gamma: f64,
    latency_s: f64,
    mse_bound: f64,
    divisor: usize,
}

impl Federation {
    pub fn dim(&self) -> usize {
        self.classes * self.width
    }

    pub fn zero_model(&self) -> Model {
        Model::zeros(self.classes, self.width)
    }

    fn ota_time(&self) -> f64 {
        channel::ota_tx_time(self.dim(), self.channel.bandwidth_hz)
    }

    /// Mini-batch loss and gradient at every device, drawing each batch
    /// without replacement from `rng` in device order. Returns the gradients
    /// and the mean of the local losses.
    pub fn local_gradients<R: Rng + ?Sized>(
        &self,
        model: &Model,
        rng: &mut R,
    ) -> Result<(Vec<Vec<f64>>, f64), TrainError> {
        let mut grads = Vec::with_capacity(self.devices.len());
        let mut loss = 0.0;
        for (i, dev) in self.devices.iter().enumerate() {
            if dev.data.is_empty() {
                return Err(TrainError::EmptyDevice(i));
            }
            let size = self.batch_size.clamp(1, dev.data.len());
            let batch: Vec<&Sample> = index::sample(rng, dev.data.len(), size)
                .into_iter()
                .map(|j| &dev.data[j])
                .collect();
            let (l, g) = loss_and_gradient(model, &batch, self.reg_coeff)?;
            loss += l;
            grads.push(g);
        }
        Ok((grads, loss / self.devices.len() as f64))
    }

    fn ota_plan(&self, members: Vec<usize>, snaps: &[DeviceSnapshot]) -> Result<UplinkPlan, TrainError> {
        let gamma = sched::ota_prescaler(members.iter().map(|&i| snaps[i].sm), self.channel.sample_energy)?;
        let mse_bound = if gamma.is_infinite() {
            0.0
        } else {
            sched::mse_bound([], true, gamma, self.channel.noise_density, self.dim())?
        };
        Ok(UplinkPlan {
            digital: Vec::new(),
            divisor: members.len(),
            ota: members,
            gamma,
            latency_s: self.ota_time(),
            mse_bound,
        })
    }

    fn interior(&self, r_in_m: f64) -> Vec<usize> {
        (0..self.devices.len())
            .filter(|&i| self.devices[i].distance_m <= r_in_m)
            .collect()
    }

    fn plan<R: Rng + ?Sized>(
        &self,
        policy: &Policy,
        round_index: usize,
        snaps: &[DeviceSnapshot],
        grads: &[Vec<f64>],
        rng: &mut R,
    ) -> Result<Option<UplinkPlan>, TrainError> {
        let n = self.devices.len();
        let d = self.dim();
        let bandwidth = self.channel.bandwidth_hz;
        let plan = match *policy {
            Policy::Adfl { t_max_s } => {
                let decision = sched::optimize_schedule(snaps, t_max_s, d, &self.channel)?;
                let mut digital: Vec<(usize, u32)> = decision
                    .bits
                    .iter()
                    .enumerate()
                    .filter_map(|(i, b)| b.map(|b| (i, b)))
                    .collect();
                let mut latency_s = decision.latency_s;
                let mut mse_bound = decision.mse_bound;
                if let Some(forced) = self.overrides.forced_bits {
                    digital.iter_mut().for_each(|(_, b)| *b = forced);
                    latency_s = sched::round_latency(
                        digital.iter().map(|&(i, b)| (quant::payload_bits(b, d), snaps[i].snr)),
                        decision.ota,
                        d,
                        bandwidth,
                    )?;
                    mse_bound = if decision.ota && decision.gamma == 0.0 {
                        f64::INFINITY
                    } else {
                        sched::mse_bound(
                            digital.iter().map(|&(i, b)| (snaps[i].grad_inf_norm, b)),
                            decision.ota,
                            decision.gamma,
                            self.channel.noise_density,
                            d,
                        )?
                    };
                }
                let ota = (0..n).filter(|&i| !decision.digital[i]).collect();
                UplinkPlan {
                    digital,
                    ota,
                    gamma: decision.gamma,
                    latency_s,
                    mse_bound,
                    divisor: n,
                }
            }
            Policy::OtaOnly => self.ota_plan((0..n).collect(), snaps)?,
            Policy::BbInterior { r_in_m } => {
                let members = self.interior(r_in_m);
                if members.is_empty() {
                    return Ok(None);
                }
                self.ota_plan(members, snaps)?
            }
            Policy::BbAlternating { r_in_m } => {
                let members = if round_index % 2 == 0 {
                    (0..n).collect()
                } else {
                    self.interior(r_in_m)
                };
                if members.is_empty() {
                    return Ok(None);
                }
                self.ota_plan(members, snaps)?
            }
            Policy::DigitalProb { rho, bits } => {
                // airtime d r / (B log2(1 + snr)), without the norm overhead
                let times: Vec<f64> = snaps
                    .iter()
                    .map(|s| {
                        if s.snr > 0.0 {
                            (d as u64 * bits as u64) as f64 / s.rate(bandwidth)
                        } else {
                            f64::INFINITY
                        }
                    })
                    .collect();
                let norms: Vec<f64> = grads.iter().map(|g| l2_norm(g)).collect();
                let weights = digital_prob_weights(&norms, &times, rho)?;
                let chosen = sample_index(&weights, rng);
                if !(snaps[chosen].snr > 0.0) {
                    return Ok(None);
                }
                UplinkPlan {
                    digital: vec![(chosen, bits)],
                    ota: Vec::new(),
                    gamma: 0.0,
                    latency_s: times[chosen],
                    mse_bound: d as f64 * quant::quant_mse_term(snaps[chosen].grad_inf_norm, bits),
                    divisor: 1,
                }
            }
        };
        Ok(Some(plan))
    }

    /// Runs one round from `model` and returns the updated model with the
    /// round's measurements. Test accuracy is left to the caller.
    ///
    /// `rng` is consumed in a fixed order: one fading draw per device, then
    /// the mini-batches, then policy sampling, quantization and noise.
    pub fn run_round<R: Rng + ?Sized>(
        &self,
        model: &Model,
        policy: &Policy,
        stepsize: f64,
        round_index: usize,
        rng: &mut R,
    ) -> Result<RoundOutcome, TrainError> {
        let d = self.dim();
        let gains = self
            .devices
            .iter()
            .map(|dev| channel::draw_fading(dev.avg_path_loss, rng))
            .collect::<Result<Vec<_>, _>>()?;
        let (grads, train_loss) = self.local_gradients(model, rng)?;
        let snaps: Vec<DeviceSnapshot> = gains
            .iter()
            .zip(&grads)
            .enumerate()
            .map(|(i, (&h, g))| DeviceSnapshot::new(i, h, inf_norm(g), &self.channel))
            .collect();

        let Some(plan) = self.plan(policy, round_index, &snaps, &grads, rng)? else {
            // nobody could transmit; the slot is spent without an update
            let latency_s = match policy {
                Policy::DigitalProb { .. } => 0.0,
                _ => self.ota_time(),
            };
            return Ok(RoundOutcome {
                model: model.clone(),
                latency_s,
                mse_bound: 0.0,
                empirical_mse: 0.0,
                train_loss,
                digital_devices: 0,
                participants: 0,
            });
        };

        let mut decoded = Vec::with_capacity(plan.digital.len());
        for &(i, bits) in &plan.digital {
            let q = quant::quantize(&grads[i], bits.min(quant::MAX_BITS), rng)?;
            decoded.push(quant::dequantize(&q));
        }
        let aggregate: Option<OtaAggregate> = if plan.ota.is_empty() {
            None
        } else {
            let refs: Vec<&[f64]> = plan.ota.iter().map(|&i| grads[i].as_slice()).collect();
            let noise = if self.overrides.noiseless_receiver {
                0.0
            } else {
                self.channel.noise_density
            };
            Some(airsim::ota_aggregate(&refs, plan.gamma, noise, rng)?)
        };
        let g_hat = airsim::reconstruct_global(aggregate.as_ref(), &decoded, plan.divisor)?;

        // error of the reconstructed participant sum against the true one
        let mut true_sum = vec![0.0; d];
        for &i in plan.ota.iter().chain(plan.digital.iter().map(|(i, _)| i)) {
            for (s, g) in true_sum.iter_mut().zip(&grads[i]) {
                *s += g;
            }
        }
        let scaled: Vec<f64> = g_hat.iter().map(|g| g * plan.divisor as f64).collect();
        let empirical_mse = airsim::empirical_mse(&true_sum, &scaled)?;

        Ok(RoundOutcome {
            model: sgd_step(model, &g_hat, stepsize),
            latency_s: plan.latency_s,
            mse_bound: plan.mse_bound,
            empirical_mse,
            train_loss,
            digital_devices: plan.digital.len(),
            participants: plan.ota.len() + plan.digital.len(),
        })
    }

    /// Trains from `init` until the next round would overrun `time_budget_s`.
    pub fn train<R: Rng + ?Sized>(
        &self,
        init: &Model,
        policy: &Policy,
        stepsize: f64,
        time_budget_s: f64,
        rng: &mut R,
    ) -> Result<TrainingTrace, TrainError> {
        let initial_accuracy = evaluate(init, &self.test);
        let mut model = init.clone();
        let mut rounds = Vec::new();
        let mut elapsed = 0.0;
        for round_index in 0..MAX_ROUNDS {
            let out = self.run_round(&model, policy, stepsize, round_index, rng)?;
            let cumulative = elapsed + out.latency_s;
            if cumulative > time_budget_s {
                break;
            }
            elapsed = cumulative;
            model = out.model;
            rounds.push(RoundMetrics {
                round_index,
                latency_s: out.latency_s,
                mse_bound: out.mse_bound,
                empirical_mse: out.empirical_mse,
                train_loss: out.train_loss,
                test_accuracy: evaluate(&model, &self.test),
                cumulative_time_s: elapsed,
                digital_devices: out.digital_devices,
                participants: out.participants,
            });
        }
        Ok(TrainingTrace {
            initial_accuracy,
            rounds,
            final_model: model,
        })
    }
}

fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}
