//! Analog-digital federated learning over a wireless uplink.
//!
//! Each round the server picks which devices aggregate over the air (OTA)
//! and which send stochastically quantized gradients digitally, along with
//! the digital bit widths, so that the aggregation MSE bound is minimized
//! under a per-round latency budget.

pub mod airsim;
pub mod channel;
pub mod config;
pub mod data;
pub mod experiment;
pub mod flcore;
pub mod quant;
pub mod sched;

pub use channel::{ChannelParams, ChannelRealization};
pub use config::{ExperimentConfig, PolicySpec};
pub use experiment::{run_experiment, ExperimentOutput};
pub use flcore::{Federation, Model, Policy, RoundMetrics, TrainingTrace};
pub use quant::QuantizedGradient;
pub use sched::{optimize_schedule, BitRule, DeviceSnapshot, ScheduleDecision};
