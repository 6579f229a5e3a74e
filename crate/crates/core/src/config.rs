//! Experiment configuration: JSON parsing with exhaustive validation.
//!
//! Validation walks the raw JSON tree instead of relying on serde's
//! fail-fast errors, so a bad document reports every problem at once.

use crate::channel::{self, ChannelParams};
use serde::Serialize;
use serde_json::{Map, Value};
use std::fmt;
use std::path::PathBuf;

/// Reference distance of the path-loss model, in meters.
pub const REF_DISTANCE_M: f64 = 1.0;

/// Pixel count of an MNIST image.
pub const MNIST_FEATURES: usize = 28 * 28;
pub const MNIST_CLASSES: usize = 10;

/// Every violation found in a configuration document.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigErrors(pub Vec<String>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration:")?;
        for e in &self.0 {
            write!(f, "\n  - {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Iid,
    Noniid,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Mnist {
        #[serde(skip_serializing_if = "Option::is_none")]
        train_images: Option<PathBuf>,
        #[serde(skip_serializing_if = "Option::is_none")]
        train_labels: Option<PathBuf>,
        #[serde(skip_serializing_if = "Option::is_none")]
        test_images: Option<PathBuf>,
        #[serde(skip_serializing_if = "Option::is_none")]
        test_labels: Option<PathBuf>,
        test_points: usize,
    },
    Synthetic {
        class_count: usize,
        feature_dim: usize,
        train_points: usize,
        test_points: usize,
        separation: f64,
    },
}

impl DatasetSpec {
    pub fn class_count(&self) -> usize {
        match self {
            DatasetSpec::Mnist { .. } => MNIST_CLASSES,
            DatasetSpec::Synthetic { class_count, .. } => *class_count,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            DatasetSpec::Mnist { .. } => MNIST_FEATURES,
            DatasetSpec::Synthetic { feature_dim, .. } => *feature_dim,
        }
    }

    /// Model dimension with one bias coordinate per class.
    pub fn model_dim(&self) -> usize {
        self.class_count() * (self.feature_dim() + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicySpec {
    Adfl { t_max_s: f64 },
    OtaOnly,
    DigitalProb { rho: f64, bits: u32 },
    BbInterior { r_in_fraction: f64 },
    BbAlternating { r_in_fraction: f64 },
}

impl PolicySpec {
    pub fn name(&self) -> &'static str {
        match self {
            PolicySpec::Adfl { .. } => "adfl",
            PolicySpec::OtaOnly => "ota_only",
            PolicySpec::DigitalProb { .. } => "digital_prob",
            PolicySpec::BbInterior { .. } => "bb_interior",
            PolicySpec::BbAlternating { .. } => "bb_alternating",
        }
    }

    pub fn to_policy(&self, radius_m: f64) -> crate::flcore::Policy {
        use crate::flcore::Policy;
        match *self {
            PolicySpec::Adfl { t_max_s } => Policy::Adfl { t_max_s },
            PolicySpec::OtaOnly => Policy::OtaOnly,
            PolicySpec::DigitalProb { rho, bits } => Policy::DigitalProb { rho, bits },
            PolicySpec::BbInterior { r_in_fraction } => Policy::BbInterior {
                r_in_m: r_in_fraction * radius_m,
            },
            PolicySpec::BbAlternating { r_in_fraction } => Policy::BbAlternating {
                r_in_m: r_in_fraction * radius_m,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyEntry {
    #[serde(flatten)]
    pub spec: PolicySpec,
    /// Name used in output files; defaults to the policy kind.
    pub label: String,
    /// Overrides the experiment-wide stepsize for this policy.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stepsize: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub device_count: usize,
    pub radius_m: f64,
    pub bandwidth_hz: f64,
    pub carrier_freq_hz: f64,
    pub tx_power_dbm: f64,
    pub noise_density_dbm_hz: f64,
    pub pathloss_exponent: f64,
    pub dataset: DatasetSpec,
    pub partition: PartitionKind,
    pub labels_per_device: usize,
    pub per_device_samples: usize,
    pub batch_size: usize,
    pub stepsize: f64,
    pub reg_coeff: f64,
    pub total_time_budget_s: f64,
    pub policies: Vec<PolicyEntry>,
    pub replication_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    pub summary_grid_points: usize,
}

impl ExperimentConfig {
    pub fn channel_params(&self) -> Result<ChannelParams, channel::ChannelError> {
        ChannelParams::from_power_budget(
            self.bandwidth_hz,
            self.tx_power_dbm,
            self.noise_density_dbm_hz,
            self.carrier_freq_hz,
            self.pathloss_exponent,
            REF_DISTANCE_M,
        )
    }

    pub fn model_dim(&self) -> usize {
        self.dataset.model_dim()
    }

    /// OTA airtime `d / B`.
    pub fn tau_ota(&self) -> f64 {
        self.model_dim() as f64 / self.bandwidth_hz
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

const TOP_REQUIRED: &[&str] = &[
    "seed",
    "device_count",
    "radius_m",
    "bandwidth_hz",
    "carrier_freq_hz",
    "tx_power_dbm",
    "noise_density_dbm_hz",
    "pathloss_exponent",
    "dataset",
    "partition",
    "per_device_samples",
    "batch_size",
    "stepsize",
    "reg_coeff",
    "total_time_budget_s",
    "policies",
    "replication_count",
];
const TOP_OPTIONAL: &[&str] = &["workers", "labels_per_device", "summary_grid_points"];

/// Reads fields off one JSON object, recording every problem under `path`.
struct Obj<'a> {
    map: &'a Map<String, Value>,
    path: String,
}

impl<'a> Obj<'a> {
    fn new(value: &'a Value, path: &str, errors: &mut Vec<String>) -> Option<Self> {
        match value.as_object() {
            Some(map) => Some(Self {
                map,
                path: path.to_string(),
            }),
            None => {
                errors.push(format!("{}: expected an object", display_path(path)));
                None
            }
        }
    }

    fn key(&self, k: &str) -> String {
        if self.path.is_empty() {
            k.to_string()
        } else {
            format!("{}.{k}", self.path)
        }
    }

    fn check_keys(&self, required: &[&str], optional: &[&str], errors: &mut Vec<String>) {
        for k in required {
            if !self.map.contains_key(*k) {
                errors.push(format!("{}: required field is missing", self.key(k)));
            }
        }
        let mut unknown: Vec<&String> = self
            .map
            .keys()
            .filter(|k| !required.contains(&k.as_str()) && !optional.contains(&k.as_str()))
            .collect();
        unknown.sort();
        for k in unknown {
            errors.push(format!("{}: unknown field", self.key(k)));
        }
    }

    fn f64(&self, k: &str, ok: impl Fn(f64) -> bool, want: &str, errors: &mut Vec<String>) -> Option<f64> {
        let v = self.map.get(k)?;
        match v.as_f64() {
            Some(x) if x.is_finite() && ok(x) => Some(x),
            Some(x) => {
                errors.push(format!("{}: {x} is out of range, expected {want}", self.key(k)));
                None
            }
            None => {
                errors.push(format!("{}: expected a number, found {v}", self.key(k)));
                None
            }
        }
    }

    fn u64(&self, k: &str, min: u64, errors: &mut Vec<String>) -> Option<u64> {
        let v = self.map.get(k)?;
        match v.as_u64() {
            Some(x) if x >= min => Some(x),
            Some(x) => {
                errors.push(format!("{}: {x} is out of range, expected an integer >= {min}", self.key(k)));
                None
            }
            None => {
                errors.push(format!("{}: expected a nonnegative integer, found {v}", self.key(k)));
                None
            }
        }
    }

    fn usize(&self, k: &str, min: usize, errors: &mut Vec<String>) -> Option<usize> {
        self.u64(k, min as u64, errors).and_then(|x| usize::try_from(x).ok())
    }

    fn str(&self, k: &str, errors: &mut Vec<String>) -> Option<&'a str> {
        let v = self.map.get(k)?;
        let s = v.as_str();
        if s.is_none() {
            errors.push(format!("{}: expected a string, found {v}", self.key(k)));
        }
        s
    }
}

fn display_path(path: &str) -> &str {
    if path.is_empty() {
        "<document>"
    } else {
        path
    }
}

fn parse_dataset(value: &Value, errors: &mut Vec<String>) -> Option<DatasetSpec> {
    let obj = Obj::new(value, "dataset", errors)?;
    let kind = obj.map.get("kind").and_then(Value::as_str);
    match kind {
        Some("mnist") => {
            obj.check_keys(
                &["kind", "test_points"],
                &["train_images", "train_labels", "test_images", "test_labels"],
                errors,
            );
            let paths: Vec<Option<PathBuf>> = ["train_images", "train_labels", "test_images", "test_labels"]
                .iter()
                .map(|k| obj.str(k, errors).map(PathBuf::from))
                .collect();
            let given = paths.iter().filter(|p| p.is_some()).count();
            if given != 0 && given != 4 {
                errors.push("dataset: give all four MNIST paths or none".into());
            }
            let test_points = obj.usize("test_points", 1, errors);
            let mut it = paths.into_iter();
            Some(DatasetSpec::Mnist {
                train_images: it.next().flatten(),
                train_labels: it.next().flatten(),
                test_images: it.next().flatten(),
                test_labels: it.next().flatten(),
                test_points: test_points?,
            })
        }
        Some("synthetic") => {
            obj.check_keys(
                &["kind", "class_count", "feature_dim", "train_points", "test_points", "separation"],
                &[],
                errors,
            );
            let class_count = obj.usize("class_count", 2, errors);
            let feature_dim = obj.usize("feature_dim", 1, errors);
            let train_points = obj.usize("train_points", 1, errors);
            let test_points = obj.usize("test_points", 1, errors);
            let separation = obj.f64("separation", |x| x >= 0.0, "a nonnegative number", errors);
            if let (Some(c), Some(f)) = (class_count, feature_dim) {
                if f < c {
                    errors.push(format!(
                        "dataset.feature_dim: {f} is smaller than class_count {c}"
                    ));
                }
            }
            Some(DatasetSpec::Synthetic {
                class_count: class_count?,
                feature_dim: feature_dim?,
                train_points: train_points?,
                test_points: test_points?,
                separation: separation?,
            })
        }
        Some(other) => {
            errors.push(format!(
                "dataset.kind: unknown dataset \"{other}\", expected \"mnist\" or \"synthetic\""
            ));
            None
        }
        None => {
            errors.push("dataset.kind: required field is missing or not a string".into());
            None
        }
    }
}

fn parse_policy(value: &Value, index: usize, errors: &mut Vec<String>) -> Option<PolicyEntry> {
    let path = format!("policies[{index}]");
    let obj = Obj::new(value, &path, errors)?;
    let common = ["label", "stepsize"];
    let kind = obj.map.get("kind").and_then(Value::as_str);
    let spec = match kind {
        Some("adfl") => {
            obj.check_keys(&["kind", "t_max_s"], &common, errors);
            let t = obj.f64("t_max_s", |x| x > 0.0, "a positive duration", errors);
            t.map(|t_max_s| PolicySpec::Adfl { t_max_s })
        }
        Some("ota_only") => {
            obj.check_keys(&["kind"], &common, errors);
            Some(PolicySpec::OtaOnly)
        }
        Some("digital_prob") => {
            obj.check_keys(&["kind", "rho", "bits"], &common, errors);
            let rho = obj.f64("rho", |x| x > 0.0 && x < 1.0, "a value in (0, 1)", errors);
            let bits = obj.u64("bits", 1, errors);
            if bits.is_some_and(|b| b > u64::from(crate::quant::MAX_BITS)) {
                errors.push(format!("{path}.bits: at most {} bits are supported", crate::quant::MAX_BITS));
            }
            match (rho, bits) {
                (Some(rho), Some(b)) if b <= u64::from(crate::quant::MAX_BITS) => {
                    Some(PolicySpec::DigitalProb { rho, bits: b as u32 })
                }
                _ => None,
            }
        }
        Some(k @ ("bb_interior" | "bb_alternating")) => {
            obj.check_keys(&["kind", "r_in_fraction"], &common, errors);
            let f = obj.f64("r_in_fraction", |x| x > 0.0 && x <= 1.0, "a fraction in (0, 1]", errors);
            f.map(|r_in_fraction| {
                if k == "bb_interior" {
                    PolicySpec::BbInterior { r_in_fraction }
                } else {
                    PolicySpec::BbAlternating { r_in_fraction }
                }
            })
        }
        Some(other) => {
            errors.push(format!("{path}.kind: unknown policy \"{other}\""));
            None
        }
        None => {
            errors.push(format!("{path}.kind: required field is missing or not a string"));
            None
        }
    };
    let label = obj.str("label", errors).map(str::to_string);
    if label.as_deref().is_some_and(|l| l.is_empty() || l.contains([',', '"', '\n'])) {
        errors.push(format!("{path}.label: must be nonempty and free of commas, quotes and newlines"));
    }
    let stepsize = obj.f64("stepsize", |x| x > 0.0, "a positive number", errors);
    let spec = spec?;
    Some(PolicyEntry {
        label: label.unwrap_or_else(|| spec.name().to_string()),
        spec,
        stepsize,
    })
}

/// Parses and validates a configuration document. An empty document is
/// treated as `{}`.
pub fn validate_config(text: &str) -> Result<ExperimentConfig, ConfigErrors> {
    let value: Value = if text.trim().is_empty() {
        Value::Object(Map::new())
    } else {
        serde_json::from_str(text).map_err(|e| ConfigErrors(vec![format!("malformed JSON: {e}")]))?
    };
    let mut errors = Vec::new();
    let Some(obj) = Obj::new(&value, "", &mut errors) else {
        return Err(ConfigErrors(errors));
    };
    obj.check_keys(TOP_REQUIRED, TOP_OPTIONAL, &mut errors);
    let e = &mut errors;

    let seed = obj.u64("seed", 0, e);
    let device_count = obj.usize("device_count", 1, e);
    let radius_m = obj.f64("radius_m", |x| x >= REF_DISTANCE_M, "at least the 1 m reference distance", e);
    let bandwidth_hz = obj.f64("bandwidth_hz", |x| x > 0.0, "a positive bandwidth", e);
    let carrier_freq_hz = obj.f64("carrier_freq_hz", |x| x > 0.0, "a positive frequency", e);
    let tx_power_dbm = obj.f64("tx_power_dbm", |_| true, "a number", e);
    let noise_density_dbm_hz = obj.f64("noise_density_dbm_hz", |_| true, "a number", e);
    let pathloss_exponent = obj.f64("pathloss_exponent", |x| x > 0.0, "a positive exponent", e);
    let dataset = obj.map.get("dataset").and_then(|v| parse_dataset(v, e));
    let partition = match obj.str("partition", e) {
        Some("iid") => Some(PartitionKind::Iid),
        Some("noniid") => Some(PartitionKind::Noniid),
        Some(other) => {
            e.push(format!("partition: unknown partition \"{other}\", expected \"iid\" or \"noniid\""));
            None
        }
        None => None,
    };
    let labels_per_device = if obj.map.contains_key("labels_per_device") {
        obj.usize("labels_per_device", 1, e)
    } else {
        Some(2)
    };
    let per_device_samples = obj.usize("per_device_samples", 1, e);
    let batch_size = obj.usize("batch_size", 1, e);
    let stepsize = obj.f64("stepsize", |x| x > 0.0, "a positive number", e);
    let reg_coeff = obj.f64("reg_coeff", |x| x >= 0.0, "a nonnegative number", e);
    let total_time_budget_s = obj.f64("total_time_budget_s", |x| x > 0.0, "a positive duration", e);
    let replication_count = obj.usize("replication_count", 1, e);
    let workers = if obj.map.contains_key("workers") {
        obj.usize("workers", 1, e).map(Some)
    } else {
        Some(None)
    };
    let summary_grid_points = if obj.map.contains_key("summary_grid_points") {
        obj.usize("summary_grid_points", 2, e)
    } else {
        Some(101)
    };
    let policies: Option<Vec<PolicyEntry>> = match obj.map.get("policies") {
        Some(Value::Array(items)) if items.is_empty() => {
            e.push("policies: at least one policy is required".into());
            None
        }
        Some(Value::Array(items)) => {
            let parsed: Vec<Option<PolicyEntry>> =
                items.iter().enumerate().map(|(i, v)| parse_policy(v, i, e)).collect();
            parsed.into_iter().collect()
        }
        Some(other) => {
            e.push(format!("policies: expected an array, found {other}"));
            None
        }
        None => None,
    };

    // cross-field checks
    if let (Some(ds), Some(b)) = (&dataset, bandwidth_hz) {
        let tau = ds.model_dim() as f64 / b;
        for (i, p) in policies.iter().flatten().enumerate() {
            if let PolicySpec::Adfl { t_max_s } = p.spec {
                if t_max_s < tau {
                    e.push(format!(
                        "policies[{i}].t_max_s: {t_max_s} s is below the OTA airtime d/B = {tau} s (d = {})",
                        ds.model_dim()
                    ));
                }
            }
        }
    }
    if let Some(ps) = &policies {
        let mut labels: Vec<&str> = ps.iter().map(|p| p.label.as_str()).collect();
        labels.sort_unstable();
        if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
            e.push(format!("policies: label \"{}\" is used twice; set distinct labels", w[0]));
        }
    }
    if let (Some(ds), Some(n), Some(per)) = (&dataset, device_count, per_device_samples) {
        if let (DatasetSpec::Synthetic { train_points, .. }, Some(PartitionKind::Iid)) = (ds, partition) {
            if n * per > *train_points {
                e.push(format!(
                    "per_device_samples: {n} devices x {per} samples exceed the {train_points} training points"
                ));
            }
        }
    }
    if let (Some(ds), Some(l)) = (&dataset, labels_per_device) {
        if l > ds.class_count() {
            e.push(format!(
                "labels_per_device: {l} exceeds the {} classes",
                ds.class_count()
            ));
        }
    }
    if let (Some(b), Some(tx), Some(n0), Some(fc), Some(beta)) = (
        bandwidth_hz,
        tx_power_dbm,
        noise_density_dbm_hz,
        carrier_freq_hz,
        pathloss_exponent,
    ) {
        if let Err(err) = ChannelParams::from_power_budget(b, tx, n0, fc, beta, REF_DISTANCE_M) {
            e.push(format!("channel parameters: {err}"));
        }
    }

    if !errors.is_empty() {
        return Err(ConfigErrors(errors));
    }
    let missing = || ConfigErrors(vec!["internal: validated field absent".into()]);
    Ok(ExperimentConfig {
        seed: seed.ok_or_else(missing)?,
        device_count: device_count.ok_or_else(missing)?,
        radius_m: radius_m.ok_or_else(missing)?,
        bandwidth_hz: bandwidth_hz.ok_or_else(missing)?,
        carrier_freq_hz: carrier_freq_hz.ok_or_else(missing)?,
        tx_power_dbm: tx_power_dbm.ok_or_else(missing)?,
        noise_density_dbm_hz: noise_density_dbm_hz.ok_or_else(missing)?,
        pathloss_exponent: pathloss_exponent.ok_or_else(missing)?,
        dataset: dataset.ok_or_else(missing)?,
        partition: partition.ok_or_else(missing)?,
        labels_per_device: labels_per_device.ok_or_else(missing)?,
        per_device_samples: per_device_samples.ok_or_else(missing)?,
        batch_size: batch_size.ok_or_else(missing)?,
        stepsize: stepsize.ok_or_else(missing)?,
        reg_coeff: reg_coeff.ok_or_else(missing)?,
        total_time_budget_s: total_time_budget_s.ok_or_else(missing)?,
        policies: policies.ok_or_else(missing)?,
        replication_count: replication_count.ok_or_else(missing)?,
        workers: workers.ok_or_else(missing)?,
        summary_grid_points: summary_grid_points.ok_or_else(missing)?,
    })
}
