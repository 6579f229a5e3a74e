//! Replicated experiments: deployment sampling, training under each policy,
//! and deterministic CSV output.

use crate::channel;
use crate::config::{DatasetSpec, ExperimentConfig, PartitionKind};
use crate::data::{self, DataError, LabeledDataset};
use crate::flcore::{self, Device, Federation, Sample, TrainError, TrainingTrace, UplinkOverrides};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Directory searched for MNIST files when the config gives no paths.
pub const DATA_DIR_ENV: &str = "ADFL_DATA_DIR";

pub const ROUNDS_HEADER: &str =
    "run_id,policy,round,latency_s,cum_time_s,mse_bound,empirical_mse,train_loss,test_acc";
pub const SUMMARY_HEADER: &str = "policy,time_s,mean_test_acc,std_test_acc,replications";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Channel(#[from] channel::ChannelError),
    #[error("no policy is labelled \"{0}\"")]
    UnknownPolicy(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Distance from the server of a point uniform on the disk of radius `r_max`.
pub fn sample_disk_radius<R: Rng + ?Sized>(r_max: f64, rng: &mut R) -> f64 {
    r_max * rng.gen::<f64>().sqrt()
}

/// Training and test pools shared by all replications.
#[derive(Debug, Clone)]
pub struct DataPools {
    pub train: LabeledDataset,
    pub test: Vec<Sample>,
}

fn mnist_paths(spec: &DatasetSpec) -> Result<[PathBuf; 4], ExperimentError> {
    let DatasetSpec::Mnist {
        train_images,
        train_labels,
        test_images,
        test_labels,
        ..
    } = spec
    else {
        unreachable!("called for MNIST specs only");
    };
    if let (Some(a), Some(b), Some(c), Some(d)) = (train_images, train_labels, test_images, test_labels) {
        return Ok([a.clone(), b.clone(), c.clone(), d.clone()]);
    }
    let dir = std::env::var_os(DATA_DIR_ENV).ok_or_else(|| {
        ExperimentError::Config(format!(
            "dataset: MNIST paths are not set and {DATA_DIR_ENV} is undefined"
        ))
    })?;
    let dir = PathBuf::from(dir);
    let find = |stem: &str| {
        let plain = dir.join(stem);
        let gz = dir.join(format!("{stem}.gz"));
        if plain.exists() || !gz.exists() {
            plain
        } else {
            gz
        }
    };
    Ok([
        find("train-images-idx3-ubyte"),
        find("train-labels-idx1-ubyte"),
        find("t10k-images-idx3-ubyte"),
        find("t10k-labels-idx1-ubyte"),
    ])
}

/// Loads or generates the data pools. Synthetic data comes from stream 0 of
/// the experiment seed.
pub fn load_pools(cfg: &ExperimentConfig) -> Result<DataPools, ExperimentError> {
    match &cfg.dataset {
        DatasetSpec::Synthetic {
            class_count,
            feature_dim,
            train_points,
            test_points,
            separation,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let all = data::synth_dataset(
                *class_count,
                *feature_dim,
                train_points + test_points,
                *separation,
                &mut rng,
            )?;
            let (train, test) = all.split_at(*train_points);
            Ok(DataPools {
                train,
                test: flcore::with_bias(&test),
            })
        }
        spec @ DatasetSpec::Mnist { test_points, .. } => {
            let [ti, tl, vi, vl] = mnist_paths(spec)?;
            let train = data::load_mnist(&ti, &tl)?;
            let test = data::load_mnist(&vi, &vl)?;
            let keep: Vec<usize> = (0..test.len().min(*test_points)).collect();
            Ok(DataPools {
                train,
                test: flcore::with_bias(&test.select(&keep)),
            })
        }
    }
}

fn replication_rng(seed: u64, replication: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + replication as u64);
    rng
}

/// Samples positions and a data partition for one replication.
pub fn build_federation(
    cfg: &ExperimentConfig,
    pools: &DataPools,
    replication: usize,
) -> Result<(Federation, ChaCha8Rng), ExperimentError> {
    let mut rng = replication_rng(cfg.seed, replication);
    let params = cfg.channel_params()?;
    let n = cfg.device_count;
    let samples = flcore::with_bias(&pools.train);
    let shards = match cfg.partition {
        PartitionKind::Iid => flcore::partition_iid(&samples, n, cfg.per_device_samples, &mut rng)?,
        PartitionKind::Noniid => flcore::partition_noniid(
            &samples,
            n,
            cfg.labels_per_device,
            pools.train.class_count,
            &mut rng,
        )?,
    };
    let mut devices = Vec::with_capacity(n);
    for data in shards {
        // the model is only defined beyond the reference distance
        let distance_m = sample_disk_radius(cfg.radius_m, &mut rng).max(params.ref_distance_m);
        devices.push(Device {
            avg_path_loss: channel::path_loss(distance_m, &params)?,
            distance_m,
            data,
        });
    }
    let federation = Federation {
        devices,
        channel: params,
        classes: pools.train.class_count,
        width: pools.train.feature_dim() + 1,
        batch_size: cfg.batch_size,
        reg_coeff: cfg.reg_coeff,
        test: pools.test.clone(),
        overrides: UplinkOverrides::default(),
    };
    Ok((federation, rng))
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub run_id: String,
    pub replication: usize,
    pub policy: String,
    pub trace: TrainingTrace,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    /// Sorted by replication, then by policy order in the config.
    pub runs: Vec<RunResult>,
    pub config_json: String,
}

pub fn run_id(replication: usize) -> String {
    format!("rep{replication:04}")
}

/// Trains every selected policy on every replication.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    policy_filter: Option<&str>,
) -> Result<ExperimentOutput, ExperimentError> {
    let entries: Vec<_> = cfg
        .policies
        .iter()
        .filter(|p| policy_filter.map_or(true, |f| p.label == f || p.spec.name() == f))
        .collect();
    if entries.is_empty() {
        return Err(ExperimentError::UnknownPolicy(policy_filter.unwrap_or_default().into()));
    }
    let pools = load_pools(cfg)?;
    let run_replication = |rep: usize| -> Result<Vec<RunResult>, ExperimentError> {
        let (fed, rng) = build_federation(cfg, &pools, rep)?;
        let init = fed.zero_model();
        entries
            .iter()
            .map(|entry| {
                // every policy replays the same stream so comparisons share draws
                let mut policy_rng = rng.clone();
                let trace = fed.train(
                    &init,
                    &entry.spec.to_policy(cfg.radius_m),
                    entry.stepsize.unwrap_or(cfg.stepsize),
                    cfg.total_time_budget_s,
                    &mut policy_rng,
                )?;
                Ok(RunResult {
                    run_id: run_id(rep),
                    replication: rep,
                    policy: entry.label.clone(),
                    trace,
                })
            })
            .collect()
    };
    let reps: Vec<usize> = (0..cfg.replication_count).collect();
    let results: Vec<Result<Vec<RunResult>, ExperimentError>> = match cfg.workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| ExperimentError::Config(format!("workers: {e}")))?
            .install(|| reps.par_iter().map(|&r| run_replication(r)).collect()),
        None => reps.par_iter().map(|&r| run_replication(r)).collect(),
    };
    let mut runs = Vec::new();
    for r in results {
        runs.extend(r?);
    }
    Ok(ExperimentOutput {
        runs,
        config_json: cfg.to_json(),
    })
}

fn fmt_f(x: f64) -> String {
    format!("{x:.8e}")
}

/// One CSV row per round, without a header.
pub fn run_rows(run: &RunResult) -> String {
    let mut out = String::new();
    for r in &run.trace.rounds {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            run.run_id,
            run.policy,
            r.round_index,
            fmt_f(r.latency_s),
            fmt_f(r.cumulative_time_s),
            fmt_f(r.mse_bound),
            fmt_f(r.empirical_mse),
            fmt_f(r.train_loss),
            fmt_f(r.test_accuracy),
        );
    }
    out
}

/// Test accuracy of a run at wall-clock `t`: the latest round finished by
/// `t`, or the initial model before the first round completes.
pub fn accuracy_at(trace: &TrainingTrace, t: f64) -> f64 {
    let done = trace.rounds.partition_point(|r| r.cumulative_time_s <= t);
    if done == 0 {
        trace.initial_accuracy
    } else {
        trace.rounds[done - 1].test_accuracy
    }
}

/// Mean and sample standard deviation of test accuracy per policy on an
/// evenly spaced grid over `[0, horizon]`.
pub fn summary_csv(runs: &[RunResult], horizon: f64, grid_points: usize) -> String {
    let mut labels: Vec<&str> = Vec::new();
    for r in runs {
        if !labels.contains(&r.policy.as_str()) {
            labels.push(&r.policy);
        }
    }
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    let steps = grid_points.max(2) - 1;
    for label in labels {
        let traces: Vec<&TrainingTrace> = runs.iter().filter(|r| r.policy == label).map(|r| &r.trace).collect();
        let n = traces.len() as f64;
        for k in 0..=steps {
            let t = horizon * k as f64 / steps as f64;
            let accs: Vec<f64> = traces.iter().map(|tr| accuracy_at(tr, t)).collect();
            let mean = accs.iter().sum::<f64>() / n;
            let std = if accs.len() > 1 {
                (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            let _ = writeln!(out, "{label},{},{},{},{}", fmt_f(t), fmt_f(mean), fmt_f(std), traces.len());
        }
    }
    out
}

fn write_file(path: &Path, contents: &str) -> Result<(), ExperimentError> {
    std::fs::write(path, contents).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `runs/<run_id>.csv` per replication, then the merged `rounds.csv`,
/// `summary.csv` and the normalized `config.json`.
pub fn write_outputs(out: &ExperimentOutput, cfg: &ExperimentConfig, dir: &Path) -> Result<(), ExperimentError> {
    let runs_dir = dir.join("runs");
    std::fs::create_dir_all(&runs_dir).map_err(|source| ExperimentError::Io {
        path: runs_dir.clone(),
        source,
    })?;
    let mut ids: Vec<&str> = out.runs.iter().map(|r| r.run_id.as_str()).collect();
    ids.dedup();
    let mut merged = String::from(ROUNDS_HEADER);
    merged.push('\n');
    for id in ids {
        let mut body = String::from(ROUNDS_HEADER);
        body.push('\n');
        for run in out.runs.iter().filter(|r| r.run_id == id) {
            body.push_str(&run_rows(run));
        }
        write_file(&runs_dir.join(format!("{id}.csv")), &body)?;
    }
    // merge what was written, in sorted run_id order
    let mut files: Vec<PathBuf> = std::fs::read_dir(&runs_dir)
        .map_err(|source| ExperimentError::Io {
            path: runs_dir.clone(),
            source,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    for path in files {
        let text = std::fs::read_to_string(&path).map_err(|source| ExperimentError::Io {
            path: path.clone(),
            source,
        })?;
        for line in text.lines().skip(1) {
            merged.push_str(line);
            merged.push('\n');
        }
    }
    write_file(&dir.join("rounds.csv"), &merged)?;
    write_file(
        &dir.join("summary.csv"),
        &summary_csv(&out.runs, cfg.total_time_budget_s, cfg.summary_grid_points),
    )?;
    write_file(&dir.join("config.json"), &out.config_json)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::validate_config;

    fn quick_config() -> ExperimentConfig {
        let doc = serde_json::json!({
            "seed": 3,
            "device_count": 5,
            "radius_m": 200.0,
            "bandwidth_hz": 1e6,
            "carrier_freq_hz": 2.4e9,
            "tx_power_dbm": 20.0,
            "noise_density_dbm_hz": -174.0,
            "pathloss_exponent": 2.2,
            "dataset": {"kind": "synthetic", "class_count": 4, "feature_dim": 6,
                        "train_points": 200, "test_points": 100, "separation": 3.0},
            "partition": "iid",
            "per_device_samples": 40,
            "batch_size": 10,
            "stepsize": 0.1,
            "reg_coeff": 1e-3,
            "total_time_budget_s": 0.002,
            "policies": [{"kind": "adfl", "t_max_s": 0.0001}, {"kind": "ota_only"}],
            "replication_count": 3,
            "summary_grid_points": 5
        });
        validate_config(&doc.to_string()).unwrap()
    }

    #[test]
    fn uniform_disk_mean_square_radius() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let ms = (0..n).map(|_| sample_disk_radius(200.0, &mut rng).powi(2)).sum::<f64>() / n as f64;
        assert!((ms / 20_000.0 - 1.0).abs() < 0.01, "{ms}");
    }

    #[test]
    fn ota_only_round_count_matches_budget() {
        let cfg = quick_config();
        let out = run_experiment(&cfg, Some("ota_only")).unwrap();
        // tau = 28e-6 s, budget 2 ms
        let expected = (0.002f64 / 28e-6).floor() as usize;
        assert!(out.runs.iter().all(|r| r.trace.rounds.len() == expected));
    }

    #[test]
    fn replications_differ_but_rerun_is_identical() {
        let cfg = quick_config();
        let a = run_experiment(&cfg, None).unwrap();
        let b = run_experiment(&cfg, None).unwrap();
        let rows = |o: &ExperimentOutput| o.runs.iter().map(run_rows).collect::<String>();
        assert_eq!(rows(&a), rows(&b));
        assert_ne!(run_rows(&a.runs[0]), run_rows(&a.runs[2]));
        assert_eq!(a.config_json, b.config_json);
    }

    #[test]
    fn latency_column_sums_to_cumulative() {
        let cfg = quick_config();
        let out = run_experiment(&cfg, None).unwrap();
        for run in &out.runs {
            let total: f64 = run.trace.rounds.iter().map(|r| r.latency_s).sum();
            let last = run.trace.rounds.last().unwrap().cumulative_time_s;
            assert!((total - last).abs() <= 1e-12 * last);
            assert!(last <= cfg.total_time_budget_s);
        }
    }

    #[test]
    fn unknown_filter_is_an_error() {
        assert!(matches!(
            run_experiment(&quick_config(), Some("nope")),
            Err(ExperimentError::UnknownPolicy(_))
        ));
    }

    #[test]
    fn summary_grid_shape() {
        let cfg = quick_config();
        let out = run_experiment(&cfg, None).unwrap();
        let csv = summary_csv(&out.runs, cfg.total_time_budget_s, 5);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], SUMMARY_HEADER);
        assert_eq!(lines.len(), 1 + 2 * 5);
        assert!(lines[1].starts_with("adfl,0.00000000e0,"));
        assert!(lines[1].ends_with(",3"));
    }
}
