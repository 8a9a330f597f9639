//! Metrics, experiments and machine-readable reports.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{network_modes, Dataset, DatasetError, Split, TrainingSample};
use crate::netgen::{generate_network, NetgenError, Topology};
use crate::refsim::{simulate, solve_seconds_per_step, DriverModel, SimConfig, SimError};
use crate::surrogate::{SurrogateBundle, SurrogateError, SystemInput};
use crate::waveform::Waveform;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("golden series is constant")]
    DegenerateGolden,
    #[error("series lengths differ or are shorter than 2 ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Netgen(#[from] NetgenError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coefficient of determination `1 - SS_res / SS_tot`.
pub fn r_squared(predicted: &[f64], golden: &[f64]) -> Result<f64, BenchError> {
    if predicted.len() != golden.len() || golden.len() < 2 {
        return Err(BenchError::LengthMismatch(predicted.len(), golden.len()));
    }
    let mean = golden.iter().sum::<f64>() / golden.len() as f64;
    let ss_tot: f64 = golden.iter().map(|g| (g - mean) * (g - mean)).sum();
    if ss_tot == 0.0 {
        return Err(BenchError::DegenerateGolden);
    }
    let ss_res: f64 = predicted.iter().zip(golden).map(|(p, g)| (p - g) * (p - g)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Fraction `N·m / N^m` of an `N`-state-per-pole grid covered by order-1
/// training data, computed in log space.
pub fn coverage_fraction(states: u64, order: u64) -> Result<f64, BenchError> {
    if states == 0 || order == 0 {
        return Err(BenchError::InvalidArgument("states and order must be ≥ 1".into()));
    }
    let (n, m) = (states as f64, order as f64);
    Ok((n.ln() + m.ln() - m * n.ln()).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderMetrics {
    pub order: usize,
    pub samples: usize,
    pub r_squared: f64,
    pub mse: f64,
    pub max_abs_error: f64,
    /// `coverage_fraction(10, order)`.
    pub coverage_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeRow {
    pub order: usize,
    pub oracle_seconds: f64,
    pub surrogate_seconds: f64,
    pub speedup: f64,
    pub oracle_seconds_per_step: f64,
    pub surrogate_evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub seed: u64,
    pub dataset_manifest_sha256: Option<String>,
    pub bundle_sha256: String,
    pub config_sha256: String,
    pub config: serde_json::Value,
    pub machine: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub experiment: String,
    pub orders: Vec<OrderMetrics>,
    pub runtimes: Vec<RuntimeRow>,
    /// Log-log slopes: refsim seconds per step and surrogate seconds, vs order.
    pub complexity: Option<ComplexitySlopes>,
    pub metadata: ReportMetadata,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplexitySlopes {
    pub orders: (usize, usize),
    pub oracle_per_step: f64,
    pub surrogate: f64,
}

impl MetricReport {
    /// SHA-256 of the report with every timing-derived field zeroed.
    pub fn fingerprint(&self) -> String {
        let mut r = self.clone();
        for row in &mut r.runtimes {
            row.oracle_seconds = 0.0;
            row.surrogate_seconds = 0.0;
            row.speedup = 0.0;
            row.oracle_seconds_per_step = 0.0;
        }
        r.complexity = r.complexity.map(|c| ComplexitySlopes {
            oracle_per_step: 0.0,
            surrogate: 0.0,
            ..c
        });
        sha256_hex(serde_json::to_string(&r).expect("report serializes").as_bytes())
    }

    /// Writes `<name>.json` and a `<name>.csv` table next to it.
    pub fn write(&self, dir: &Path, name: &str) -> Result<(), BenchError> {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join(format!("{name}.json")),
            serde_json::to_string_pretty(self)? + "\n",
        )?;
        let mut csv = fs::File::create(dir.join(format!("{name}.csv")))?;
        if !self.orders.is_empty() {
            writeln!(csv, "order,samples,r_squared,mse,max_abs_error,coverage_fraction")?;
            for o in &self.orders {
                writeln!(
                    csv,
                    "{},{},{:.12e},{:.12e},{:.12e},{:.12e}",
                    o.order, o.samples, o.r_squared, o.mse, o.max_abs_error, o.coverage_fraction
                )?;
            }
        } else {
            writeln!(
                csv,
                "order,oracle_seconds,surrogate_seconds,speedup,oracle_seconds_per_step,surrogate_evaluations"
            )?;
            for r in &self.runtimes {
                writeln!(
                    csv,
                    "{},{:.6e},{:.6e},{:.6e},{:.6e},{}",
                    r.order,
                    r.oracle_seconds,
                    r.surrogate_seconds,
                    r.speedup,
                    r.oracle_seconds_per_step,
                    r.surrogate_evaluations
                )?;
            }
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn machine_descriptor() -> String {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{}-{} threads={threads}", std::env::consts::ARCH, std::env::consts::OS)
}

fn bundle_hash(bundle: &SurrogateBundle) -> String {
    sha256_hex(serde_json::to_string(bundle).expect("bundle serializes").as_bytes())
}

/// A golden/predicted waveform pair in normalized units.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveformPair {
    pub label: String,
    pub times: Vec<f64>,
    pub golden: Vec<f64>,
    pub predicted: Vec<f64>,
}

/// Evaluates the cascade per order on each order's test split.
pub fn run_generalization_experiment(
    bundle: &SurrogateBundle,
    data: &Dataset,
    orders: &[usize],
) -> Result<(MetricReport, Vec<WaveformPair>), BenchError> {
    let mut rows = Vec::new();
    let mut pairs = Vec::new();
    for &order in orders {
        let test = data.split(order, Split::Test)?;
        if test.is_empty() {
            return Err(BenchError::InvalidArgument(format!("order {order} has no test samples")));
        }
        let (metrics, pair) = evaluate_order(bundle, order, &test, order)?;
        rows.push(metrics);
        pairs.push(pair);
    }
    let manifest = serde_json::to_string(&data.manifest)?;
    let config = serde_json::json!({ "orders": orders, "split": "test", "extrapolate": true });
    let report = MetricReport {
        schema_version: SCHEMA_VERSION,
        experiment: "generalization".into(),
        orders: rows,
        runtimes: Vec::new(),
        complexity: None,
        metadata: ReportMetadata {
            seed: data.manifest.seed,
            dataset_manifest_sha256: Some(sha256_hex(manifest.as_bytes())),
            bundle_sha256: bundle_hash(bundle),
            config_sha256: sha256_hex(config.to_string().as_bytes()),
            config,
            machine: machine_descriptor(),
        },
    };
    Ok((report, pairs))
}

/// Pooled metrics over samples using base plus the first `terms` residual
/// terms (capped at each sample's order).
pub fn evaluate_order(
    bundle: &SurrogateBundle,
    order: usize,
    samples: &[&TrainingSample],
    terms: usize,
) -> Result<(OrderMetrics, WaveformPair), BenchError> {
    let mut predicted = Vec::new();
    let mut golden = Vec::new();
    let mut pair = None;
    for s in samples {
        let input = SystemInput::from_sample(s);
        let p = bundle.predict(&input, &s.times, true)?;
        let values = &p.partials[terms.min(order)];
        if pair.is_none() {
            pair = Some(WaveformPair {
                label: format!("order_{order}"),
                times: s.times.clone(),
                golden: s.target.clone(),
                predicted: values.clone(),
            });
        }
        predicted.extend_from_slice(values);
        golden.extend_from_slice(&s.target);
    }
    let n = golden.len() as f64;
    let errors = predicted.iter().zip(&golden).map(|(p, g)| p - g);
    let mse = errors.clone().map(|e| e * e).sum::<f64>() / n;
    let max_abs_error = errors.map(f64::abs).fold(0.0, f64::max);
    Ok((
        OrderMetrics {
            order,
            samples: samples.len(),
            r_squared: r_squared(&predicted, &golden)?,
            mse,
            max_abs_error,
            coverage_fraction: coverage_fraction(10, order as u64)?,
        },
        pair.expect("nonempty samples"),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpeedConfig {
    pub orders: Vec<usize>,
    pub steps: usize,
    pub dt: f64,
    pub repetitions: usize,
    pub seed: u64,
    pub vdd: f64,
    pub knee: f64,
    pub topology: Topology,
}

impl Default for SpeedConfig {
    /// 1000 steps of 10 ps per order 1..=10, median of 5.
    fn default() -> Self {
        SpeedConfig {
            orders: (1..=10).collect(),
            steps: 1000,
            dt: 10e-12,
            repetitions: 5,
            seed: 0,
            vdd: 1.1,
            knee: 0.6,
            topology: Topology::Ladder,
        }
    }
}

fn median_seconds<T, E>(reps: usize, mut f: impl FnMut() -> Result<T, E>) -> Result<f64, E> {
    std::hint::black_box(f()?);
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        std::hint::black_box(f()?);
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

/// Times refsim and surrogate inference on the same window, warm, on the
/// calling thread. Returns the report and the per-order output pairs.
pub fn run_speed_experiment(
    bundle: &SurrogateBundle,
    cfg: &SpeedConfig,
) -> Result<MetricReport, BenchError> {
    if cfg.repetitions < 1 || cfg.steps < 1 || cfg.orders.is_empty() {
        return Err(BenchError::InvalidArgument("empty speed configuration".into()));
    }
    let sim = SimConfig::with_steps(cfg.dt, cfg.steps);
    let times = Waveform::uniform_grid(cfg.dt, cfg.steps);
    let mut rows = Vec::new();
    for &order in &cfg.orders {
        let net = generate_network(order, cfg.topology, cfg.seed.wrapping_add(order as u64))?;
        let driver = DriverModel::matched_saturating(cfg.vdd, cfg.knee, &net);
        let gains = network_modes(&net)?;
        let oracle = median_seconds(cfg.repetitions, || simulate(&net, &driver, &sim))?;
        let mut per_step = f64::INFINITY;
        for _ in 0..cfg.repetitions {
            per_step = per_step.min(solve_seconds_per_step(&net, &driver, &sim, 2e-3)?);
        }
        let mut evaluations = 0;
        let surrogate = median_seconds(cfg.repetitions, || {
            bundle
                .infer(&gains, driver.kind.label(), &times, cfg.vdd, true)
                .map(|(_, p)| evaluations = p.evaluations())
        })?;
        rows.push(RuntimeRow {
            order,
            oracle_seconds: oracle,
            surrogate_seconds: surrogate,
            speedup: oracle / surrogate,
            oracle_seconds_per_step: per_step,
            surrogate_evaluations: evaluations,
        });
    }
    let fit: Vec<&RuntimeRow> = rows.iter().filter(|r| r.order >= 2).collect();
    let complexity = (fit.len() >= 2).then(|| {
        let xs: Vec<f64> = fit.iter().map(|r| r.order as f64).collect();
        ComplexitySlopes {
            orders: (fit[0].order, fit[fit.len() - 1].order),
            oracle_per_step: log_log_slope(
                &xs,
                &fit.iter().map(|r| r.oracle_seconds_per_step).collect::<Vec<_>>(),
            ),
            surrogate: log_log_slope(&xs, &fit.iter().map(|r| r.surrogate_seconds).collect::<Vec<_>>()),
        }
    });
    let config = serde_json::to_value(cfg)?;
    Ok(MetricReport {
        schema_version: SCHEMA_VERSION,
        experiment: "speed".into(),
        orders: Vec::new(),
        runtimes: rows,
        complexity,
        metadata: ReportMetadata {
            seed: cfg.seed,
            dataset_manifest_sha256: None,
            bundle_sha256: bundle_hash(bundle),
            config_sha256: sha256_hex(config.to_string().as_bytes()),
            config,
            machine: machine_descriptor(),
        },
    })
}

/// One `fig_<label>.csv` per pair with columns `time,golden,predicted`.
pub fn emit_plots(dir: &Path, pairs: &[WaveformPair]) -> Result<Vec<std::path::PathBuf>, BenchError> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for p in pairs {
        let path = dir.join(format!("fig_{}.csv", p.label));
        let mut out = std::io::BufWriter::new(fs::File::create(&path)?);
        writeln!(out, "time,golden,predicted")?;
        for ((t, g), y) in p.times.iter().zip(&p.golden).zip(&p.predicted) {
            writeln!(out, "{t:.12e},{g:.12e},{y:.12e}")?;
        }
        out.flush()?;
        written.push(path);
    }
    Ok(written)
}
