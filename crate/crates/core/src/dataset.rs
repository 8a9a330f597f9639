//! Normalized, order-stratified training data.
//!
//! Each sample pairs the gain-form modes of a random RC network with the
//! reference waveform produced by [`crate::refsim`], both normalized:
//!
//! * voltages are min/max scaled to `[0, 1]` per waveform;
//! * times become standardized `log10(t)`, with mean and deviation taken over
//!   the training split of every order;
//! * rates and gains are divided by the per-sample maxima and sorted by
//!   descending `|Ã|`.
//!
//! Files are newline-delimited JSON, one per order, plus a manifest.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::modal::{self, analytic_step_response, decompose, to_gain_form, GainMode, ModalError};
use crate::netgen::{
    assemble_nodal, extract_transfer_function, generate_network, NetgenError, RcNetwork, Topology,
    MAX_ORDER, MIN_ORDER,
};
use crate::refsim::{simulate, DriverKind, DriverModel, SimConfig, SimError};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
/// Smallest voltage swing accepted by [`normalize_waveform`].
pub const MIN_SWING: f64 = 1e-12;
const MAX_RESAMPLES: usize = 100;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("waveform swing below {MIN_SWING:e} V")]
    DegenerateWaveform,
    #[error("log-time needs t > 0, got {0}")]
    NonPositiveTime(f64),
    #[error("no modes to normalize")]
    EmptyModes,
    #[error("order {0} outside [{MIN_ORDER}, {MAX_ORDER}]")]
    UnsupportedOrder(usize),
    #[error("order {order}: gave up after {MAX_RESAMPLES} resamples")]
    ResampleExhausted { order: usize },
    #[error("dataset has no order-{0} samples")]
    MissingOrder(usize),
    #[error("unsupported dataset format version {0}")]
    VersionMismatch(u32),
    #[error("malformed dataset: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Modal(#[from] ModalError),
    #[error(transparent)]
    Netgen(#[from] NetgenError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mu_t: f64,
    pub sigma_t: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub p_max: f64,
    pub a_max: f64,
}

/// One normalized `(p̃, Ã)` pair, stored as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct NormMode {
    pub rate: f64,
    pub gain: f64,
}

impl From<[f64; 2]> for NormMode {
    fn from([rate, gain]: [f64; 2]) -> Self {
        NormMode { rate, gain }
    }
}

impl From<NormMode> for [f64; 2] {
    fn from(m: NormMode) -> Self {
        [m.rate, m.gain]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    /// 80/10/10 by sample index.
    pub fn of(index: usize, count: usize) -> Split {
        if index * 10 < count * 8 {
            Split::Train
        } else if index * 10 < count * 9 {
            Split::Val
        } else {
            Split::Test
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub index: usize,
    pub seed: u64,
    pub split: Split,
    pub device_label: usize,
    pub order: usize,
    pub topology: Topology,
    pub times: Vec<f64>,
    pub modes: Vec<NormMode>,
    pub target: Vec<f64>,
    pub raw_stats: NormStats,
}

impl TrainingSample {
    /// Normalized log time constant `(log10(1/p) - μ_t) / σ_t` of each mode.
    pub fn mode_log_taus(&self) -> Vec<f64> {
        self.modes
            .iter()
            .map(|m| log_tau(m.rate * self.raw_stats.p_max, &self.raw_stats))
            .collect()
    }

    /// Target voltages in volts.
    pub fn volts(&self) -> Vec<f64> {
        denormalize_waveform(&self.target, self.raw_stats.v_min, self.raw_stats.v_max)
    }
}

/// Standardized log time constant of a mode with decay rate `rate`.
pub fn log_tau(rate: f64, stats: &NormStats) -> f64 {
    (-rate.log10() - stats.mu_t) / stats.sigma_t
}

/// Maps values affinely onto `[0, 1]`; returns them with the extrema.
pub fn normalize_waveform(values: &[f64]) -> Result<(Vec<f64>, f64, f64), DatasetError> {
    let v_min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let v_max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(v_max - v_min >= MIN_SWING) {
        return Err(DatasetError::DegenerateWaveform);
    }
    let span = v_max - v_min;
    let out = values
        .iter()
        .map(|&v| {
            if v == v_max {
                1.0
            } else {
                (v - v_min) / span
            }
        })
        .collect();
    Ok((out, v_min, v_max))
}

pub fn denormalize_waveform(values: &[f64], v_min: f64, v_max: f64) -> Vec<f64> {
    values.iter().map(|&v| v_min + v * (v_max - v_min)).collect()
}

pub fn normalize_times(times: &[f64], mu_t: f64, sigma_t: f64) -> Result<Vec<f64>, DatasetError> {
    times
        .iter()
        .map(|&t| {
            if t > 0.0 {
                Ok((t.log10() - mu_t) / sigma_t)
            } else {
                Err(DatasetError::NonPositiveTime(t))
            }
        })
        .collect()
}

/// Mean and population standard deviation of `log10(t)`.
pub fn log_time_stats<'a>(sets: impl IntoIterator<Item = &'a [f64]>) -> (f64, f64) {
    let mut n = 0usize;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for set in sets {
        for &t in set {
            let l = t.log10();
            n += 1;
            sum += l;
            sum_sq += l * l;
        }
    }
    let mean = sum / n as f64;
    let var = (sum_sq / n as f64 - mean * mean).max(0.0);
    (mean, var.sqrt())
}

/// Divides by the maxima and sorts by `|Ã|` descending, then `p̃` descending.
/// Returns the normalized pairs with `(p_max, a_max)`.
pub fn normalize_modes(modes: &[GainMode]) -> Result<(Vec<NormMode>, f64, f64), DatasetError> {
    if modes.is_empty() {
        return Err(DatasetError::EmptyModes);
    }
    let p_max = modes.iter().map(|m| m.rate).fold(0.0, f64::max);
    let a_max = modes.iter().map(|m| m.gain.abs()).fold(0.0, f64::max);
    let mut out: Vec<NormMode> = modes
        .iter()
        .map(|m| NormMode {
            rate: m.rate / p_max,
            gain: m.gain / a_max,
        })
        .collect();
    out.sort_by(|a, b| {
        b.gain
            .abs()
            .total_cmp(&a.gain.abs())
            .then(b.rate.total_cmp(&a.rate))
    });
    Ok((out, p_max, a_max))
}

/// Gain-form modes of a network's input-to-output transfer function.
pub fn network_modes(net: &RcNetwork) -> Result<Vec<GainMode>, DatasetError> {
    let h = extract_transfer_function(&assemble_nodal(net)?)?;
    Ok(to_gain_form(&decompose(&h)?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub orders: Vec<usize>,
    pub samples_per_order: usize,
    pub seed: u64,
    pub topologies: Vec<Topology>,
    pub devices: Vec<DriverKind>,
    pub vdd: f64,
    /// Knee voltage of the matched saturating driver.
    pub knee: f64,
    /// Recording grid.
    pub sim: SimConfig,
    /// Integration substeps per recorded step; even, so that `dt/2` lies on
    /// the integration grid.
    pub substeps: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            orders: (1..=9).collect(),
            samples_per_order: 200,
            seed: 0,
            topologies: vec![Topology::Ladder, Topology::Tree],
            devices: vec![DriverKind::IdealStep, DriverKind::Saturating],
            vdd: 1.1,
            knee: 0.6,
            sim: SimConfig::default(),
            substeps: 4,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if let Some(&bad) = self
            .orders
            .iter()
            .find(|o| !(MIN_ORDER..=MAX_ORDER).contains(o))
        {
            return Err(DatasetError::UnsupportedOrder(bad));
        }
        let ok = self.samples_per_order > 0
            && !self.topologies.is_empty()
            && !self.devices.is_empty()
            && self.vdd > 0.0
            && self.knee > 0.0
            && self.substeps > 0
            && self.substeps % 2 == 0;
        if !ok {
            return Err(DatasetError::Corrupt("invalid dataset configuration".into()));
        }
        self.sim.validate()?;
        Ok(())
    }

    pub fn driver(&self, kind: DriverKind, net: &RcNetwork) -> DriverModel {
        match kind {
            DriverKind::IdealStep => DriverModel::ideal_step(self.vdd),
            DriverKind::Saturating => DriverModel::matched_saturating(self.vdd, self.knee, net),
        }
    }

    /// Recorded grid with the `t = 0` point moved to `dt/2`.
    pub fn record_times(&self) -> Vec<f64> {
        let mut t = crate::waveform::Waveform::uniform_grid(self.sim.dt, self.sim.steps());
        t[0] = 0.5 * self.sim.dt;
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderSummary {
    pub order: usize,
    pub file: String,
    pub count: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub resamples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub mu_t: f64,
    pub sigma_t: f64,
    pub config: DatasetConfig,
    pub orders: Vec<OrderSummary>,
    /// Mean peak deviation of saturating-driver waveforms from the linear
    /// response, as a fraction of vdd.
    pub mean_nonlinear_deviation: f64,
    /// Smallest `V(t_end) / (vdd · H(0))` over all samples.
    pub min_settling: f64,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    /// Samples grouped by order, in manifest order.
    pub orders: Vec<(usize, Vec<TrainingSample>)>,
}

impl Dataset {
    pub fn order(&self, order: usize) -> Result<&[TrainingSample], DatasetError> {
        self.orders
            .iter()
            .find(|(o, _)| *o == order)
            .map(|(_, s)| s.as_slice())
            .ok_or(DatasetError::MissingOrder(order))
    }

    pub fn split(&self, order: usize, split: Split) -> Result<Vec<&TrainingSample>, DatasetError> {
        Ok(self.order(order)?.iter().filter(|s| s.split == split).collect())
    }

    pub fn write(&self, dir: &Path) -> Result<(), DatasetError> {
        fs::create_dir_all(dir)?;
        for (summary, (_, samples)) in self.manifest.orders.iter().zip(&self.orders) {
            let mut out = BufWriter::new(fs::File::create(dir.join(&summary.file))?);
            for s in samples {
                serde_json::to_writer(&mut out, s)?;
                out.write_all(b"\n")?;
            }
            out.flush()?;
        }
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset, DatasetError> {
        let manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        if manifest.version != FORMAT_VERSION {
            return Err(DatasetError::VersionMismatch(manifest.version));
        }
        let mut orders = Vec::new();
        for summary in &manifest.orders {
            let reader = BufReader::new(fs::File::open(dir.join(&summary.file))?);
            let mut samples = Vec::with_capacity(summary.count);
            for line in reader.lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let s: TrainingSample = serde_json::from_str(&line)?;
                if s.order != summary.order || s.modes.len() != s.order {
                    return Err(DatasetError::Corrupt(format!(
                        "sample {} in {} has the wrong order",
                        s.index, summary.file
                    )));
                }
                samples.push(s);
            }
            if samples.len() != summary.count {
                return Err(DatasetError::Corrupt(format!(
                    "{} holds {} samples, manifest says {}",
                    summary.file,
                    samples.len(),
                    summary.count
                )));
            }
            orders.push((summary.order, samples));
        }
        Ok(Dataset { manifest, orders })
    }
}

struct RawSample {
    index: usize,
    seed: u64,
    device: DriverKind,
    topology: Topology,
    modes: Vec<NormMode>,
    p_max: f64,
    a_max: f64,
    target: Vec<f64>,
    v_min: f64,
    v_max: f64,
    resamples: usize,
    deviation: Option<f64>,
    settling: f64,
}

/// Generates every requested order in memory. Deterministic in `cfg`.
pub fn generate(cfg: &DatasetConfig) -> Result<Dataset, DatasetError> {
    cfg.validate()?;
    let times = cfg.record_times();
    let jobs: Vec<(usize, usize)> = cfg
        .orders
        .iter()
        .flat_map(|&o| (0..cfg.samples_per_order).map(move |i| (o, i)))
        .collect();
    let raw: Vec<RawSample> = jobs
        .par_iter()
        .map(|&(order, index)| generate_one(cfg, order, index, &times))
        .collect::<Result<_, _>>()?;

    // Second pass: global log-time statistics over the training split.
    let train_sets = raw
        .iter()
        .enumerate()
        .filter(|(k, _)| Split::of(k % cfg.samples_per_order, cfg.samples_per_order) == Split::Train)
        .map(|_| times.as_slice());
    let (mu_t, sigma_t) = log_time_stats(train_sets);
    let norm_times = normalize_times(&times, mu_t, sigma_t)?;

    let mut orders = Vec::new();
    let mut summaries = Vec::new();
    let mut deviations = Vec::new();
    let mut min_settling = f64::INFINITY;
    for (chunk, &order) in raw.chunks(cfg.samples_per_order).zip(&cfg.orders) {
        let mut samples = Vec::with_capacity(chunk.len());
        let mut resamples = 0;
        for r in chunk {
            resamples += r.resamples;
            deviations.extend(r.deviation);
            min_settling = min_settling.min(r.settling);
            samples.push(TrainingSample {
                index: r.index,
                seed: r.seed,
                split: Split::of(r.index, cfg.samples_per_order),
                device_label: r.device.label(),
                order,
                topology: r.topology,
                times: norm_times.clone(),
                modes: r.modes.clone(),
                target: r.target.clone(),
                raw_stats: NormStats {
                    mu_t,
                    sigma_t,
                    v_min: r.v_min,
                    v_max: r.v_max,
                    p_max: r.p_max,
                    a_max: r.a_max,
                },
            });
        }
        if resamples > 0 {
            log::info!("order {order}: {resamples} resampled draws");
        }
        let count_in = |s: Split| samples.iter().filter(|x| x.split == s).count();
        summaries.push(OrderSummary {
            order,
            file: format!("order_{order}.ndjson"),
            count: samples.len(),
            train: count_in(Split::Train),
            val: count_in(Split::Val),
            test: count_in(Split::Test),
            resamples,
        });
        orders.push((order, samples));
    }
    let mean_nonlinear_deviation = if deviations.is_empty() {
        0.0
    } else {
        deviations.iter().sum::<f64>() / deviations.len() as f64
    };
    Ok(Dataset {
        manifest: Manifest {
            version: FORMAT_VERSION,
            seed: cfg.seed,
            mu_t,
            sigma_t,
            config: cfg.clone(),
            orders: summaries,
            mean_nonlinear_deviation,
            min_settling,
        },
        orders,
    })
}

/// Generates and writes a dataset; returns its manifest.
pub fn build_dataset(cfg: &DatasetConfig, dir: &Path) -> Result<Manifest, DatasetError> {
    let data = generate(cfg)?;
    data.write(dir)?;
    Ok(data.manifest)
}

fn generate_one(
    cfg: &DatasetConfig,
    order: usize,
    index: usize,
    times: &[f64],
) -> Result<RawSample, DatasetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(((order as u64) << 32) | index as u64);
    for attempt in 0..MAX_RESAMPLES {
        let seed = rng.next_u64();
        let topology = cfg.topologies[rng.gen_range(0..cfg.topologies.len())];
        let device = cfg.devices[rng.gen_range(0..cfg.devices.len())];
        let net = generate_network(order, topology, seed)?;
        let gains = match network_modes(&net) {
            Ok(g) => g,
            Err(DatasetError::Modal(
                ModalError::RepeatedPoleUnsupported | ModalError::ComplexPoleUnsupported,
            )) => continue,
            Err(e) => return Err(e),
        };
        let driver = cfg.driver(device, &net);
        let fine = SimConfig {
            dt: cfg.sim.dt / cfg.substeps as f64,
            ..cfg.sim
        };
        let wave = simulate(&net, &driver, &fine)?;
        // Extrema over the whole trace, which starts at rest; samples on the
        // recording grid with the first point at dt/2.
        let (fine_norm, v_min, v_max) = match normalize_waveform(&wave.values) {
            Ok(x) => x,
            Err(DatasetError::DegenerateWaveform) => continue,
            Err(e) => return Err(e),
        };
        let pick = |trace: &[f64]| -> Vec<f64> {
            let mut out: Vec<f64> = trace
                .iter()
                .step_by(cfg.substeps)
                .copied()
                .take(times.len())
                .collect();
            out[0] = trace[cfg.substeps / 2];
            out
        };
        let recorded = pick(&wave.values);
        let target = pick(&fine_norm);
        let (modes, p_max, a_max) = normalize_modes(&gains)?;
        let dc: f64 = gains.iter().map(|g| g.gain).sum();
        let settling = recorded.last().copied().unwrap_or(0.0) / (cfg.vdd * dc);
        let deviation = match device {
            DriverKind::Saturating => {
                let lin = analytic_step_response(&modal::from_gain_form(&gains), times)?;
                let peak = recorded
                    .iter()
                    .zip(&lin.values)
                    .map(|(v, l)| (v - cfg.vdd * l).abs())
                    .fold(0.0, f64::max);
                Some(peak / cfg.vdd)
            }
            DriverKind::IdealStep => None,
        };
        return Ok(RawSample {
            index,
            seed,
            device,
            topology,
            modes,
            p_max,
            a_max,
            target,
            v_min,
            v_max,
            resamples: attempt,
            deviation,
            settling,
        });
    }
    Err(DatasetError::ResampleExhausted { order })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn waveform_extremes_and_midpoint() {
        let (v, lo, hi) = normalize_waveform(&[0.0, 0.55, 1.1]).unwrap();
        assert_eq!(v, vec![0.0, 0.5, 1.0]);
        assert_eq!((lo, hi), (0.0, 1.1));
        assert!(matches!(
            normalize_waveform(&[0.3, 0.3]),
            Err(DatasetError::DegenerateWaveform)
        ));
    }

    #[test]
    fn times_examples() {
        let t = normalize_times(&[1e-9, 1e-8], -9.0, 1.0).unwrap();
        assert!(t[0].abs() < 1e-12 && (t[1] - 1.0).abs() < 1e-12);
        assert!(matches!(
            normalize_times(&[0.0], -9.0, 1.0),
            Err(DatasetError::NonPositiveTime(_))
        ));
    }

    #[test]
    fn time_stats_standardize() {
        let times: Vec<f64> = (1..=50).map(|k| k as f64 * 1e-11).collect();
        let (mu, sigma) = log_time_stats([times.as_slice()]);
        let z = normalize_times(&times, mu, sigma).unwrap();
        let mean = z.iter().sum::<f64>() / z.len() as f64;
        let var = z.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / z.len() as f64;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn modes_example() {
        let g = |rate, gain| GainMode { rate, gain };
        let (m, p_max, a_max) = normalize_modes(&[g(2.0, 0.5), g(4.0, -1.0)]).unwrap();
        assert_eq!(m, vec![NormMode { rate: 1.0, gain: -1.0 }, NormMode { rate: 0.5, gain: 0.5 }]);
        assert_eq!((p_max, a_max), (4.0, 1.0));
        let (single, _, _) = normalize_modes(&[g(3.0, -0.2)]).unwrap();
        assert_eq!(single, vec![NormMode { rate: 1.0, gain: -1.0 }]);
        assert!(matches!(normalize_modes(&[]), Err(DatasetError::EmptyModes)));
    }

    #[test]
    fn split_proportions() {
        let counts = (0..200).fold([0; 3], |mut acc, i| {
            acc[Split::of(i, 200) as usize] += 1;
            acc
        });
        assert_eq!(counts, [160, 20, 20]);
    }

    #[test]
    fn small_build_is_consistent() {
        let cfg = DatasetConfig {
            orders: vec![1, 3],
            samples_per_order: 10,
            seed: 5,
            sim: SimConfig {
                t_end: 5e-9,
                ..SimConfig::default()
            },
            ..DatasetConfig::default()
        };
        let data = generate(&cfg).unwrap();
        for (order, samples) in &data.orders {
            assert_eq!(samples.len(), 10);
            for s in samples {
                assert_eq!(s.modes.len(), *order);
                assert!(s.target.iter().all(|v| (0.0..=1.0).contains(v)));
                assert!(s.modes.iter().all(|m| m.rate > 0.0 && m.rate <= 1.0));
                assert!(s.modes.iter().all(|m| m.gain.abs() > 0.0 && m.gain.abs() <= 1.0));
                assert_eq!(s.times.len(), s.target.len());
            }
        }
        assert_eq!(data.manifest.orders[1].train, 8);
    }
}
