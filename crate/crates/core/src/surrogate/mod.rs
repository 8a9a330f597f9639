//! Modal neural surrogate.
//!
//! A base predictor `f_θ` learns the normalized step response of a single
//! mode. For an order-`N` system the prediction is
//!
//! ```text
//! V̂(t) = Σ_i A_i · f_θ(mode_i, t)  +  Σ_j e_φj(j, mode_j, mode_{j-1}, t)
//! ```
//!
//! where each residual module `e_φj` was fitted to what the terms before it
//! left unexplained on order-`j` data. Inference costs exactly `N` base and
//! `N` residual evaluations.

pub mod model;
pub mod tape;
pub mod train;

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{log_tau, normalize_modes, DatasetError, NormMode, NormStats, TrainingSample};
use crate::modal::GainMode;
use crate::waveform::Waveform;

pub use model::{ModelConfig, Module};
pub use train::{assemble_bundle, grad_check, train, train_base, train_residual_cascade, Batch, TrainConfig, TrainLog};

use model::{DEVICES, INDICES, TOKEN_FEATURES};
use tape::Tensor;

pub const BUNDLE_VERSION: u32 = 1;
/// Highest order index the token embedding can represent.
pub const MAX_INDEX: usize = INDICES - 1;

#[derive(Debug, thiserror::Error)]
pub enum SurrogateError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss in {module} at epoch {epoch}")]
    NonFiniteLoss { module: String, epoch: usize },
    #[error("no order-{0} training data")]
    MissingOrderDataset(usize),
    #[error("order {order} exceeds the {modules} trained residual modules")]
    OrderExceedsCascade { order: usize, modules: usize },
    #[error("unsupported bundle version {0}")]
    VersionMismatch(u32),
    #[error("corrupt bundle: {0}")]
    CorruptFile(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Global log-time statistics the bundle was trained with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeStats {
    pub mu_t: f64,
    pub sigma_t: f64,
}

impl TimeStats {
    pub fn normalize(&self, t: f64) -> f64 {
        (t.log10() - self.mu_t) / self.sigma_t
    }

    fn as_norm(&self) -> NormStats {
        NormStats {
            mu_t: self.mu_t,
            sigma_t: self.sigma_t,
            v_min: 0.0,
            v_max: 1.0,
            p_max: 1.0,
            a_max: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualModule {
    pub index: usize,
    pub module: Module,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub seed: u64,
    pub dataset_seed: u64,
    pub base: TrainLog,
    pub residuals: Vec<TrainLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateBundle {
    pub version: u32,
    pub config: SurrogateConfig,
    pub time_stats: TimeStats,
    pub base: Module,
    pub residuals: Vec<ResidualModule>,
    pub metadata: TrainingMetadata,
}

/// Numeric mode features: normalized rate, normalized gain, log time constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeFeatures {
    pub rate: f64,
    pub gain: f64,
    pub log_tau: f64,
}

enum TokenKind {
    Device = 0,
    Current = 1,
    Previous = 2,
}

fn token(kind: TokenKind, device: usize, index: Option<usize>, mode: Option<ModeFeatures>) -> [f64; TOKEN_FEATURES] {
    let mut row = [0.0; TOKEN_FEATURES];
    if matches!(kind, TokenKind::Device) {
        row[device.min(DEVICES - 1)] = 1.0;
        if let Some(i) = index {
            row[DEVICES + i.min(MAX_INDEX)] = 1.0;
        }
    }
    row[DEVICES + INDICES + kind as usize] = 1.0;
    if let Some(m) = mode {
        let at = DEVICES + INDICES + 3;
        row[at] = m.rate;
        row[at + 1] = m.gain;
        row[at + 2] = m.log_tau;
    }
    row
}

/// Base-predictor tokens for one mode. The mode is presented as its own
/// first-order system (`p̃ = Ã = 1`) on a time axis measured from its own
/// log time constant; its gain scales the output.
pub fn base_tokens(device: usize) -> Vec<f64> {
    let mode = ModeFeatures {
        rate: 1.0,
        gain: 1.0,
        log_tau: 0.0,
    };
    let mut t = token(TokenKind::Device, device, None, None).to_vec();
    t.extend(token(TokenKind::Current, device, None, Some(mode)));
    t
}

/// Residual-module tokens; `previous = None` is the `(0, 0)` sentinel.
/// Log time constants are taken relative to `current`, which anchors the
/// module's time axis.
pub fn residual_tokens(
    device: usize,
    index: usize,
    current: ModeFeatures,
    previous: Option<ModeFeatures>,
) -> Vec<f64> {
    let sentinel = ModeFeatures {
        rate: 0.0,
        gain: 0.0,
        log_tau: 0.0,
    };
    let relative = |m: ModeFeatures| ModeFeatures {
        log_tau: m.log_tau - current.log_tau,
        ..m
    };
    let mut t = token(TokenKind::Device, device, Some(index), None).to_vec();
    t.extend(token(TokenKind::Current, device, None, Some(relative(current))));
    t.extend(token(
        TokenKind::Previous,
        device,
        None,
        Some(previous.map_or(sentinel, relative)),
    ));
    t
}

/// Normalized conditioning for one system.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemInput {
    pub device: usize,
    /// Sorted by descending `|Ã|`.
    pub modes: Vec<NormMode>,
    pub p_max: f64,
    pub a_max: f64,
}

impl SystemInput {
    pub fn from_sample(s: &TrainingSample) -> Self {
        SystemInput {
            device: s.device_label,
            modes: s.modes.clone(),
            p_max: s.raw_stats.p_max,
            a_max: s.raw_stats.a_max,
        }
    }

    pub fn from_gains(device: usize, gains: &[GainMode]) -> Result<Self, SurrogateError> {
        let (modes, p_max, a_max) = normalize_modes(gains)?;
        Ok(SystemInput {
            device,
            modes,
            p_max,
            a_max,
        })
    }

    pub fn order(&self) -> usize {
        self.modes.len()
    }

    fn features(&self, stats: &TimeStats) -> Vec<ModeFeatures> {
        let norm = stats.as_norm();
        self.modes
            .iter()
            .map(|m| ModeFeatures {
                rate: m.rate,
                gain: m.gain,
                log_tau: log_tau(m.rate * self.p_max, &norm),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Normalized voltage per queried time.
    pub values: Vec<f64>,
    /// `partials[k]`: base sum plus the first `k` residual terms.
    pub partials: Vec<Vec<f64>>,
    pub base_evaluations: usize,
    pub residual_evaluations: usize,
}

impl Prediction {
    pub fn evaluations(&self) -> usize {
        self.base_evaluations + self.residual_evaluations
    }
}

impl SurrogateBundle {
    pub fn parameter_count(&self) -> usize {
        self.base.parameter_count()
            + self.residuals.iter().map(|r| r.module.parameter_count()).sum::<usize>()
    }

    /// Runs the cascade on normalized inputs and normalized times.
    pub fn predict(
        &self,
        input: &SystemInput,
        times: &[f64],
        extrapolate: bool,
    ) -> Result<Prediction, SurrogateError> {
        let n = input.order();
        if n > self.residuals.len() && (!extrapolate || self.residuals.is_empty()) {
            return Err(SurrogateError::OrderExceedsCascade {
                order: n,
                modules: self.residuals.len(),
            });
        }
        predict_with(&self.base, &self.residuals, self.time_stats, input, times, n)
    }

    /// Cascade prediction in volts for raw gain-form modes, de-normalized to
    /// the swing `[0, vdd · Σ A]`. The network starts at rest, so `t = 0`
    /// maps to exactly zero volts.
    pub fn infer(
        &self,
        gains: &[GainMode],
        device: usize,
        times: &[f64],
        vdd: f64,
        extrapolate: bool,
    ) -> Result<(Waveform, Prediction), SurrogateError> {
        if times.iter().any(|&t| !(t >= 0.0)) {
            return Err(SurrogateError::ShapeMismatch("times must be nonnegative".into()));
        }
        let input = SystemInput::from_gains(device, gains)?;
        let dt_half = times.get(1).map_or(1e-12, |t1| 0.5 * t1);
        let tn: Vec<f64> = times
            .iter()
            .map(|&t| self.time_stats.normalize(if t > 0.0 { t } else { dt_half }))
            .collect();
        let pred = self.predict(&input, &tn, extrapolate)?;
        let swing = vdd * gains.iter().map(|g| g.gain).sum::<f64>();
        let values = times
            .iter()
            .zip(&pred.values)
            .map(|(&t, v)| if t > 0.0 { v * swing } else { 0.0 })
            .collect();
        Ok((
            Waveform {
                times: times.to_vec(),
                values,
            },
            pred,
        ))
    }

    pub fn save(&self, path: &Path) -> Result<(), SurrogateError> {
        let text = serde_json::to_string(self)
            .map_err(|e| SurrogateError::CorruptFile(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SurrogateError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn from_json(text: &str) -> Result<Self, SurrogateError> {
        #[derive(Deserialize)]
        struct Header {
            version: u32,
        }
        let header: Header = serde_json::from_str(text)
            .map_err(|e| SurrogateError::CorruptFile(e.to_string()))?;
        if header.version != BUNDLE_VERSION {
            return Err(SurrogateError::VersionMismatch(header.version));
        }
        let bundle: SurrogateBundle =
            serde_json::from_str(text).map_err(|e| SurrogateError::CorruptFile(e.to_string()))?;
        bundle.check()?;
        Ok(bundle)
    }

    fn check(&self) -> Result<(), SurrogateError> {
        let expected = |m: &Module| Module::new(m.config, 0);
        for (name, m) in std::iter::once(("base", &self.base))
            .chain(self.residuals.iter().map(|r| ("residual", &r.module)))
        {
            let reference = expected(m);
            let shapes_match = reference.params.len() == m.params.len()
                && reference
                    .params
                    .iter()
                    .zip(&m.params)
                    .all(|(a, b)| a.shape == b.shape && b.data.len() == b.shape[0] * b.shape[1]);
            if !shapes_match {
                return Err(SurrogateError::CorruptFile(format!(
                    "{name} module parameters do not match its config"
                )));
            }
        }
        for (k, r) in self.residuals.iter().enumerate() {
            if r.index != k + 1 {
                return Err(SurrogateError::CorruptFile("residual modules out of order".into()));
            }
        }
        Ok(())
    }
}

/// Base predictor alone: `Σ_i A_i · f_θ(mode_i, t)` on normalized times.
pub fn predict_base(
    base: &Module,
    stats: TimeStats,
    input: &SystemInput,
    times: &[f64],
) -> Result<Vec<f64>, SurrogateError> {
    Ok(predict_with(base, &[], stats, input, times, 0)?.values)
}

/// Base sum plus the first `terms` residual terms. Indices past the last
/// module reuse it.
pub(crate) fn predict_with(
    base: &Module,
    residuals: &[ResidualModule],
    stats: TimeStats,
    input: &SystemInput,
    times: &[f64],
    terms: usize,
) -> Result<Prediction, SurrogateError> {
    let n = input.order();
    if n == 0 {
        return Err(SurrogateError::ShapeMismatch("system has no modes".into()));
    }
    if terms > n || (terms > 0 && residuals.is_empty()) {
        return Err(SurrogateError::OrderExceedsCascade {
            order: terms,
            modules: residuals.len(),
        });
    }
    let feats = input.features(&stats);

    // N base evaluations, batched into one pass.
    let mut tokens = Vec::with_capacity(n * 2 * TOKEN_FEATURES);
    for _ in &feats {
        tokens.extend(base_tokens(input.device));
    }
    let shifts: Vec<f64> = feats.iter().map(|f| f.log_tau).collect();
    let base_out = base.predict(
        &Tensor::from_vec(2 * n, TOKEN_FEATURES, tokens),
        2,
        times,
        &shifts,
    );
    let mut sum = vec![0.0; times.len()];
    for (out, m) in base_out.iter().zip(&input.modes) {
        let scale = m.gain * input.a_max;
        for (s, v) in sum.iter_mut().zip(out) {
            *s += scale * v;
        }
    }

    // N residual evaluations, grouped by module.
    let module_of = |j: usize| j.min(residuals.len());
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for j in 1..=terms {
        let m = module_of(j);
        match groups.iter_mut().find(|(k, _)| *k == m) {
            Some((_, js)) => js.push(j),
            None => groups.push((m, vec![j])),
        }
    }
    let outputs: Vec<Vec<Vec<f64>>> = groups
        .par_iter()
        .map(|(m, js)| {
            let module = &residuals[m - 1];
            let mut tokens = Vec::with_capacity(js.len() * 3 * TOKEN_FEATURES);
            for &j in js {
                let prev = (j > 1).then(|| feats[j - 2]);
                tokens.extend(residual_tokens(input.device, module.index, feats[j - 1], prev));
            }
            let shifts: Vec<f64> = js.iter().map(|&j| feats[j - 1].log_tau).collect();
            module.module.predict(
                &Tensor::from_vec(3 * js.len(), TOKEN_FEATURES, tokens),
                3,
                times,
                &shifts,
            )
        })
        .collect();
    let mut by_index: Vec<Option<&Vec<f64>>> = vec![None; terms + 1];
    for ((_, js), outs) in groups.iter().zip(&outputs) {
        for (&j, o) in js.iter().zip(outs) {
            by_index[j] = Some(o);
        }
    }
    let mut partials = Vec::with_capacity(terms + 1);
    partials.push(sum.clone());
    for term in by_index.iter().skip(1) {
        let term = term.expect("every index evaluated");
        for (s, v) in sum.iter_mut().zip(term) {
            *s += v;
        }
        partials.push(sum.clone());
    }
    Ok(Prediction {
        values: sum,
        partials,
        base_evaluations: n,
        residual_evaluations: terms,
    })
}
