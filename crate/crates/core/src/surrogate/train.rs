//! Training: AdamW on mean squared error, early stopping on validation loss,
//! and the residual cascade built one frozen module at a time.

use std::borrow::Cow;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Module, TOKEN_FEATURES};
use super::tape::{Tape, Tensor};
use super::{
    base_tokens, predict_with, residual_tokens, ResidualModule, SurrogateBundle, SurrogateConfig,
    SurrogateError, SystemInput, TimeStats, TrainingMetadata, BUNDLE_VERSION,
};
use crate::dataset::{Dataset, Split, TrainingSample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_samples: usize,
    pub batch_times: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
    /// Validation uses every `val_stride`-th grid point.
    pub val_stride: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_samples: 32,
            batch_times: 128,
            max_epochs: 200,
            patience: 20,
            grad_clip: 1.0,
            val_stride: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub module: String,
    /// Validation loss of the untrained module.
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochLog>,
    /// 0 when no epoch beat the untrained module.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub parameters: usize,
}

/// One regression example: encoder tokens, the full normalized time grid
/// with the shift that anchors it, the target on that grid, and a constant
/// output scale.
#[derive(Debug, Clone)]
pub struct Example<'a> {
    pub tokens: Vec<f64>,
    pub times: &'a [f64],
    pub shift: f64,
    pub target: Cow<'a, [f64]>,
    pub scale: f64,
}

/// A flattened minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tokens: Tensor,
    pub seq: usize,
    pub times: Vec<f64>,
    pub per_item: usize,
    pub target: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Batch {
    fn from_examples(examples: &[&Example], seq: usize, picks: &[Vec<usize>]) -> Batch {
        let per_item = picks[0].len();
        let mut tokens = Vec::with_capacity(examples.len() * seq * TOKEN_FEATURES);
        let mut times = Vec::with_capacity(examples.len() * per_item);
        let mut target = Vec::with_capacity(times.capacity());
        let mut scale = Vec::with_capacity(times.capacity());
        for (ex, idx) in examples.iter().zip(picks) {
            tokens.extend_from_slice(&ex.tokens);
            for &k in idx {
                times.push(ex.times[k] - ex.shift);
                target.push(ex.target[k]);
                scale.push(ex.scale);
            }
        }
        Batch {
            tokens: Tensor::from_vec(examples.len() * seq, TOKEN_FEATURES, tokens),
            seq,
            times,
            per_item,
            target,
            scale,
        }
    }
}

/// Loss and per-parameter gradients for one batch.
pub fn loss_and_grads(module: &Module, batch: &Batch) -> (f64, Vec<Option<Tensor>>) {
    let mut tape = Tape::new();
    let out = module.forward(&mut tape, &batch.tokens, batch.seq, &batch.times, batch.per_item);
    let scaled = tape.row_scale(out, batch.scale.clone());
    let loss = tape.mse(scaled, batch.target.clone());
    let grads = tape.backward(loss, module.params.len());
    (tape.value(loss).data[0], grads)
}

fn loss_only(module: &Module, batch: &Batch) -> f64 {
    let mut tape = Tape::new();
    let out = module.forward(&mut tape, &batch.tokens, batch.seq, &batch.times, batch.per_item);
    let scaled = tape.row_scale(out, batch.scale.clone());
    let loss = tape.mse(scaled, batch.target.clone());
    tape.value(loss).data[0]
}

/// Largest relative gap between reverse-mode gradients and central
/// differences over `count` randomly chosen scalar parameters.
pub fn grad_check(module: &Module, batch: &Batch, epsilon: f64, count: usize, seed: u64) -> f64 {
    assert!((1e-7..=1e-3).contains(&epsilon), "epsilon outside [1e-7, 1e-3]");
    let (_, grads) = loss_and_grads(module, batch);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = module.parameter_count();
    let mut offsets = Vec::with_capacity(module.params.len());
    let mut acc = 0;
    for p in &module.params {
        offsets.push(acc);
        acc += p.data.len();
    }
    let mut worst = 0.0_f64;
    for flat in index::sample(&mut rng, total, count.min(total)) {
        let p = offsets.partition_point(|&o| o <= flat) - 1;
        let k = flat - offsets[p];
        let analytic = grads[p].as_ref().map_or(0.0, |g| g.data[k]);
        let mut probe = module.clone();
        probe.params[p].data[k] += epsilon;
        let up = loss_only(&probe, batch);
        probe.params[p].data[k] -= 2.0 * epsilon;
        let down = loss_only(&probe, batch);
        let numeric = (up - down) / (2.0 * epsilon);
        let denom = analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    worst
}

/// Gradient magnitude below which differences are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    fn new(module: &Module) -> Self {
        let zeros: Vec<Vec<f64>> = module.params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        AdamW {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, module: &mut Module, grads: &[Option<Tensor>], cfg: &TrainConfig) {
        self.t += 1;
        let norm = grads
            .iter()
            .flatten()
            .flat_map(|g| g.data.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        let clip = if norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for (i, p) in module.params.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let decay = if p.decays() { cfg.learning_rate * cfg.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.data.len() {
                let gk = g.data[k] * clip;
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p.data[k] -= decay * p.data[k] + cfg.learning_rate * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
    }
}

fn validation_loss(module: &Module, seq: usize, val: &[Example], stride: usize) -> f64 {
    if val.is_empty() {
        return f64::NAN;
    }
    let idx: Vec<usize> = (0..val[0].times.len()).step_by(stride.max(1)).collect();
    let mut total = 0.0;
    let mut count = 0usize;
    // Examples sharing a grid are evaluated together.
    let per_pass = (super::model::INFERENCE_ROWS / idx.len()).max(1);
    for group in val.chunks(per_pass) {
        let refs: Vec<&Example> = group.iter().collect();
        let picks = vec![idx.clone(); refs.len()];
        let batch = Batch::from_examples(&refs, seq, &picks);
        total += loss_only(module, &batch) * batch.target.len() as f64;
        count += batch.target.len();
    }
    total / count as f64
}

/// Fits `module` to `train`, keeping the parameters of the best validation
/// epoch (or the initial ones if nothing improved).
pub fn fit(
    name: &str,
    mut module: Module,
    seq: usize,
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Module, TrainLog), SurrogateError> {
    if train.is_empty() {
        return Err(SurrogateError::InvalidConfig(format!("{name}: no training examples")));
    }
    let grid = train[0].times.len();
    if train.iter().chain(val).any(|e| e.times.len() != grid || e.target.len() != grid) {
        return Err(SurrogateError::ShapeMismatch(format!("{name}: ragged time grids")));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = AdamW::new(&module);
    let initial = validation_loss(&module, seq, val, cfg.val_stride);
    let mut log = TrainLog {
        module: name.to_string(),
        initial_val_loss: initial,
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_loss: initial,
        parameters: module.parameter_count(),
    };
    let mut best = module.clone();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let per_item = cfg.batch_times.min(grid);
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_samples) {
            let refs: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let picks: Vec<Vec<usize>> = refs
                .iter()
                .map(|_| index::sample(&mut rng, grid, per_item).into_vec())
                .collect();
            let batch = Batch::from_examples(&refs, seq, &picks);
            let (loss, grads) = loss_and_grads(&module, &batch);
            if !loss.is_finite() {
                return Err(SurrogateError::NonFiniteLoss {
                    module: name.to_string(),
                    epoch,
                });
            }
            opt.step(&mut module, &grads, cfg);
            sum += loss;
            steps += 1;
        }
        let val_loss = if val.is_empty() {
            sum / steps as f64
        } else {
            validation_loss(&module, seq, val, cfg.val_stride)
        };
        if !val_loss.is_finite() {
            return Err(SurrogateError::NonFiniteLoss {
                module: name.to_string(),
                epoch,
            });
        }
        log.epochs.push(EpochLog {
            epoch,
            train_loss: sum / steps as f64,
            val_loss,
        });
        log::debug!("{name} epoch {epoch}: train {:.3e} val {val_loss:.3e}", sum / steps as f64);
        if val_loss < log.best_val_loss || log.best_val_loss.is_nan() {
            log.best_val_loss = val_loss;
            log.best_epoch = epoch;
            best = module.clone();
        } else if epoch - log.best_epoch >= cfg.patience {
            break;
        }
    }
    log::info!(
        "{name}: best val {:.3e} at epoch {} of {} ({:.1}s)",
        log.best_val_loss,
        log.best_epoch,
        log.epochs.len(),
        start.elapsed().as_secs_f64()
    );
    Ok((best, log))
}

/// Takes `steps` optimizer steps on a single batch; returns the loss before
/// each step.
pub fn fit_batch(module: &mut Module, batch: &Batch, cfg: &TrainConfig, steps: usize) -> Vec<f64> {
    let mut opt = AdamW::new(module);
    (0..steps)
        .map(|_| {
            let (loss, grads) = loss_and_grads(module, batch);
            opt.step(module, &grads, cfg);
            loss
        })
        .collect()
}

fn split_samples(data: &Dataset, order: usize) -> Result<(Vec<&TrainingSample>, Vec<&TrainingSample>), SurrogateError> {
    let samples = data.order(order).map_err(|_| SurrogateError::MissingOrderDataset(order))?;
    let train: Vec<_> = samples.iter().filter(|s| s.split == Split::Train).collect();
    let val: Vec<_> = samples.iter().filter(|s| s.split == Split::Val).collect();
    if train.is_empty() {
        return Err(SurrogateError::MissingOrderDataset(order));
    }
    Ok((train, val))
}

fn time_stats(data: &Dataset) -> TimeStats {
    TimeStats {
        mu_t: data.manifest.mu_t,
        sigma_t: data.manifest.sigma_t,
    }
}

/// Trains the single-mode base predictor on order-1 samples.
pub fn train_base(data: &Dataset, cfg: &SurrogateConfig) -> Result<(Module, TrainLog), SurrogateError> {
    cfg.model.validate().map_err(SurrogateError::InvalidConfig)?;
    let (train, val) = split_samples(data, 1)?;
    let stats = time_stats(data);
    fn example<'d>(s: &'d TrainingSample, stats: &TimeStats) -> Example<'d> {
        let input = SystemInput::from_sample(s);
        let f = input.features(stats)[0];
        Example {
            tokens: base_tokens(s.device_label),
            times: &s.times,
            shift: f.log_tau,
            target: Cow::Borrowed(&s.target[..]),
            scale: s.modes[0].gain * s.raw_stats.a_max,
        }
    }
    let train: Vec<Example> = train.iter().map(|s| example(s, &stats)).collect();
    let val: Vec<Example> = val.iter().map(|s| example(s, &stats)).collect();
    let module = Module::new(cfg.model, cfg.train.seed);
    fit("base", module, 2, &train, &val, &cfg.train, cfg.train.seed ^ 0xba5e)
}

/// Trains residual modules `1..=max_order` in order, each on the residual
/// its predecessors leave on its own order's samples.
pub fn train_residual_cascade(
    base: &Module,
    data: &Dataset,
    max_order: usize,
    cfg: &SurrogateConfig,
) -> Result<(Vec<ResidualModule>, Vec<TrainLog>), SurrogateError> {
    let stats = time_stats(data);
    let mut modules: Vec<ResidualModule> = Vec::new();
    let mut logs = Vec::new();
    for j in 1..=max_order {
        let (train, val) = split_samples(data, j)?;
        let train_ex = residual_examples(base, &modules, stats, j, &train)?;
        let val_ex = residual_examples(base, &modules, stats, j, &val)?;
        let seed = cfg.train.seed.wrapping_add(j as u64);
        let module = Module::new(cfg.model, seed);
        let (module, log) =
            fit(&format!("residual {j}"), module, 3, &train_ex, &val_ex, &cfg.train, seed ^ 0x7e5)?;
        modules.push(ResidualModule { index: j, module });
        logs.push(log);
    }
    Ok((modules, logs))
}

fn residual_examples<'d>(
    base: &Module,
    modules: &[ResidualModule],
    stats: TimeStats,
    j: usize,
    set: &[&'d TrainingSample],
) -> Result<Vec<Example<'d>>, SurrogateError> {
    set.iter()
        .map(|s| {
            let input = SystemInput::from_sample(s);
            let prior = predict_with(base, modules, stats, &input, &s.times, j - 1)?.values;
            let residual: Vec<f64> = s.target.iter().zip(&prior).map(|(t, p)| t - p).collect();
            let f = input.features(&stats);
            let prev = (j > 1).then(|| f[j - 2]);
            Ok(Example {
                tokens: residual_tokens(s.device_label, j, f[j - 1], prev),
                times: &s.times,
                shift: f[j - 1].log_tau,
                target: Cow::Owned(residual),
                scale: 1.0,
            })
        })
        .collect()
}

/// Base predictor followed by residual modules `1..=max_order`.
pub fn train(data: &Dataset, cfg: &SurrogateConfig, max_order: usize) -> Result<SurrogateBundle, SurrogateError> {
    let (base, base_log) = train_base(data, cfg)?;
    let (residuals, logs) = train_residual_cascade(&base, data, max_order, cfg)?;
    Ok(assemble_bundle(data, cfg, (base, base_log), (residuals, logs)))
}

/// Bundles separately trained stages with the dataset's time statistics.
pub fn assemble_bundle(
    data: &Dataset,
    cfg: &SurrogateConfig,
    (base, base_log): (Module, TrainLog),
    (residuals, logs): (Vec<ResidualModule>, Vec<TrainLog>),
) -> SurrogateBundle {
    SurrogateBundle {
        version: BUNDLE_VERSION,
        config: *cfg,
        time_stats: time_stats(data),
        base,
        residuals,
        metadata: TrainingMetadata {
            seed: cfg.train.seed,
            dataset_seed: data.manifest.seed,
            base: base_log,
            residuals: logs,
        },
    }
}

/// Random batch for gradient checks: `items` systems, `per_item` times.
pub fn random_batch(seq: usize, items: usize, per_item: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = (0..items * seq * TOKEN_FEATURES).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = items * per_item;
    Batch {
        tokens: Tensor::from_vec(items * seq, TOKEN_FEATURES, tokens),
        seq,
        times: (0..n).map(|_| rng.gen_range(-3.0..2.0)).collect(),
        per_item,
        target: (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
        scale: (0..n).map(|_| rng.gen_range(0.5..1.5)).collect(),
    }
}
