//! Mini-batch SGD with Nesterov momentum, cosine learning-rate decay,
//! minority-class oversampling and random window sampling.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::uar;
use crate::features::FeatureKind;
use crate::filterbank::ClampBounds;
use crate::gradient::{backward, Model, PreparedTrial};
use crate::signal::{standardize_matrix, TrialTensor};

fn default_batch_size() -> usize {
    256
}
fn default_lr0() -> f64 {
    2e-3
}
fn default_momentum_filters() -> f64 {
    0.99
}
fn default_momentum_head() -> f64 {
    0.9
}
fn default_n_maps() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub feature_kind: FeatureKind,
    pub n_channels: usize,
    #[serde(default = "default_n_maps")]
    pub n_maps: usize,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    #[serde(default = "default_momentum_filters")]
    pub momentum_filters: f64,
    #[serde(default = "default_momentum_head")]
    pub momentum_head: f64,
    /// L1 scale on the classifier weights.
    #[serde(default)]
    pub gamma: f64,
    #[serde(default)]
    pub seed: u64,
    /// Window length in seconds; `None` trains on whole trials.
    #[serde(default)]
    pub window_s: Option<f64>,
    #[serde(default)]
    pub windows_per_epoch: Option<usize>,
    /// Defaults to [`ClampBounds::for_sampling_rate`].
    #[serde(default)]
    pub clamp: Option<ClampBounds>,
}

impl TrainConfig {
    pub fn new(feature_kind: FeatureKind, n_channels: usize, n_maps: usize, epochs: usize) -> Self {
        TrainConfig {
            feature_kind,
            n_channels,
            n_maps,
            epochs,
            batch_size: default_batch_size(),
            lr0: default_lr0(),
            momentum_filters: default_momentum_filters(),
            momentum_head: default_momentum_head(),
            gamma: 0.0,
            seed: 0,
            window_s: None,
            windows_per_epoch: None,
            clamp: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2"));
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::config("lr0", "must be a finite non-negative number"));
        }
        for (name, m) in [
            ("momentum_filters", self.momentum_filters),
            ("momentum_head", self.momentum_head),
        ] {
            if !(0.0..1.0).contains(&m) {
                return Err(Error::config(name, "must lie in [0, 1)"));
            }
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::config("gamma", "must be non-negative"));
        }
        if let Some(w) = self.window_s {
            if !(w > 0.0) {
                return Err(Error::config("window_s", "must be positive"));
            }
        }
        if self.windows_per_epoch == Some(0) {
            return Err(Error::config("windows_per_epoch", "must be at least 1"));
        }
        if let Some(c) = &self.clamp {
            c.validate()?;
        }
        crate::features::feature_dim(self.feature_kind, self.n_channels, self.n_maps)
            .map_err(|e| Error::config("n_channels", e.to_string()))?;
        if self.n_maps == 0 {
            return Err(Error::config("n_maps", "must be at least 1"));
        }
        Ok(())
    }

    pub fn windowing(&self) -> Option<Windowing> {
        self.window_s.map(|window_s| Windowing {
            window_s,
            windows_per_epoch: self.windows_per_epoch.unwrap_or(1),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Windowing {
    pub window_s: f64,
    pub windows_per_epoch: usize,
}

/// `lr0 * (1 + cos(pi * t / T)) / 2`
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    let t = step.min(total_steps) as f64 / total_steps.max(1) as f64;
    lr0 * 0.5 * (1.0 + (PI * t).cos())
}

/// `v <- m v + g; p <- p - lr (g + m v)`
pub fn nesterov_step(params: &mut [f64], grads: &[f64], velocities: &mut [f64], lr: f64, momentum: f64) {
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocities.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * (g + momentum * *v);
    }
}

/// Index list with the minority class duplicated up to the majority count:
/// whole copies first, then a seeded draw without replacement for the rest.
pub fn oversample(labels: &[u8], rng: &mut impl Rng) -> Result<Vec<usize>> {
    let class0: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    let class1: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != 0).collect();
    if class0.is_empty() || class1.is_empty() {
        return Err(Error::invalid("training split contains a single class"));
    }
    let (minority, majority) = if class0.len() < class1.len() {
        (class0, class1.len())
    } else {
        (class1, class0.len())
    };
    let mut out: Vec<usize> = (0..labels.len()).collect();
    let deficit = majority - minority.len();
    for _ in 0..deficit / minority.len() {
        out.extend_from_slice(&minority);
    }
    let rest = deficit % minority.len();
    if rest > 0 {
        let mut picks = index::sample(rng, minority.len(), rest).into_vec();
        picks.sort_unstable();
        out.extend(picks.into_iter().map(|i| minority[i]));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowMode {
    Train,
    Eval,
}

fn restandardize(trial: &TrialTensor, start: usize, len: usize, idx: usize) -> Result<TrialTensor> {
    let rows: Vec<Vec<f64>> = trial.data.iter().map(|r| r[start..start + len].to_vec()).collect();
    let data = standardize_matrix(&rows, trial.fs)?.unwrap_or_else(|| vec![vec![0.0; len]; rows.len()]);
    Ok(TrialTensor {
        data,
        fs: trial.fs,
        label: trial.label,
        subject_id: trial.subject_id.clone(),
        trial_id: format!("{}#w{idx}", trial.trial_id),
    })
}

/// Train mode draws `windows_per_epoch` windows at uniform random offsets;
/// eval mode tiles the trial with consecutive windows and drops the
/// remainder. Every window is re-standardized. Without windowing the trial
/// is returned whole.
pub fn sample_windows(
    trial: &TrialTensor,
    mode: WindowMode,
    windowing: Option<Windowing>,
    rng: &mut impl Rng,
) -> Result<Vec<TrialTensor>> {
    let Some(w) = windowing else {
        return Ok(vec![trial.clone()]);
    };
    let len = (w.window_s * trial.fs).round() as usize;
    let n = trial.n_samples();
    if len == 0 || n < len {
        return Err(Error::Trial {
            trial: trial.trial_id.clone(),
            reason: format!("{n} samples is shorter than a {}-sample window", len),
        });
    }
    match mode {
        WindowMode::Train => (0..w.windows_per_epoch)
            .map(|i| {
                let start = rng.random_range(0..=n - len);
                restandardize(trial, start, len, i)
            })
            .collect(),
        WindowMode::Eval => (0..n / len).map(|i| restandardize(trial, i * len, len, i)).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub model: Model,
    pub velocity_filters: Vec<f64>,
    pub velocity_weights: Vec<f64>,
    pub velocity_bias: f64,
    pub step_counter: usize,
}

impl ModelState {
    pub fn new(model: Model) -> Self {
        ModelState {
            velocity_filters: vec![0.0; model.bank.n_trainable()],
            velocity_weights: vec![0.0; model.feature_dim()],
            velocity_bias: 0.0,
            step_counter: 0,
            model,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_uar: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub history: Vec<EpochRecord>,
}

/// Splits `n` items into chunks of at most `batch_size`, folding a trailing
/// single item into the previous chunk (train-mode normalization needs two).
fn chunk_sizes(n: usize, batch_size: usize) -> Vec<usize> {
    if n < 2 {
        return Vec::new();
    }
    let mut sizes = vec![batch_size; n / batch_size];
    let rest = n % batch_size;
    match (rest, sizes.last_mut()) {
        (0, _) => {}
        (1, Some(last)) => *last += 1,
        (r, _) => sizes.push(r),
    }
    sizes
}

/// Batches of sample indices, each with a single trial length. Groups are
/// visited in ascending length, samples keep the shuffled order.
fn make_batches(lengths: &[usize], order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in order {
        groups.entry(lengths[i]).or_default().push(i);
    }
    let mut out = Vec::new();
    for members in groups.values() {
        let mut at = 0;
        for size in chunk_sizes(members.len(), batch_size) {
            out.push(members[at..at + size].to_vec());
            at += size;
        }
    }
    out
}

fn check_trials(config: &TrainConfig, trials: &[TrialTensor]) -> Result<f64> {
    let first = trials
        .first()
        .ok_or_else(|| Error::invalid("no training trials"))?;
    let fs = first.fs;
    for t in trials {
        if t.n_channels() != config.n_channels {
            return Err(Error::Trial {
                trial: t.trial_id.clone(),
                reason: format!("has {} channels, config expects {}", t.n_channels(), config.n_channels),
            });
        }
        if t.fs != fs {
            return Err(Error::Trial {
                trial: t.trial_id.clone(),
                reason: format!("sampling rate {} differs from {fs}", t.fs),
            });
        }
    }
    Ok(fs)
}

/// Trains a fresh model on `trials` (already standardized).
pub fn train(config: &TrainConfig, trials: &[TrialTensor]) -> Result<TrainOutcome> {
    config.validate()?;
    let fs = check_trials(config, trials)?;
    let clamp = config.clamp.unwrap_or_else(|| ClampBounds::for_sampling_rate(fs));
    let mut state = ModelState::new(Model::new(config.feature_kind, config.n_channels, config.n_maps)?);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let labels: Vec<u8> = trials.iter().map(|t| t.label).collect();
    let occurrences = oversample(&labels, &mut rng)?;
    let windowing = config.windowing();

    let cached: Vec<PreparedTrial> = if windowing.is_none() {
        trials.iter().map(PreparedTrial::new).collect()
    } else {
        Vec::new()
    };
    let sample_lengths: Vec<usize> = match windowing {
        None => occurrences.iter().map(|&i| trials[i].n_samples()).collect(),
        Some(w) => {
            let len = (w.window_s * fs).round() as usize;
            vec![len; occurrences.len() * w.windows_per_epoch]
        }
    };
    let identity: Vec<usize> = (0..sample_lengths.len()).collect();
    let steps_per_epoch = make_batches(&sample_lengths, &identity, config.batch_size).len();
    if steps_per_epoch == 0 {
        return Err(Error::invalid("training set too small to form a batch of 2"));
    }
    let total_steps = steps_per_epoch * config.epochs;

    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let windows: Vec<PreparedTrial> = match windowing {
            None => Vec::new(),
            Some(_) => {
                let mut out = Vec::with_capacity(sample_lengths.len());
                for &i in &occurrences {
                    for w in sample_windows(&trials[i], WindowMode::Train, windowing, &mut rng)? {
                        out.push(PreparedTrial::new(&w));
                    }
                }
                out
            }
        };
        let sample = |i: usize| -> &PreparedTrial {
            match windowing {
                None => &cached[occurrences[i]],
                Some(_) => &windows[i],
            }
        };
        let mut order = identity.clone();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut n_batches = 0;
        let mut preds = Vec::with_capacity(order.len());
        let mut truth = Vec::with_capacity(order.len());
        let mut lr = 0.0;
        for batch in make_batches(&sample_lengths, &order, config.batch_size) {
            let refs: Vec<&PreparedTrial> = batch.iter().map(|&i| sample(i)).collect();
            lr = cosine_lr(state.step_counter + 1, total_steps, config.lr0);
            let pass = backward(&state.model, &refs, config.gamma)?;
            apply_step(&mut state, &pass.tape, lr, config, &clamp);
            state.model.bn.update_running(&pass.stats);
            loss_sum += pass.loss;
            n_batches += 1;
            preds.extend(pass.preds.iter().map(|&p| u8::from(p > 0.5)));
            truth.extend(refs.iter().map(|t| t.label));
        }
        let mean_loss = loss_sum / n_batches as f64;
        if !mean_loss.is_finite() {
            return Err(Error::NonFinite {
                what: format!("training loss at epoch {epoch}"),
            });
        }
        history.push(EpochRecord {
            epoch,
            mean_loss,
            train_uar: uar(&preds, &truth).unwrap_or(f64::NAN),
            lr,
        });
    }
    state.model.bn.mode = crate::head::Mode::Eval;
    Ok(TrainOutcome { state, history })
}

fn apply_step(
    state: &mut ModelState,
    tape: &crate::gradient::GradientTape,
    lr: f64,
    config: &TrainConfig,
    clamp: &ClampBounds,
) {
    let mut flat = state.model.bank.flat_params();
    nesterov_step(&mut flat, &tape.filters, &mut state.velocity_filters, lr, config.momentum_filters);
    state.model.bank.set_flat_params(&flat);
    state.model.bank.clamp(clamp);
    nesterov_step(
        &mut state.model.head.weights,
        &tape.weights,
        &mut state.velocity_weights,
        lr,
        config.momentum_head,
    );
    let mut bias = [state.model.head.bias];
    let mut vb = [state.velocity_bias];
    nesterov_step(&mut bias, &[tape.bias], &mut vb, lr, config.momentum_head);
    state.model.head.bias = bias[0];
    state.velocity_bias = vb[0];
    state.step_counter += 1;
}

/// Everything needed to resume evaluation or export of a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub fs: f64,
    pub channel_names: Vec<String>,
    pub state: ModelState,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::dataset::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = crate::dataset::read_json(path)?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::config(
                "format_version",
                format!("unsupported checkpoint version {}", ck.format_version),
            ));
        }
        Ok(ck)
    }
}

/// History as CSV with columns `epoch,mean_loss,train_uar,lr`.
pub fn history_csv(history: &[EpochRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for rec in history {
        w.serialize(rec).map_err(|e| Error::invalid(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
