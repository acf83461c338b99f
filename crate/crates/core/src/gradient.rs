//! End-to-end forward and reverse passes: filter responses, feature module,
//! batch-normalized logistic head and loss.
//!
//! The reverse pass is hand-derived. Filter magnitudes enter every feature
//! through the filtered bins `X[k] * P[k] * g[k]` (spectrum, linear phase,
//! real gain), so each feature's local adjoint is reduced to a gradient on
//! the gains `dL/dg[k]`, summed over the batch and finally contracted with the
//! analytic per-bin partials of each filter.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    self, analytic_adjoint, correlation_backward, correlation_map, irfft_adjoint, phase_map,
    plv_backward, CorrelationMap, FeatureKind, PhaseMap,
};
use crate::filterbank::{filter_response_grad, FilterBank, FilterGrad, PARAMS_PER_FILTER};
use crate::head::{head_backward, head_forward, predict, BatchNormState, BatchStats, ClassifierParams};
use crate::signal::{self, Spectrum, TrialTensor};

/// The differentiable model: filters, feature kind and head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub kind: FeatureKind,
    pub bank: FilterBank,
    pub bn: BatchNormState,
    pub head: ClassifierParams,
}

impl Model {
    pub fn new(kind: FeatureKind, n_channels: usize, n_maps: usize) -> Result<Self> {
        let bank = crate::filterbank::init_bank_for(kind, n_channels, n_maps)?;
        let dim = features::feature_dim(kind, n_channels, n_maps)?;
        Ok(Model {
            kind,
            bank,
            bn: BatchNormState::new(dim),
            head: ClassifierParams::zeros(dim),
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.head.weights.len()
    }

    pub fn n_trainable(&self) -> usize {
        self.bank.n_trainable() + self.feature_dim() + 1
    }

    /// Raw (pre-normalization) features of one trial.
    pub fn features(&self, spectrum: &Spectrum) -> Result<Vec<f64>> {
        let resp = BankResponses::new(&self.bank, spectrum.n_samples, spectrum.fs, false);
        Ok(forward_trial(self.kind, &self.bank, &resp, spectrum)?.0)
    }

    /// Eval-mode probabilities, one per spectrum. Each trial is normalized by
    /// the running statistics alone, so batch composition does not matter.
    pub fn predict_eval(&self, spectra: &[Spectrum]) -> Result<Vec<f64>> {
        let mut feats = Vec::with_capacity(spectra.len());
        for s in spectra {
            feats.push(self.features(s)?);
        }
        let normalized = self.bn.forward_eval(&feats)?;
        Ok(predict(&normalized, &self.head))
    }
}

/// A trial ready for the pipeline: its one-sided spectrum and target.
#[derive(Debug, Clone)]
pub struct PreparedTrial {
    pub spectrum: Spectrum,
    pub label: u8,
}

impl PreparedTrial {
    pub fn new(trial: &TrialTensor) -> Self {
        PreparedTrial {
            spectrum: signal::rfft(trial),
            label: trial.label,
        }
    }
}

/// Filter responses evaluated on one frequency grid.
pub(crate) struct BankResponses {
    /// Linear-phase factor per bin, shared by every filter.
    pub phase: Vec<Complex64>,
    pub gain: Vec<Vec<f64>>,
    pub grad: Vec<FilterGrad>,
}

impl BankResponses {
    pub fn new(bank: &FilterBank, n_samples: usize, fs: f64, with_grad: bool) -> Self {
        let freqs = signal::bin_freqs(n_samples, fs);
        let phase = freqs
            .iter()
            .map(|&x| Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * x * bank.group_delay_s))
            .collect();
        let gain = bank
            .params
            .iter()
            .map(|p| crate::filterbank::filter_magnitude(p, &freqs))
            .collect();
        let grad = if with_grad {
            bank.params.iter().map(|p| filter_response_grad(p, &freqs)).collect()
        } else {
            Vec::new()
        };
        BankResponses {
            phase,
            gain,
            grad,
        }
    }

    fn filtered(&self, bins: &[Complex64], filter: usize) -> Vec<Complex64> {
        bins.iter()
            .zip(&self.phase)
            .zip(&self.gain[filter])
            .map(|((x, p), g)| x * p * *g)
            .collect()
    }
}

enum TrialCache {
    Magnitude,
    Correlation(Vec<CorrelationMap>),
    Plv(Vec<PhaseMap>),
}

fn forward_trial(
    kind: FeatureKind,
    bank: &FilterBank,
    resp: &BankResponses,
    spectrum: &Spectrum,
) -> Result<(Vec<f64>, TrialCache)> {
    if spectrum.n_channels() != bank.n_channels {
        return Err(Error::shape(
            format!("{} channels", bank.n_channels),
            format!("{} channels", spectrum.n_channels()),
        ));
    }
    let n = spectrum.n_samples;
    let m = spectrum.n_bins() as f64;
    let mut values = Vec::new();
    match kind {
        FeatureKind::Magnitude => {
            for map in 0..bank.n_maps {
                for (c, bins) in spectrum.channels.iter().enumerate() {
                    let g = &resp.gain[bank.filter_index(c, map)];
                    values.push(bins.iter().zip(g).map(|(x, g)| x.norm() * g).sum::<f64>() / m);
                }
            }
            Ok((values, TrialCache::Magnitude))
        }
        FeatureKind::Correlation => {
            let mut maps = Vec::with_capacity(bank.n_maps);
            for map in 0..bank.n_maps {
                let time = spectrum
                    .channels
                    .iter()
                    .enumerate()
                    .map(|(c, bins)| signal::irfft_channel(&resp.filtered(bins, bank.filter_index(c, map)), n))
                    .collect::<Result<Vec<_>>>()?;
                let cm = correlation_map(&time);
                values.extend(cm.r.iter().map(|r| r.abs()));
                maps.push(cm);
            }
            Ok((values, TrialCache::Correlation(maps)))
        }
        FeatureKind::Plv => {
            let mut maps = Vec::with_capacity(bank.n_maps);
            for map in 0..bank.n_maps {
                let analytic = spectrum
                    .channels
                    .iter()
                    .enumerate()
                    .map(|(c, bins)| signal::analytic_channel(&resp.filtered(bins, bank.filter_index(c, map)), n))
                    .collect::<Result<Vec<_>>>()?;
                let pm = phase_map(&analytic);
                values.extend(pm.cross.iter().map(|s| s.norm() / n as f64));
                maps.push(pm);
            }
            Ok((values, TrialCache::Plv(maps)))
        }
    }
}

/// Accumulates `dL/dg[k]` per filter for one trial into `d_gain`.
fn backward_trial(
    bank: &FilterBank,
    resp: &BankResponses,
    spectrum: &Spectrum,
    cache: &TrialCache,
    d_features: &[f64],
    d_gain: &mut [Vec<f64>],
) {
    let m = spectrum.n_bins();
    match cache {
        TrialCache::Magnitude => {
            let mut idx = 0;
            for map in 0..bank.n_maps {
                for (c, bins) in spectrum.channels.iter().enumerate() {
                    let d = d_features[idx];
                    idx += 1;
                    if d == 0.0 {
                        continue;
                    }
                    let acc = &mut d_gain[bank.filter_index(c, map)];
                    for (a, x) in acc.iter_mut().zip(bins) {
                        *a += d * x.norm() / m as f64;
                    }
                }
            }
        }
        TrialCache::Correlation(maps) => {
            let per_map = features::n_pairs(bank.n_channels);
            for (map, cm) in maps.iter().enumerate() {
                let d_map = &d_features[map * per_map..(map + 1) * per_map];
                if d_map.iter().all(|&d| d == 0.0) {
                    continue;
                }
                let grad_time = correlation_backward(cm, d_map);
                for (c, g) in grad_time.iter().enumerate() {
                    let g_bins = irfft_adjoint(g);
                    accumulate_gain_grad(&spectrum.channels[c], &resp.phase, &g_bins, &mut d_gain[bank.filter_index(c, map)]);
                }
            }
        }
        TrialCache::Plv(maps) => {
            let per_map = features::n_pairs(bank.n_channels);
            for (map, pm) in maps.iter().enumerate() {
                let d_map = &d_features[map * per_map..(map + 1) * per_map];
                if d_map.iter().all(|&d| d == 0.0) {
                    continue;
                }
                let grad_analytic = plv_backward(pm, d_map);
                for (c, g) in grad_analytic.iter().enumerate() {
                    let g_bins = analytic_adjoint(g);
                    accumulate_gain_grad(&spectrum.channels[c], &resp.phase, &g_bins, &mut d_gain[bank.filter_index(c, map)]);
                }
            }
        }
    }
}

/// `dL/dg[k] += Re(conj(dL/dY[k]) * X[k] * P[k])` for `Y = X P g`.
fn accumulate_gain_grad(bins: &[Complex64], phase: &[Complex64], g_bins: &[Complex64], acc: &mut [f64]) {
    for (((a, x), p), gy) in acc.iter_mut().zip(bins).zip(phase).zip(g_bins) {
        *a += (gy.conj() * x * p).re;
    }
}

/// Gradients aligned with every trainable scalar of a [`Model`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTape {
    /// `[mu, h, beta_raw]` per filter, in bank order.
    pub filters: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl GradientTape {
    pub fn zeros(model: &Model) -> Self {
        GradientTape {
            filters: vec![0.0; model.bank.n_trainable()],
            weights: vec![0.0; model.feature_dim()],
            bias: 0.0,
        }
    }

    fn check_finite(&self) -> Result<()> {
        const NAMES: [&str; PARAMS_PER_FILTER] = ["mu", "h", "beta_raw"];
        if let Some(i) = self.filters.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                what: format!(
                    "gradient of filter {} ({})",
                    i / PARAMS_PER_FILTER,
                    NAMES[i % PARAMS_PER_FILTER]
                ),
            });
        }
        if let Some(i) = self.weights.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("gradient of classifier weight {i}"),
            });
        }
        if !self.bias.is_finite() {
            return Err(Error::NonFinite {
                what: "gradient of classifier bias".into(),
            });
        }
        Ok(())
    }
}

/// Result of one train-mode forward and reverse pass over a batch.
#[derive(Debug, Clone)]
pub struct BatchPass {
    pub tape: GradientTape,
    pub loss: f64,
    pub preds: Vec<f64>,
    /// Batch statistics used for normalization; the caller folds them into
    /// the running statistics.
    pub stats: BatchStats,
    /// Per-trial gradient w.r.t. raw features.
    pub feature_grads: Vec<Vec<f64>>,
}

fn check_batch(trials: &[&PreparedTrial]) -> Result<(usize, f64)> {
    let first = trials
        .first()
        .ok_or_else(|| Error::invalid("empty batch"))?;
    let n = first.spectrum.n_samples;
    if trials.iter().any(|t| t.spectrum.n_samples != n) {
        return Err(Error::invalid("mixed trial lengths within one batch"));
    }
    Ok((n, first.spectrum.fs))
}

/// Train-mode loss of a batch without gradients.
pub fn batch_loss(model: &Model, trials: &[&PreparedTrial], gamma: f64) -> Result<f64> {
    let (n, fs) = check_batch(trials)?;
    let resp = BankResponses::new(&model.bank, n, fs, false);
    let mut feats = Vec::with_capacity(trials.len());
    for t in trials {
        feats.push(forward_trial(model.kind, &model.bank, &resp, &t.spectrum)?.0);
    }
    let targets: Vec<f64> = trials.iter().map(|t| t.label as f64).collect();
    Ok(head_forward(&feats, &targets, &model.bn, &model.head, gamma)?.loss)
}

/// Loss and exact gradients w.r.t. every trainable scalar on one batch.
/// Does not modify the model.
pub fn backward(model: &Model, trials: &[&PreparedTrial], gamma: f64) -> Result<BatchPass> {
    let (n, fs) = check_batch(trials)?;
    let resp = BankResponses::new(&model.bank, n, fs, true);
    let mut feats = Vec::with_capacity(trials.len());
    let mut caches = Vec::with_capacity(trials.len());
    for t in trials {
        let (f, cache) = forward_trial(model.kind, &model.bank, &resp, &t.spectrum)?;
        feats.push(f);
        caches.push(cache);
    }
    let targets: Vec<f64> = trials.iter().map(|t| t.label as f64).collect();
    let fwd = head_forward(&feats, &targets, &model.bn, &model.head, gamma)?;
    if !fwd.loss.is_finite() {
        return Err(Error::NonFinite { what: "loss".into() });
    }
    let hg = head_backward(&fwd, &targets, &model.bn, &model.head, gamma);

    let m = signal::n_bins(n);
    let mut d_gain = vec![vec![0.0; m]; model.bank.n_filters()];
    for ((t, cache), df) in trials.iter().zip(&caches).zip(&hg.features) {
        backward_trial(&model.bank, &resp, &t.spectrum, cache, df, &mut d_gain);
    }
    let mut filters = Vec::with_capacity(model.bank.n_trainable());
    for (dg, grad) in d_gain.iter().zip(&resp.grad) {
        let contract = |partial: &[f64]| dg.iter().zip(partial).map(|(a, b)| a * b).sum::<f64>();
        filters.push(contract(&grad.d_mu));
        filters.push(contract(&grad.d_h));
        filters.push(contract(&grad.d_beta_raw));
    }
    let tape = GradientTape {
        filters,
        weights: hg.weights,
        bias: hg.bias,
    };
    tape.check_finite()?;
    Ok(BatchPass {
        tape,
        loss: fwd.loss,
        preds: fwd.preds,
        stats: fwd.stats,
        feature_grads: hg.features,
    })
}
