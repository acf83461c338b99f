//! Non-affine batch normalization followed by a logistic unit, trained with
//! mean squared error plus an L1 penalty on the weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    pub mode: Mode,
}

/// Per-dimension batch statistics (population variance).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchStats {
    pub fn of(batch: &[Vec<f64>]) -> Self {
        let b = batch.len() as f64;
        let d = batch.first().map_or(0, Vec::len);
        let mut mean = vec![0.0; d];
        for row in batch {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= b);
        let mut var = vec![0.0; d];
        for row in batch {
            for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - m).powi(2);
            }
        }
        var.iter_mut().for_each(|v| *v /= b);
        BatchStats { mean, var }
    }
}

fn normalize(batch: &[Vec<f64>], mean: &[f64], var: &[f64], eps: f64) -> Vec<Vec<f64>> {
    batch
        .iter()
        .map(|row| {
            row.iter()
                .zip(mean)
                .zip(var)
                .map(|((x, m), v)| (x - m) / (v + eps).sqrt())
                .collect()
        })
        .collect()
}

impl BatchNormState {
    pub fn new(dim: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            mode: Mode::Train,
        }
    }

    pub fn dim(&self) -> usize {
        self.running_mean.len()
    }

    fn check_dims(&self, batch: &[Vec<f64>]) -> Result<()> {
        if let Some(row) = batch.iter().find(|r| r.len() != self.dim()) {
            return Err(Error::shape(format!("{} features", self.dim()), row.len()));
        }
        Ok(())
    }

    /// Normalizes by batch statistics in train mode (updating the running
    /// statistics) or by the running statistics in eval mode.
    pub fn forward(&mut self, batch: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        match self.mode {
            Mode::Train => {
                let (out, stats) = self.forward_train(batch)?;
                self.update_running(&stats);
                Ok(out)
            }
            Mode::Eval => self.forward_eval(batch),
        }
    }

    /// Train-mode normalization without touching the running statistics.
    pub fn forward_train(&self, batch: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, BatchStats)> {
        if batch.len() < 2 {
            return Err(Error::invalid(format!(
                "train-mode batch normalization needs at least 2 samples, got {}",
                batch.len()
            )));
        }
        self.check_dims(batch)?;
        let stats = BatchStats::of(batch);
        Ok((normalize(batch, &stats.mean, &stats.var, self.eps), stats))
    }

    pub fn forward_eval(&self, batch: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.check_dims(batch)?;
        Ok(normalize(batch, &self.running_mean, &self.running_var, self.eps))
    }

    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, x) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * x;
        }
        for (r, x) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * x;
        }
    }
}

/// Reverse pass of train-mode normalization, including the dependence of
/// the batch mean and variance on every sample.
pub fn batchnorm_backward_train(
    normalized: &[Vec<f64>],
    stats: &BatchStats,
    eps: f64,
    d_out: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let b = normalized.len() as f64;
    let d = stats.mean.len();
    let mut mean_g = vec![0.0; d];
    let mut mean_gx = vec![0.0; d];
    for (xh, g) in normalized.iter().zip(d_out) {
        for k in 0..d {
            mean_g[k] += g[k] / b;
            mean_gx[k] += g[k] * xh[k] / b;
        }
    }
    normalized
        .iter()
        .zip(d_out)
        .map(|(xh, g)| {
            (0..d)
                .map(|k| (g[k] - mean_g[k] - xh[k] * mean_gx[k]) / (stats.var[k] + eps).sqrt())
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl ClassifierParams {
    pub fn zeros(dim: usize) -> Self {
        ClassifierParams {
            weights: vec![0.0; dim],
            bias: 0.0,
        }
    }

    pub fn logit(&self, features: &[f64]) -> f64 {
        self.weights.iter().zip(features).map(|(w, f)| w * f).sum::<f64>() + self.bias
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn predict(features_std: &[Vec<f64>], p: &ClassifierParams) -> Vec<f64> {
    features_std.iter().map(|f| sigmoid(p.logit(f))).collect()
}

/// Mean squared error plus `gamma * sum |w|`; the bias is not penalized.
pub fn loss(preds: &[f64], targets: &[f64], p: &ClassifierParams, gamma: f64) -> Result<f64> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::shape(format!("{} targets", preds.len()), targets.len()));
    }
    let mse = preds.iter().zip(targets).map(|(x, t)| (x - t).powi(2)).sum::<f64>() / preds.len() as f64;
    Ok(mse + gamma * p.weights.iter().map(|w| w.abs()).sum::<f64>())
}

pub(crate) fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrad {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Gradient w.r.t. the raw (pre-normalization) features, `[B][D]`.
    pub features: Vec<Vec<f64>>,
}

/// Train-mode forward of the head on a batch of raw features.
#[derive(Debug, Clone)]
pub struct HeadForward {
    pub normalized: Vec<Vec<f64>>,
    pub stats: BatchStats,
    pub preds: Vec<f64>,
    pub loss: f64,
}

pub fn head_forward(
    batch: &[Vec<f64>],
    targets: &[f64],
    bn: &BatchNormState,
    p: &ClassifierParams,
    gamma: f64,
) -> Result<HeadForward> {
    let (normalized, stats) = bn.forward_train(batch)?;
    let preds = predict(&normalized, p);
    let loss = loss(&preds, targets, p, gamma)?;
    Ok(HeadForward {
        normalized,
        stats,
        preds,
        loss,
    })
}

/// Exact gradients of the train-mode head loss.
pub fn head_backward(
    fwd: &HeadForward,
    targets: &[f64],
    bn: &BatchNormState,
    p: &ClassifierParams,
    gamma: f64,
) -> HeadGrad {
    let b = fwd.preds.len() as f64;
    let mut weights: Vec<f64> = p.weights.iter().map(|&w| gamma * sign0(w)).collect();
    let mut bias = 0.0;
    let mut d_norm = Vec::with_capacity(fwd.preds.len());
    for ((pred, t), xh) in fwd.preds.iter().zip(targets).zip(&fwd.normalized) {
        let dz = 2.0 * (pred - t) / b * pred * (1.0 - pred);
        bias += dz;
        for (gw, x) in weights.iter_mut().zip(xh) {
            *gw += dz * x;
        }
        d_norm.push(p.weights.iter().map(|w| dz * w).collect::<Vec<f64>>());
    }
    let features = batchnorm_backward_train(&fwd.normalized, &fwd.stats, bn.eps, &d_norm);
    HeadGrad {
        weights,
        bias,
        features,
    }
}
