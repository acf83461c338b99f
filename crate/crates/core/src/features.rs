//! Differentiable band features: mean band magnitude, absolute Pearson
//! correlation and phase-locking value.
//!
//! Feature vectors are map-major. Within a map, magnitude features follow
//! channel order and connectivity features follow the row-major upper
//! triangle `(0,1), (0,2), ..., (1,2), ...`. Connectivity is only computed
//! between channels of the same map.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filterbank::PARAMS_PER_FILTER;
use crate::signal::{self, hermitian_weight, Spectrum};

/// Envelope floor used when normalizing analytic signals.
pub const ENVELOPE_FLOOR: f64 = 1e-12;
const VARIANCE_FLOOR: f64 = 1e-20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Magnitude,
    Correlation,
    Plv,
}

impl FeatureKind {
    pub fn is_connectivity(self) -> bool {
        !matches!(self, FeatureKind::Magnitude)
    }
}

pub fn n_pairs(n_channels: usize) -> usize {
    n_channels * n_channels.saturating_sub(1) / 2
}

/// Row-major upper-triangular channel pairs.
pub fn pairs(n_channels: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(n_pairs(n_channels));
    for a in 0..n_channels {
        for b in a + 1..n_channels {
            out.push((a, b));
        }
    }
    out
}

pub fn feature_dim(kind: FeatureKind, n_channels: usize, n_maps: usize) -> Result<usize> {
    if kind.is_connectivity() && n_channels < 2 {
        return Err(Error::invalid(format!(
            "{kind:?} features need at least 2 channels, got {n_channels}"
        )));
    }
    Ok(match kind {
        FeatureKind::Magnitude => n_channels * n_maps,
        FeatureKind::Correlation | FeatureKind::Plv => n_maps * n_pairs(n_channels),
    })
}

/// Total trainable scalars of the pipeline: filters, classifier weights and
/// the classifier bias. Batch normalization adds none.
pub fn count_parameters(kind: FeatureKind, n_channels: usize, n_maps: usize) -> Result<usize> {
    let n_filters = match kind {
        FeatureKind::Plv => n_maps,
        FeatureKind::Magnitude | FeatureKind::Correlation => n_channels * n_maps,
    };
    Ok(PARAMS_PER_FILTER * n_filters + feature_dim(kind, n_channels, n_maps)? + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub kind: FeatureKind,
    /// `(map, channel)` entries hit by a numerical guard: zero variance for
    /// correlation, envelope floor for phase locking.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flagged: Vec<(usize, usize)>,
}

/// Mean absolute value over all one-sided bins, per channel and map.
pub fn band_magnitude(maps: &[Spectrum]) -> FeatureVector {
    let mut values = Vec::new();
    for map in maps {
        for bins in &map.channels {
            values.push(bins.iter().map(|z| z.norm()).sum::<f64>() / bins.len() as f64);
        }
    }
    FeatureVector {
        values,
        kind: FeatureKind::Magnitude,
        flagged: Vec::new(),
    }
}

/// Sums, norms and correlations of one map of centered signals.
#[derive(Debug, Clone)]
pub(crate) struct CorrelationMap {
    pub centered: Vec<Vec<f64>>,
    pub sum_sq: Vec<f64>,
    /// Signed correlation per pair, 0 for pairs with a zero-variance channel.
    pub r: Vec<f64>,
}

pub(crate) fn correlation_map(signals: &[Vec<f64>]) -> CorrelationMap {
    let centered: Vec<Vec<f64>> = signals
        .iter()
        .map(|x| {
            let mean = x.iter().sum::<f64>() / x.len() as f64;
            x.iter().map(|v| v - mean).collect()
        })
        .collect();
    let sum_sq: Vec<f64> = centered.iter().map(|a| dot(a, a)).collect();
    let r = pairs(signals.len())
        .into_iter()
        .map(|(a, b)| {
            if sum_sq[a] <= VARIANCE_FLOOR || sum_sq[b] <= VARIANCE_FLOOR {
                0.0
            } else {
                dot(&centered[a], &centered[b]) / (sum_sq[a] * sum_sq[b]).sqrt()
            }
        })
        .collect();
    CorrelationMap {
        centered,
        sum_sq,
        r,
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Absolute Pearson correlation for every channel pair within each map.
/// `filtered_time[j][c]` is channel `c` of map `j`.
pub fn correlation_features(filtered_time: &[Vec<Vec<f64>>]) -> Result<FeatureVector> {
    let mut values = Vec::new();
    let mut flagged = Vec::new();
    for (j, map) in filtered_time.iter().enumerate() {
        if map.len() < 2 {
            return Err(Error::invalid("correlation features need at least 2 channels"));
        }
        let cm = correlation_map(map);
        for (c, &ss) in cm.sum_sq.iter().enumerate() {
            if ss <= VARIANCE_FLOOR {
                flagged.push((j, c));
            }
        }
        values.extend(cm.r.iter().map(|r| r.abs()));
    }
    Ok(FeatureVector {
        values,
        kind: FeatureKind::Correlation,
        flagged,
    })
}

/// Unit phasors of one map of analytic signals.
#[derive(Debug, Clone)]
pub(crate) struct PhaseMap {
    pub envelope: Vec<Vec<f64>>,
    pub phasor: Vec<Vec<Complex64>>,
    /// `sum_t e_a conj(e_b)` per pair.
    pub cross: Vec<Complex64>,
    pub clamped: Vec<usize>,
}

pub(crate) fn phase_map(analytic: &[Vec<Complex64>]) -> PhaseMap {
    let mut clamped = Vec::new();
    let mut envelope = Vec::with_capacity(analytic.len());
    let mut u = Vec::with_capacity(analytic.len());
    let mut v = Vec::with_capacity(analytic.len());
    for (c, z) in analytic.iter().enumerate() {
        let mut hit = false;
        let env: Vec<f64> = z
            .iter()
            .map(|zt| {
                let a = zt.norm();
                if a < ENVELOPE_FLOOR {
                    hit = true;
                    ENVELOPE_FLOOR
                } else {
                    a
                }
            })
            .collect();
        if hit {
            clamped.push(c);
        }
        u.push(z.iter().zip(&env).map(|(zt, a)| zt.re / a).collect::<Vec<f64>>());
        v.push(z.iter().zip(&env).map(|(zt, a)| zt.im / a).collect::<Vec<f64>>());
        envelope.push(env);
    }
    // four real inner products per pair
    let cross = pairs(analytic.len())
        .into_iter()
        .map(|(a, b)| {
            let re = dot(&u[a], &u[b]) + dot(&v[a], &v[b]);
            let im = -(dot(&u[a], &v[b]) - dot(&u[b], &v[a]));
            Complex64::new(re, im)
        })
        .collect();
    let phasor = u
        .iter()
        .zip(&v)
        .map(|(ur, vr)| ur.iter().zip(vr).map(|(&x, &y)| Complex64::new(x, y)).collect())
        .collect();
    PhaseMap {
        envelope,
        phasor,
        cross,
        clamped,
    }
}

/// Phase-locking value for every channel pair within each map.
/// `analytic[j][c]` is the analytic signal of channel `c` in map `j`.
pub fn plv_features(analytic: &[Vec<Vec<Complex64>>]) -> Result<FeatureVector> {
    let mut values = Vec::new();
    let mut flagged = Vec::new();
    for (j, map) in analytic.iter().enumerate() {
        if map.len() < 2 {
            return Err(Error::invalid("PLV features need at least 2 channels"));
        }
        let t = map[0].len();
        if t == 0 {
            return Err(Error::invalid("PLV over zero samples"));
        }
        let pm = phase_map(map);
        flagged.extend(pm.clamped.iter().map(|&c| (j, c)));
        values.extend(pm.cross.iter().map(|s| s.norm() / t as f64));
    }
    Ok(FeatureVector {
        values,
        kind: FeatureKind::Plv,
        flagged,
    })
}

/// Reference phase-locking value computed literally from instantaneous
/// phases, `|sum_t exp(i (phi_a - phi_b))| / T`. Independent of the inner
/// product route used by [`plv_features`].
pub fn plv_direct_oracle(a: &[Complex64], b: &[Complex64]) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::invalid("PLV over zero samples"));
    }
    if a.len() != b.len() {
        return Err(Error::shape(a.len(), b.len()));
    }
    let mut acc = Complex64::new(0.0, 0.0);
    for (za, zb) in a.iter().zip(b) {
        let dphi = za.im.atan2(za.re) - zb.im.atan2(zb.re);
        acc += Complex64::new(dphi.cos(), dphi.sin());
    }
    Ok(acc.norm() / a.len() as f64)
}

/// Local reverse pass of [`correlation_map`] under `|r|`: gradient of the
/// loss w.r.t. every channel's filtered time signal, given `d_abs_r` per pair.
pub(crate) fn correlation_backward(cm: &CorrelationMap, d_abs_r: &[f64]) -> Vec<Vec<f64>> {
    let n = cm.centered.first().map_or(0, Vec::len);
    let mut grad = vec![vec![0.0; n]; cm.centered.len()];
    for (p, (a, b)) in pairs(cm.centered.len()).into_iter().enumerate() {
        let r = cm.r[p];
        // subgradient of |r| at 0 and of guarded pairs is 0
        if r == 0.0 || d_abs_r[p] == 0.0 {
            continue;
        }
        let q = d_abs_r[p] * r.signum();
        let inv = 1.0 / (cm.sum_sq[a] * cm.sum_sq[b]).sqrt();
        let (ra, rb) = (r / cm.sum_sq[a], r / cm.sum_sq[b]);
        for t in 0..n {
            let (xa, xb) = (cm.centered[a][t], cm.centered[b][t]);
            grad[a][t] += q * (xb * inv - ra * xa);
            grad[b][t] += q * (xa * inv - rb * xb);
        }
    }
    grad
}

/// Local reverse pass of the phase-locking value: gradient w.r.t. each
/// channel's analytic signal as `dL/dRe + i dL/dIm`.
pub(crate) fn plv_backward(pm: &PhaseMap, d_plv: &[f64]) -> Vec<Vec<Complex64>> {
    let n = pm.phasor.first().map_or(0, Vec::len);
    let t = n as f64;
    let zero = Complex64::new(0.0, 0.0);
    let mut g_phasor = vec![vec![zero; n]; pm.phasor.len()];
    for (p, (a, b)) in pairs(pm.phasor.len()).into_iter().enumerate() {
        let s = pm.cross[p];
        let mag = s.norm();
        if mag == 0.0 || d_plv[p] == 0.0 {
            continue;
        }
        let ca = s * (d_plv[p] / (mag * t));
        let cb = ca.conj();
        for k in 0..n {
            g_phasor[a][k] += ca * pm.phasor[b][k];
            g_phasor[b][k] += cb * pm.phasor[a][k];
        }
    }
    // through e = z / |z|; the envelope floor is treated as locally constant
    g_phasor
        .iter()
        .enumerate()
        .map(|(c, ge)| {
            ge.iter()
                .zip(&pm.phasor[c])
                .zip(&pm.envelope[c])
                .map(|((g, e), env)| (g - e * (g * e.conj()).re) / env)
                .collect()
        })
        .collect()
}

/// Gradient w.r.t. the one-sided filtered bins of a real signal whose
/// inverse transform received time-domain gradient `grad_time`.
pub(crate) fn irfft_adjoint(grad_time: &[f64]) -> Vec<Complex64> {
    let n = grad_time.len();
    let mut spec = signal::rfft_channel(grad_time);
    for (k, z) in spec.iter_mut().enumerate() {
        *z *= hermitian_weight(k, n) / n as f64;
    }
    spec
}

/// Gradient w.r.t. the one-sided filtered bins given the gradient on the
/// analytic signal built from them.
pub(crate) fn analytic_adjoint(grad_analytic: &[Complex64]) -> Vec<Complex64> {
    let n = grad_analytic.len();
    let mut buf = grad_analytic.to_vec();
    signal::fft_complex(&mut buf);
    buf.truncate(signal::n_bins(n));
    for (k, z) in buf.iter_mut().enumerate() {
        *z *= hermitian_weight(k, n) / n as f64;
    }
    buf
}

/// What one feature index refers to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureIndexEntry {
    pub index: usize,
    pub map: usize,
    pub channels: Vec<usize>,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureIndexMap {
    pub kind: FeatureKind,
    pub n_channels: usize,
    pub n_maps: usize,
    pub entries: Vec<FeatureIndexEntry>,
}

pub fn feature_index_map(
    kind: FeatureKind,
    channel_names: &[String],
    n_maps: usize,
) -> Result<FeatureIndexMap> {
    let c = channel_names.len();
    feature_dim(kind, c, n_maps)?;
    let mut entries = Vec::new();
    for map in 0..n_maps {
        match kind {
            FeatureKind::Magnitude => {
                for ch in 0..c {
                    entries.push(FeatureIndexEntry {
                        index: entries.len(),
                        map,
                        channels: vec![ch],
                        label: format!("{}@map{map}", channel_names[ch]),
                    });
                }
            }
            FeatureKind::Correlation | FeatureKind::Plv => {
                for (a, b) in pairs(c) {
                    entries.push(FeatureIndexEntry {
                        index: entries.len(),
                        map,
                        channels: vec![a, b],
                        label: format!("{}-{}@map{map}", channel_names[a], channel_names[b]),
                    });
                }
            }
        }
    }
    Ok(FeatureIndexMap {
        kind,
        n_channels: c,
        n_maps,
        entries,
    })
}
