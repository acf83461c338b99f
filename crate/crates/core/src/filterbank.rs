//! Generalized Gaussian band-pass filters defined on the one-sided frequency
//! grid.
//!
//! Each filter has magnitude `exp(-(|x - mu| / alpha)^beta)` with the scale
//! `alpha` reparameterized by the full width at half maximum `h`, so the gain
//! is exactly 1 at the center and exactly 0.5 at `mu +- h/2` for every shape.
//! The stored shape `beta_raw` lives in `[2, 3]` and is stretched to the
//! effective shape `8 * beta_raw - 14` in `[2, 10]`. The phase is linear with a
//! fixed group delay.

use std::f64::consts::{LN_2, PI};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureKind;
use crate::signal::Spectrum;

pub const GROUP_DELAY_S: f64 = 0.02;
pub const INIT_MU_HZ: f64 = 23.0;
pub const INIT_H_HZ: f64 = 44.0;
pub const INIT_BETA_RAW: f64 = 2.0;
pub const BETA_RAW_MIN: f64 = 2.0;
pub const BETA_RAW_MAX: f64 = 3.0;

/// Number of trainable scalars per filter.
pub const PARAMS_PER_FILTER: usize = 3;

pub fn beta_eff(beta_raw: f64) -> f64 {
    8.0 * beta_raw - 14.0
}

/// Scale of the generalized Gaussian whose full width at half maximum is `h`.
pub fn alpha_from_fwhm(h: f64, beta_eff: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::invalid(format!("bandwidth must be positive, got {h}")));
    }
    if !(beta_eff >= 2.0) {
        return Err(Error::invalid(format!("shape must be at least 2, got {beta_eff}")));
    }
    Ok(h / (2.0 * LN_2.powf(1.0 / beta_eff)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterParams {
    pub mu: f64,
    pub h: f64,
    pub beta_raw: f64,
}

impl Default for FilterParams {
    fn default() -> Self {
        FilterParams {
            mu: INIT_MU_HZ,
            h: INIT_H_HZ,
            beta_raw: INIT_BETA_RAW,
        }
    }
}

impl FilterParams {
    pub fn beta_eff(&self) -> f64 {
        beta_eff(self.beta_raw)
    }

    pub fn as_array(&self) -> [f64; PARAMS_PER_FILTER] {
        [self.mu, self.h, self.beta_raw]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        FilterParams {
            mu: v[0],
            h: v[1],
            beta_raw: v[2],
        }
    }

    /// Magnitude response at frequency `x`.
    pub fn gain(&self, x: f64) -> f64 {
        let beta = self.beta_eff();
        // alpha_from_fwhm only fails for h <= 0, which clamping rules out
        let alpha = self.h / (2.0 * LN_2.powf(1.0 / beta));
        (-((x - self.mu).abs() / alpha).powf(beta)).exp()
    }

    /// Partial derivatives of the magnitude at `x` with respect to
    /// `(mu, h, beta_raw)`. All three vanish at `x == mu`.
    pub fn gain_grad(&self, x: f64) -> (f64, [f64; 3]) {
        let beta = self.beta_eff();
        let d = x - self.mu;
        let u = 2.0 * d.abs() / self.h;
        if u == 0.0 {
            return (1.0, [0.0; 3]);
        }
        let u_pow = u.powf(beta);
        let e = LN_2 * u_pow;
        let g = (-e).exp();
        let d_mu = g * LN_2 * beta * (u_pow / u) * (2.0 / self.h) * d.signum();
        let d_h = g * beta * e / self.h;
        let d_beta_raw = -8.0 * g * e * u.ln();
        (g, [d_mu, d_h, d_beta_raw])
    }
}

/// Complex response `|F(x)| * exp(-i 2 pi x tau)` on a frequency grid.
pub fn filter_response(p: &FilterParams, bin_freqs: &[f64], group_delay_s: f64) -> Vec<Complex64> {
    bin_freqs
        .iter()
        .map(|&x| Complex64::from_polar(p.gain(x), -2.0 * PI * x * group_delay_s))
        .collect()
}

pub fn filter_magnitude(p: &FilterParams, bin_freqs: &[f64]) -> Vec<f64> {
    bin_freqs.iter().map(|&x| p.gain(x)).collect()
}

/// Per-bin magnitude derivatives of one filter.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterGrad {
    pub d_mu: Vec<f64>,
    pub d_h: Vec<f64>,
    pub d_beta_raw: Vec<f64>,
}

pub fn filter_response_grad(p: &FilterParams, bin_freqs: &[f64]) -> FilterGrad {
    let mut out = FilterGrad {
        d_mu: Vec::with_capacity(bin_freqs.len()),
        d_h: Vec::with_capacity(bin_freqs.len()),
        d_beta_raw: Vec::with_capacity(bin_freqs.len()),
    };
    for &x in bin_freqs {
        let (_, [a, b, c]) = p.gain_grad(x);
        out.d_mu.push(a);
        out.d_h.push(b);
        out.d_beta_raw.push(c);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// One filter per (channel, map).
    PerElectrode,
    /// One filter per map, applied to every channel.
    SharedAcrossElectrodes,
}

impl Layout {
    pub fn for_feature(kind: FeatureKind) -> Layout {
        match kind {
            FeatureKind::Plv => Layout::SharedAcrossElectrodes,
            FeatureKind::Magnitude | FeatureKind::Correlation => Layout::PerElectrode,
        }
    }
}

/// Fails unless `layout` is the one `kind` requires: phase locking compares
/// phases within one band, so its filters are shared across electrodes.
pub fn check_pairing(kind: FeatureKind, layout: Layout) -> Result<()> {
    let want = Layout::for_feature(kind);
    if want != layout {
        return Err(Error::invalid(format!(
            "{kind:?} features require a {want:?} filter bank, got {layout:?}"
        )));
    }
    Ok(())
}

/// Box constraints applied after every optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClampBounds {
    pub mu_min: f64,
    pub mu_max: f64,
    pub h_min: f64,
    pub h_max: f64,
}

impl ClampBounds {
    pub fn for_sampling_rate(fs: f64) -> Self {
        ClampBounds {
            mu_min: 1.0,
            mu_max: fs / 2.0 - 1.0,
            h_min: 1.0,
            h_max: fs / 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu_min <= self.mu_max) {
            return Err(Error::config("clamp.mu_min", "must not exceed mu_max"));
        }
        if !(self.h_min > 0.0 && self.h_min <= self.h_max) {
            return Err(Error::config("clamp.h_min", "must be positive and not exceed h_max"));
        }
        Ok(())
    }

    pub fn project(&self, p: &mut FilterParams) {
        p.mu = p.mu.clamp(self.mu_min, self.mu_max);
        p.h = p.h.clamp(self.h_min, self.h_max);
        p.beta_raw = p.beta_raw.clamp(BETA_RAW_MIN, BETA_RAW_MAX);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterBank {
    pub layout: Layout,
    pub n_channels: usize,
    pub n_maps: usize,
    /// Map-major: filter `(c, j)` is `params[j * n_channels + c]` for
    /// per-electrode banks, filter `j` is `params[j]` for shared banks.
    pub params: Vec<FilterParams>,
    pub group_delay_s: f64,
}

pub fn init_bank(n_channels: usize, n_maps: usize, layout: Layout) -> Result<FilterBank> {
    if n_channels == 0 || n_maps == 0 {
        return Err(Error::invalid(format!(
            "filter bank needs C >= 1 and K >= 1, got C = {n_channels}, K = {n_maps}"
        )));
    }
    let n_filters = match layout {
        Layout::PerElectrode => n_channels * n_maps,
        Layout::SharedAcrossElectrodes => n_maps,
    };
    Ok(FilterBank {
        layout,
        n_channels,
        n_maps,
        params: vec![FilterParams::default(); n_filters],
        group_delay_s: GROUP_DELAY_S,
    })
}

/// Bank with the layout `kind` requires.
pub fn init_bank_for(kind: FeatureKind, n_channels: usize, n_maps: usize) -> Result<FilterBank> {
    let layout = Layout::for_feature(kind);
    check_pairing(kind, layout)?;
    init_bank(n_channels, n_maps, layout)
}

impl FilterBank {
    pub fn n_filters(&self) -> usize {
        self.params.len()
    }

    pub fn n_trainable(&self) -> usize {
        PARAMS_PER_FILTER * self.n_filters()
    }

    pub fn filter_index(&self, channel: usize, map: usize) -> usize {
        match self.layout {
            Layout::PerElectrode => map * self.n_channels + channel,
            Layout::SharedAcrossElectrodes => map,
        }
    }

    pub fn filter(&self, channel: usize, map: usize) -> &FilterParams {
        &self.params[self.filter_index(channel, map)]
    }

    /// Flat `[mu, h, beta_raw]` per filter.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.as_array()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        for (p, chunk) in self.params.iter_mut().zip(flat.chunks_exact(PARAMS_PER_FILTER)) {
            *p = FilterParams::from_slice(chunk);
        }
    }

    pub fn clamp(&mut self, bounds: &ClampBounds) {
        self.params.iter_mut().for_each(|p| bounds.project(p));
    }

    /// Filter descriptions with their placement, for export.
    pub fn describe(&self) -> Vec<FilterRecord> {
        let mut out = Vec::with_capacity(self.n_filters());
        for map in 0..self.n_maps {
            let channels: Vec<Option<usize>> = match self.layout {
                Layout::PerElectrode => (0..self.n_channels).map(Some).collect(),
                Layout::SharedAcrossElectrodes => vec![None],
            };
            for channel in channels {
                let p = self.filter(channel.unwrap_or(0), map);
                out.push(FilterRecord {
                    channel,
                    map,
                    mu_hz: p.mu,
                    h_hz: p.h,
                    beta_raw: p.beta_raw,
                    beta_eff: p.beta_eff(),
                });
            }
        }
        out
    }

    pub fn to_export(&self) -> BankExport {
        BankExport {
            layout: self.layout,
            n_channels: self.n_channels,
            n_maps: self.n_maps,
            group_delay_s: self.group_delay_s,
            filters: self.describe(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRecord {
    /// `None` for filters shared across electrodes.
    pub channel: Option<usize>,
    pub map: usize,
    pub mu_hz: f64,
    pub h_hz: f64,
    pub beta_raw: f64,
    pub beta_eff: f64,
}

/// Serialized bank: layout metadata plus one record per filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankExport {
    pub layout: Layout,
    pub n_channels: usize,
    pub n_maps: usize,
    pub group_delay_s: f64,
    pub filters: Vec<FilterRecord>,
}

/// Filters every channel of `spectra` with the bank; returns one filtered
/// multichannel spectrum per map.
pub fn apply_filterbank(spectra: &Spectrum, bank: &FilterBank) -> Result<Vec<Spectrum>> {
    if spectra.n_channels() != bank.n_channels {
        return Err(Error::shape(
            format!("{} channels", bank.n_channels),
            format!("{} channels", spectra.n_channels()),
        ));
    }
    let freqs = spectra.bin_freqs();
    let responses: Vec<Vec<Complex64>> = bank
        .params
        .iter()
        .map(|p| filter_response(p, &freqs, bank.group_delay_s))
        .collect();
    Ok(apply_responses(spectra, bank, &responses))
}

pub(crate) fn apply_responses(
    spectra: &Spectrum,
    bank: &FilterBank,
    responses: &[Vec<Complex64>],
) -> Vec<Spectrum> {
    (0..bank.n_maps)
        .map(|map| Spectrum {
            channels: spectra
                .channels
                .iter()
                .enumerate()
                .map(|(c, bins)| {
                    let f = &responses[bank.filter_index(c, map)];
                    bins.iter().zip(f).map(|(x, r)| x * r).collect()
                })
                .collect(),
            n_samples: spectra.n_samples,
            fs: spectra.fs,
        })
        .collect()
}
