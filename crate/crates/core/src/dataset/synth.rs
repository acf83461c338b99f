//! Synthetic recordings with planted class differences.
//!
//! Each trial is built in the frequency domain: every channel gets complex
//! Gaussian background in `background_band_hz`, scaled to unit variance in
//! time. Effects then edit the in-band bins of the trials of their class,
//! the result is transformed to time, per-subject channel gains are applied
//! and white noise of standard deviation `noise_level` is added.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::RawDataset;
use crate::error::{Error, Result};
use crate::signal::{self, TrialTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EffectKind {
    /// In-band amplitude of `channel` multiplied by `gain`.
    MagnitudeBoost { channel: usize, band_hz: [f64; 2], gain: f64, class: u8 },
    /// In-band content of both channels becomes `sqrt(1-s)*own + sqrt(s)*shared`.
    CorrelationLink {
        channel_pair: [usize; 2],
        band_hz: [f64; 2],
        strength: f64,
        class: u8,
    },
    /// Both channels carry a common band-limited oscillation, the second one
    /// lagging by a quarter of pi; `jitter` is the share of independent
    /// in-band content that scrambles the phase difference.
    PhaseLock {
        channel_pair: [usize; 2],
        band_hz: [f64; 2],
        jitter: f64,
        class: u8,
    },
}

pub type Effect = EffectKind;

impl EffectKind {
    pub fn class(&self) -> u8 {
        match *self {
            EffectKind::MagnitudeBoost { class, .. }
            | EffectKind::CorrelationLink { class, .. }
            | EffectKind::PhaseLock { class, .. } => class,
        }
    }

    pub fn band_hz(&self) -> [f64; 2] {
        match *self {
            EffectKind::MagnitudeBoost { band_hz, .. }
            | EffectKind::CorrelationLink { band_hz, .. }
            | EffectKind::PhaseLock { band_hz, .. } => band_hz,
        }
    }

    pub fn band_center(&self) -> f64 {
        let [lo, hi] = self.band_hz();
        0.5 * (lo + hi)
    }

    fn channels(&self) -> Vec<usize> {
        match *self {
            EffectKind::MagnitudeBoost { channel, .. } => vec![channel],
            EffectKind::CorrelationLink { channel_pair, .. } | EffectKind::PhaseLock { channel_pair, .. } => {
                channel_pair.to_vec()
            }
        }
    }
}

fn default_background() -> Option<[f64; 2]> {
    None
}

fn default_subject_sigma() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub trials_per_subject: usize,
    pub n_channels: usize,
    pub fs: f64,
    pub duration_s: f64,
    pub noise_level: f64,
    #[serde(default)]
    pub effects: Vec<EffectKind>,
    #[serde(default)]
    pub seed: u64,
    /// Defaults to `[1, min(45, fs/2 - 1)]` Hz.
    #[serde(default = "default_background", skip_serializing_if = "Option::is_none")]
    pub background_band_hz: Option<[f64; 2]>,
    /// Log-normal sigma of the per-subject channel gains.
    #[serde(default = "default_subject_sigma")]
    pub subject_gain_sigma: f64,
}

/// 40 subjects x 4 trials of 8 channels at 128 Hz, 20 s each, with channel
/// 3 boosted twofold in 8-13 Hz for class 1.
pub fn default_synth_spec() -> SynthSpec {
    SynthSpec {
        n_subjects: 40,
        trials_per_subject: 4,
        n_channels: 8,
        fs: 128.0,
        duration_s: 20.0,
        noise_level: 0.5,
        effects: vec![EffectKind::MagnitudeBoost {
            channel: 3,
            band_hz: [8.0, 13.0],
            gain: 2.0,
            class: 1,
        }],
        seed: 0,
        background_band_hz: None,
        subject_gain_sigma: 0.1,
    }
}

fn check_band(field: &str, band: [f64; 2], fs: f64) -> Result<()> {
    let [lo, hi] = band;
    if !(lo > 0.0 && hi > lo && hi < fs / 2.0) {
        return Err(Error::config(
            field,
            format!("band [{lo}, {hi}] must satisfy 0 < low < high < fs/2 = {}", fs / 2.0),
        ));
    }
    Ok(())
}

impl SynthSpec {
    pub fn n_samples(&self) -> usize {
        (self.fs * self.duration_s).round() as usize
    }

    pub fn n_trials(&self) -> usize {
        self.n_subjects * self.trials_per_subject
    }

    pub fn background_band(&self) -> [f64; 2] {
        self.background_band_hz
            .unwrap_or([1.0, 45.0_f64.min(self.fs / 2.0 - 1.0)])
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 2 {
            return Err(Error::config("n_subjects", "at least 2 subjects are required"));
        }
        if self.trials_per_subject < 2 {
            return Err(Error::config("trials_per_subject", "need at least 2 so both classes appear"));
        }
        if self.n_channels == 0 {
            return Err(Error::config("n_channels", "must be positive"));
        }
        if !(self.fs > 0.0 && self.fs.is_finite()) {
            return Err(Error::config("fs", "must be positive"));
        }
        if !(self.duration_s > 0.0) || self.n_samples() < 8 {
            return Err(Error::config("duration_s", "trials need at least 8 samples"));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(Error::config("noise_level", "must be non-negative"));
        }
        if !(self.subject_gain_sigma >= 0.0 && self.subject_gain_sigma.is_finite()) {
            return Err(Error::config("subject_gain_sigma", "must be non-negative"));
        }
        check_band("background_band_hz", self.background_band(), self.fs)?;
        for (i, e) in self.effects.iter().enumerate() {
            let field = |name: &str| format!("effects[{i}].{name}");
            check_band(&field("band_hz"), e.band_hz(), self.fs)?;
            if e.class() > 1 {
                return Err(Error::config(field("class"), "must be 0 or 1"));
            }
            let chans = e.channels();
            if chans.iter().any(|&c| c >= self.n_channels) {
                let name = if chans.len() == 1 { "channel" } else { "channel_pair" };
                return Err(Error::config(field(name), format!("channel out of range 0..{}", self.n_channels)));
            }
            if chans.len() == 2 && chans[0] == chans[1] {
                return Err(Error::config(field("channel_pair"), "channels must differ"));
            }
            match *e {
                EffectKind::MagnitudeBoost { gain, .. } if !(gain > 0.0 && gain.is_finite()) => {
                    return Err(Error::config(field("gain"), "must be positive"));
                }
                EffectKind::CorrelationLink { strength, .. } if !(strength > 0.0 && strength <= 1.0) => {
                    return Err(Error::config(field("strength"), "must lie in (0, 1]"));
                }
                EffectKind::PhaseLock { jitter, .. } if !(0.0..=1.0).contains(&jitter) => {
                    return Err(Error::config(field("jitter"), "must lie in [0, 1]"));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectGains {
    pub subject_id: String,
    pub channel_gains: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: SynthSpec,
    pub n_trials: usize,
    pub n_samples: usize,
    pub channel_names: Vec<String>,
    pub effects: Vec<EffectKind>,
    pub subject_gains: Vec<SubjectGains>,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub dataset: RawDataset,
    pub ground_truth: GroundTruth,
}

fn gaussian_bin(rng: &mut ChaCha8Rng, sigma: f64) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re * sigma, im * sigma)
}

fn band_bins(freqs: &[f64], band: [f64; 2]) -> Vec<usize> {
    (0..freqs.len())
        .filter(|&k| freqs[k] >= band[0] && freqs[k] <= band[1])
        .collect()
}

/// Deterministic in `spec` alone; every trial draws from its own stream.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let n = spec.n_samples();
    let c = spec.n_channels;
    let freqs = signal::bin_freqs(n, spec.fs);
    let background = band_bins(&freqs, spec.background_band());
    if background.is_empty() {
        return Err(Error::config("background_band_hz", "contains no frequency bins"));
    }
    let sigma = n as f64 / (2.0 * (background.len() as f64).sqrt());

    let mut gain_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    gain_rng.set_stream(u64::MAX);
    let subject_gains: Vec<SubjectGains> = (0..spec.n_subjects)
        .map(|s| SubjectGains {
            subject_id: format!("s{s:03}"),
            channel_gains: (0..c)
                .map(|_| (spec.subject_gain_sigma * gain_rng.sample::<f64, _>(StandardNormal)).exp())
                .collect(),
        })
        .collect();

    let lag = Complex64::from_polar(1.0, -std::f64::consts::FRAC_PI_4);
    let mut trials = Vec::with_capacity(spec.n_trials());
    for (s, gains) in subject_gains.iter().enumerate() {
        for t in 0..spec.trials_per_subject {
            let index = s * spec.trials_per_subject + t;
            let label = (t % 2) as u8;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(index as u64);
            let mut bins = vec![vec![Complex64::new(0.0, 0.0); freqs.len()]; c];
            for row in bins.iter_mut() {
                for &k in &background {
                    row[k] = gaussian_bin(&mut rng, sigma);
                }
            }
            for effect in &spec.effects {
                if effect.class() != label {
                    continue;
                }
                let band = band_bins(&freqs, effect.band_hz());
                match *effect {
                    EffectKind::MagnitudeBoost { channel, gain, .. } => {
                        for &k in &band {
                            bins[channel][k] *= gain;
                        }
                    }
                    EffectKind::CorrelationLink {
                        channel_pair: [a, b],
                        strength,
                        ..
                    } => {
                        let (own, shared) = ((1.0 - strength).sqrt(), strength.sqrt());
                        for &k in &band {
                            let src = gaussian_bin(&mut rng, sigma);
                            bins[a][k] = bins[a][k] * own + src * shared;
                            bins[b][k] = bins[b][k] * own + src * shared;
                        }
                    }
                    EffectKind::PhaseLock {
                        channel_pair: [a, b],
                        jitter,
                        ..
                    } => {
                        let (common, own) = ((1.0 - jitter).sqrt(), jitter.sqrt());
                        for &k in &band {
                            let src = gaussian_bin(&mut rng, sigma);
                            bins[a][k] = src * common + bins[a][k] * own;
                            bins[b][k] = (src * common + bins[b][k] * own) * lag;
                        }
                    }
                }
            }
            let mut data = Vec::with_capacity(c);
            for (ch, row) in bins.iter().enumerate() {
                let mut x = signal::irfft_channel(row, n)?;
                for v in x.iter_mut() {
                    *v = *v * gains.channel_gains[ch] + spec.noise_level * rng.sample::<f64, _>(StandardNormal);
                }
                data.push(x);
            }
            trials.push(TrialTensor {
                data,
                fs: spec.fs,
                label,
                subject_id: gains.subject_id.clone(),
                trial_id: format!("{}_t{t:03}", gains.subject_id),
            });
        }
    }
    let channel_names: Vec<String> = (0..c).map(|i| format!("ch{i}")).collect();
    Ok(SynthOutput {
        dataset: RawDataset {
            fs: spec.fs,
            channel_names: channel_names.clone(),
            trials,
        },
        ground_truth: GroundTruth {
            spec: spec.clone(),
            n_trials: spec.n_trials(),
            n_samples: n,
            channel_names,
            effects: spec.effects.clone(),
            subject_gains,
        },
    })
}
