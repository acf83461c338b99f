//! Spectral primitives: trial standardization, one-sided real FFT, its inverse
//! and analytic-signal construction.
//!
//! Convention: the forward transform is unnormalized, the inverse carries the
//! `1/N` factor. Spectra are one-sided with `N/2 + 1` bins at `k * fs / N`.

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn forward_plan(n: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(n))
}

fn inverse_plan(n: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(n))
}

/// Number of one-sided bins for a real signal of length `n`.
pub fn n_bins(n: usize) -> usize {
    n / 2 + 1
}

/// Bin center frequencies in Hz for a length-`n` real signal.
pub fn bin_freqs(n: usize, fs: f64) -> Vec<f64> {
    (0..n_bins(n)).map(|k| k as f64 * fs / n as f64).collect()
}

/// Weight of one-sided bin `k` in the Hermitian reconstruction: DC and
/// Nyquist appear once, every other bin twice.
pub fn hermitian_weight(k: usize, n: usize) -> f64 {
    if k == 0 || (n.is_multiple_of(2) && k == n / 2) {
        1.0
    } else {
        2.0
    }
}

/// One standardized multichannel window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialTensor {
    /// `data[c][t]`
    pub data: Vec<Vec<f64>>,
    pub fs: f64,
    pub label: u8,
    pub subject_id: String,
    pub trial_id: String,
}

impl TrialTensor {
    pub fn n_channels(&self) -> usize {
        self.data.len()
    }

    pub fn n_samples(&self) -> usize {
        self.data.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone)]
pub struct Standardized {
    pub trial: TrialTensor,
    /// Input had zero variance; `trial.data` is all zeros.
    pub degenerate: bool,
}

/// Standardizes a raw `[C][N]` recording by one scalar mean and population
/// standard deviation computed over all channels and samples jointly.
pub fn standardize_trial(
    raw: &[Vec<f64>],
    fs: f64,
    label: u8,
    subject_id: impl Into<String>,
    trial_id: impl Into<String>,
) -> Result<Standardized> {
    let data = standardize_matrix(raw, fs)?;
    let degenerate = data.is_none();
    let data = data.unwrap_or_else(|| vec![vec![0.0; raw[0].len()]; raw.len()]);
    Ok(Standardized {
        trial: TrialTensor {
            data,
            fs,
            label,
            subject_id: subject_id.into(),
            trial_id: trial_id.into(),
        },
        degenerate,
    })
}

/// Returns `None` when the input is constant.
pub(crate) fn standardize_matrix(raw: &[Vec<f64>], fs: f64) -> Result<Option<Vec<Vec<f64>>>> {
    if raw.is_empty() || raw[0].is_empty() {
        return Err(Error::invalid("trial must have at least one channel and one sample"));
    }
    if !(fs > 0.0 && fs.is_finite()) {
        return Err(Error::invalid(format!("sampling rate must be positive, got {fs}")));
    }
    let n = raw[0].len();
    if raw.iter().any(|row| row.len() != n) {
        return Err(Error::shape(format!("rows of length {n}"), "ragged rows"));
    }
    if raw.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "raw trial samples".into(),
        });
    }
    let count = (raw.len() * n) as f64;
    let mean = raw.iter().flatten().sum::<f64>() / count;
    let var = raw.iter().flatten().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
    let std = var.sqrt();
    if std == 0.0 || std < 1e-300 {
        return Ok(None);
    }
    Ok(Some(
        raw.iter()
            .map(|row| row.iter().map(|v| (v - mean) / std).collect())
            .collect(),
    ))
}

/// One-sided spectrum of a real multichannel signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    /// `channels[c][k]`, `k < n_samples / 2 + 1`
    pub channels: Vec<Vec<Complex64>>,
    pub n_samples: usize,
    pub fs: f64,
}

impl Spectrum {
    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn n_bins(&self) -> usize {
        n_bins(self.n_samples)
    }

    pub fn bin_freqs(&self) -> Vec<f64> {
        bin_freqs(self.n_samples, self.fs)
    }

    pub fn zeros(n_channels: usize, n_samples: usize, fs: f64) -> Self {
        Spectrum {
            channels: vec![vec![Complex64::new(0.0, 0.0); n_bins(n_samples)]; n_channels],
            n_samples,
            fs,
        }
    }
}

/// Unnormalized forward transform of one real channel, one-sided output.
pub fn rfft_channel(x: &[f64]) -> Vec<Complex64> {
    let n = x.len();
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    forward_plan(n).process(&mut buf);
    buf.truncate(n_bins(n));
    buf
}

pub fn rfft(trial: &TrialTensor) -> Spectrum {
    rfft_rows(&trial.data, trial.fs)
}

pub fn rfft_rows(rows: &[Vec<f64>], fs: f64) -> Spectrum {
    let n_samples = rows.first().map_or(0, Vec::len);
    Spectrum {
        channels: rows.iter().map(|r| rfft_channel(r)).collect(),
        n_samples,
        fs,
    }
}

/// Inverse of [`rfft_channel`]. The imaginary parts of the DC and Nyquist bins
/// do not contribute to the real output.
pub fn irfft_channel(bins: &[Complex64], n: usize) -> Result<Vec<f64>> {
    if bins.len() != n_bins(n) {
        return Err(Error::shape(
            format!("{} bins for N = {n}", n_bins(n)),
            format!("{} bins", bins.len()),
        ));
    }
    let mut full = vec![Complex64::new(0.0, 0.0); n];
    full[..bins.len()].copy_from_slice(bins);
    for k in 1..bins.len() {
        if n - k != k {
            full[n - k] = bins[k].conj();
        }
    }
    inverse_plan(n).process(&mut full);
    let scale = 1.0 / n as f64;
    Ok(full.iter().map(|z| z.re * scale).collect())
}

pub fn irfft(spec: &Spectrum, n_samples: usize) -> Result<Vec<Vec<f64>>> {
    if spec.n_samples != n_samples {
        return Err(Error::shape(
            format!("spectrum for N = {n_samples}"),
            format!("N = {}", spec.n_samples),
        ));
    }
    spec.channels
        .iter()
        .map(|bins| irfft_channel(bins, n_samples))
        .collect()
}

/// Analytic signal `x + iH(x)` of one channel from its one-sided spectrum:
/// strictly positive bins doubled, DC and Nyquist kept, negative frequencies
/// zeroed, then a `1/N` inverse complex transform.
pub fn analytic_channel(bins: &[Complex64], n: usize) -> Result<Vec<Complex64>> {
    if bins.len() != n_bins(n) {
        return Err(Error::shape(
            format!("{} bins for N = {n}", n_bins(n)),
            format!("{} bins", bins.len()),
        ));
    }
    let mut full = vec![Complex64::new(0.0, 0.0); n];
    for (k, b) in bins.iter().enumerate() {
        full[k] = b * hermitian_weight(k, n);
    }
    inverse_plan(n).process(&mut full);
    let scale = 1.0 / n as f64;
    full.iter_mut().for_each(|z| *z *= scale);
    Ok(full)
}

pub fn analytic_signal(filtered_spec: &Spectrum, n_samples: usize) -> Result<Vec<Vec<Complex64>>> {
    if filtered_spec.n_samples != n_samples {
        return Err(Error::shape(
            format!("spectrum for N = {n_samples}"),
            format!("N = {}", filtered_spec.n_samples),
        ));
    }
    filtered_spec
        .channels
        .iter()
        .map(|bins| analytic_channel(bins, n_samples))
        .collect()
}

/// Unnormalized forward transform of a complex sequence (full length).
pub(crate) fn fft_complex(x: &mut [Complex64]) {
    forward_plan(x.len()).process(x);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_signal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn constant_trial_is_degenerate() {
        let s = standardize_trial(&[vec![1.0, 1.0], vec![1.0, 1.0]], 1.0, 0, "s", "t").unwrap();
        assert!(s.degenerate);
        assert!(s.trial.data.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn already_standard_trial_is_unchanged() {
        let s = standardize_trial(&[vec![-1.0, 1.0]], 1.0, 1, "s", "t").unwrap();
        assert!(!s.degenerate);
        assert_eq!(s.trial.data, vec![vec![-1.0, 1.0]]);
    }

    #[test]
    fn standardization_uses_joint_population_stats() {
        let s = standardize_trial(&[vec![0.0, 2.0], vec![4.0, 6.0]], 1.0, 0, "s", "t").unwrap();
        let sd = 5f64.sqrt();
        let want = [[-3.0 / sd, -1.0 / sd], [1.0 / sd, 3.0 / sd]];
        for c in 0..2 {
            for t in 0..2 {
                assert!((s.trial.data[c][t] - want[c][t]).abs() < 1e-12);
            }
        }
        let flat: Vec<f64> = s.trial.data.iter().flatten().copied().collect();
        let mean = flat.iter().sum::<f64>() / 4.0;
        let var = flat.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-6 && (var.sqrt() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn standardize_rejects_empty_and_non_finite() {
        assert!(standardize_trial(&[], 1.0, 0, "s", "t").is_err());
        assert!(standardize_trial(&[vec![]], 1.0, 0, "s", "t").is_err());
        assert!(standardize_trial(&[vec![1.0, f64::NAN]], 1.0, 0, "s", "t").is_err());
        assert!(standardize_trial(&[vec![1.0, 2.0]], 0.0, 0, "s", "t").is_err());
    }

    #[test]
    fn dc_only_spectrum() {
        let c = 2.5;
        let n = 16;
        let bins = rfft_channel(&vec![c; n]);
        assert!((bins[0].re - c * n as f64).abs() < 1e-12);
        assert!(bins[1..].iter().all(|b| b.norm() < 1e-12));
    }

    #[test]
    fn cosine_concentrates_in_its_bin() {
        let n = 64;
        let k = 5;
        let x: Vec<f64> = (0..n)
            .map(|t| (2.0 * PI * k as f64 * t as f64 / n as f64).cos())
            .collect();
        let bins = rfft_channel(&x);
        for (j, b) in bins.iter().enumerate() {
            if j == k {
                assert!((b.norm() - n as f64 / 2.0).abs() < 1e-9);
            } else {
                assert!(b.norm() < 1e-9);
            }
        }
    }

    #[test]
    fn bin_grid_endpoints() {
        let f = bin_freqs(10, 100.0);
        assert_eq!(f.len(), 6);
        assert_eq!(f[0], 0.0);
        assert!((f[5] - 50.0).abs() < 1e-12);
        assert_eq!(bin_freqs(9, 90.0).len(), 5);
    }

    #[test]
    fn round_trip_even_and_odd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [1, 2, 7, 64, 101, 128] {
            let x = random_signal(&mut rng, n);
            let y = irfft_channel(&rfft_channel(&x), n).unwrap();
            let scale = x.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
            for (a, b) in x.iter().zip(&y) {
                assert!((a - b).abs() / scale < 1e-9, "n = {n}");
            }
        }
    }

    #[test]
    fn irfft_zero_and_delta() {
        let n = 32;
        let zero = irfft_channel(&vec![Complex64::new(0.0, 0.0); n_bins(n)], n).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        let mut delta = vec![0.0; n];
        delta[0] = 1.0;
        let back = irfft_channel(&rfft_channel(&delta), n).unwrap();
        for (a, b) in delta.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn irfft_length_mismatch() {
        let spec = Spectrum::zeros(2, 16, 8.0);
        assert!(irfft(&spec, 15).is_err());
        assert!(irfft_channel(&spec.channels[0], 20).is_err());
    }

    #[test]
    fn analytic_of_cosine_is_complex_exponential() {
        let n = 256;
        let k = 12;
        let x: Vec<f64> = (0..n)
            .map(|t| (2.0 * PI * k as f64 * t as f64 / n as f64).cos())
            .collect();
        let z = analytic_channel(&rfft_channel(&x), n).unwrap();
        for (t, zt) in z.iter().enumerate() {
            let phase = 2.0 * PI * k as f64 * t as f64 / n as f64;
            assert!((zt - Complex64::from_polar(1.0, phase)).norm() < 1e-9);
        }
        assert!(analytic_channel(&vec![Complex64::new(0.0, 0.0); n_bins(n)], n)
            .unwrap()
            .iter()
            .all(|z| z.norm() == 0.0));
    }

    #[test]
    fn analytic_real_part_matches_irfft_on_random_spectra() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [16, 33, 128] {
            let bins: Vec<Complex64> = (0..n_bins(n))
                .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect();
            let z = analytic_channel(&bins, n).unwrap();
            let x = irfft_channel(&bins, n).unwrap();
            for (a, b) in z.iter().zip(&x) {
                assert!((a.re - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn analytic_has_no_negative_frequency_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 128;
        let fs = 128.0;
        let mut bins = vec![Complex64::new(0.0, 0.0); n_bins(n)];
        for (k, b) in bins.iter_mut().enumerate() {
            let f = k as f64 * fs / n as f64;
            if (10.0..30.0).contains(&f) {
                *b = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            }
        }
        let mut z = analytic_channel(&bins, n).unwrap();
        fft_complex(&mut z);
        let total: f64 = z.iter().map(|c| c.norm_sqr()).sum();
        let negative: f64 = z[n / 2 + 1..].iter().map(|c| c.norm_sqr()).sum();
        assert!(negative < 1e-9 * total);
    }

    #[test]
    fn parseval_one_sided() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in [64, 65] {
            let x = random_signal(&mut rng, n);
            let bins = rfft_channel(&x);
            let time: f64 = x.iter().map(|v| v * v).sum();
            let freq: f64 = bins
                .iter()
                .enumerate()
                .map(|(k, b)| hermitian_weight(k, n) * b.norm_sqr())
                .sum::<f64>()
                / n as f64;
            assert!((time - freq).abs() / time < 1e-6);
        }
    }

    proptest::proptest! {
        #[test]
        fn rfft_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 48;
            let x = random_signal(&mut rng, n);
            let y = random_signal(&mut rng, n);
            let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            let fx = rfft_channel(&x);
            let fy = rfft_channel(&y);
            let fm = rfft_channel(&mix);
            for k in 0..fm.len() {
                proptest::prop_assert!((fm[k] - (fx[k] * a + fy[k] * b)).norm() < 1e-9);
            }
        }
    }
}
