//! On-disk dataset format and the synthetic generator.
//!
//! A dataset directory holds `manifest.json` plus one little-endian `f32`
//! file per trial, row-major `[C x N]`.

mod synth;

pub use synth::{default_synth_spec, generate_synthetic, Effect, EffectKind, GroundTruth, SynthOutput, SynthSpec};

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{standardize_trial, TrialTensor};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialEntry {
    /// Path relative to the manifest directory.
    pub file: String,
    pub subject_id: String,
    pub label: u8,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub fs: f64,
    pub channel_names: Vec<String>,
    pub trials: Vec<TrialEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::config(
                "format_version",
                format!("unsupported version {} (expected {FORMAT_VERSION})", self.format_version),
            ));
        }
        if !(self.fs > 0.0 && self.fs.is_finite()) {
            return Err(Error::config("fs", "must be positive"));
        }
        if self.channel_names.is_empty() {
            return Err(Error::config("channel_names", "must not be empty"));
        }
        if self.trials.is_empty() {
            return Err(Error::config("trials", "trial list is empty"));
        }
        for t in &self.trials {
            if t.label > 1 {
                return Err(Error::Trial {
                    trial: t.file.clone(),
                    reason: format!("label {} is not 0 or 1", t.label),
                });
            }
            if t.n_samples == 0 {
                return Err(Error::Trial {
                    trial: t.file.clone(),
                    reason: "n_samples is zero".into(),
                });
            }
        }
        let subjects: BTreeSet<&str> = self.trials.iter().map(|t| t.subject_id.as_str()).collect();
        if subjects.len() < 2 {
            return Err(Error::config("trials", "at least 2 subjects are required"));
        }
        Ok(())
    }
}

/// Trials as recorded, before standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub fs: f64,
    pub channel_names: Vec<String>,
    pub trials: Vec<TrialTensor>,
}

/// Standardized trials ready for training.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub fs: f64,
    pub channel_names: Vec<String>,
    pub trials: Vec<TrialTensor>,
    /// Trial ids whose recording had zero variance.
    pub degenerate: Vec<String>,
}

impl Dataset {
    pub fn n_channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn subjects(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.trials.iter().map(|t| t.subject_id.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }
}

impl RawDataset {
    pub fn standardize(&self) -> Result<Dataset> {
        let mut trials = Vec::with_capacity(self.trials.len());
        let mut degenerate = Vec::new();
        for t in &self.trials {
            let s = standardize_trial(&t.data, t.fs, t.label, t.subject_id.clone(), t.trial_id.clone()).map_err(|e| {
                Error::Trial {
                    trial: t.trial_id.clone(),
                    reason: e.to_string(),
                }
            })?;
            if s.degenerate {
                log::warn!("trial {} has zero variance; standardized to zeros", t.trial_id);
                degenerate.push(t.trial_id.clone());
            }
            trials.push(s.trial);
        }
        Ok(Dataset {
            fs: self.fs,
            channel_names: self.channel_names.clone(),
            trials,
            degenerate,
        })
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
    }
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn encode_trial(data: &[Vec<f64>]) -> Vec<u8> {
    data.iter()
        .flatten()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect()
}

fn decode_trial(bytes: &[u8], n_channels: usize, n_samples: usize, name: &str) -> Result<Vec<Vec<f64>>> {
    let expected = n_channels * n_samples * 4;
    if bytes.len() != expected {
        let rows = bytes.len() as f64 / (4 * n_samples) as f64;
        return Err(Error::Trial {
            trial: name.to_string(),
            reason: format!(
                "file holds {} bytes ({rows} rows of {n_samples} samples), expected {expected} bytes for {n_channels} rows",
                bytes.len()
            ),
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok(values.chunks(n_samples).map(<[f64]>::to_vec).collect())
}

fn trial_file_name(trial_id: &str) -> String {
    let safe: String = trial_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("trials/{safe}.f32")
}

/// Writes trial files first and the manifest last.
pub fn save_dataset(raw: &RawDataset, dir: &Path) -> Result<DatasetManifest> {
    let trials_dir = dir.join("trials");
    fs::create_dir_all(&trials_dir).map_err(io_err(&trials_dir))?;
    let mut entries = Vec::with_capacity(raw.trials.len());
    for t in &raw.trials {
        if t.n_channels() != raw.channel_names.len() {
            return Err(Error::Trial {
                trial: t.trial_id.clone(),
                reason: format!("{} channels, manifest has {}", t.n_channels(), raw.channel_names.len()),
            });
        }
        let file = trial_file_name(&t.trial_id);
        let path = dir.join(&file);
        fs::write(&path, encode_trial(&t.data)).map_err(io_err(&path))?;
        entries.push(TrialEntry {
            file,
            subject_id: t.subject_id.clone(),
            label: t.label,
            n_samples: t.n_samples(),
        });
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        fs: raw.fs,
        channel_names: raw.channel_names.clone(),
        trials: entries,
    };
    manifest.validate()?;
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Accepts either the manifest file or its directory.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn load_raw_dataset(path: &Path) -> Result<RawDataset> {
    let manifest_file = manifest_path(path);
    let manifest: DatasetManifest = read_json(&manifest_file)?;
    manifest.validate()?;
    let base = manifest_file.parent().unwrap_or(Path::new("."));
    let c = manifest.channel_names.len();
    let mut trials = Vec::with_capacity(manifest.trials.len());
    for entry in &manifest.trials {
        let path = base.join(&entry.file);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let data = decode_trial(&bytes, c, entry.n_samples, &entry.file)?;
        let trial_id = Path::new(&entry.file)
            .file_stem()
            .map_or_else(|| entry.file.clone(), |s| s.to_string_lossy().into_owned());
        trials.push(TrialTensor {
            data,
            fs: manifest.fs,
            label: entry.label,
            subject_id: entry.subject_id.clone(),
            trial_id,
        });
    }
    Ok(RawDataset {
        fs: manifest.fs,
        channel_names: manifest.channel_names,
        trials,
    })
}

/// Loads and standardizes every trial.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    load_raw_dataset(path)?.standardize()
}
