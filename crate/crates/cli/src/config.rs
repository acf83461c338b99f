use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bandminer::dataset::read_json;
use bandminer::TrainConfig;
use serde::{Deserialize, Serialize};

fn default_name() -> String {
    "run".to_string()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_folds() -> usize {
    10
}

fn default_jobs() -> usize {
    1
}

fn default_top_k() -> usize {
    10
}

/// Run configuration file. Relative paths are resolved against the
/// directory holding the file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawRunConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub dataset: PathBuf,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    /// Training hyper-parameters; `n_channels` may be omitted and is then
    /// taken from the dataset.
    pub train: serde_json::Value,
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub folds: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub name: String,
    pub dataset: PathBuf,
    pub output_dir: PathBuf,
    pub folds: usize,
    pub jobs: usize,
    pub top_k: usize,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path, n_channels: impl FnOnce(&Path) -> Result<usize>, overrides: &Overrides) -> Result<Self> {
        let raw: RawRunConfig = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let dataset = resolve(&raw.dataset);
        let mut train = raw.train;
        let Some(obj) = train.as_object_mut() else {
            bail!("invalid config field `train`: must be an object");
        };
        if !obj.contains_key("n_channels") {
            obj.insert("n_channels".into(), n_channels(&dataset)?.into());
        }
        let mut train: TrainConfig =
            serde_json::from_value(train).with_context(|| format!("invalid `train` section in {}", path.display()))?;
        if let Some(seed) = overrides.seed {
            train.seed = seed;
        }
        train.validate()?;
        let folds = overrides.folds.unwrap_or(raw.folds);
        let jobs = overrides.jobs.unwrap_or(raw.jobs);
        if folds < 2 {
            bail!("invalid config field `folds`: must be at least 2");
        }
        if jobs < 1 {
            bail!("invalid config field `jobs`: must be at least 1");
        }
        if raw.name.is_empty() || raw.name.contains(['/', '\\']) {
            bail!("invalid config field `name`: must be a plain directory name");
        }
        Ok(RunConfig {
            name: raw.name,
            dataset,
            output_dir: overrides.out.clone().unwrap_or_else(|| resolve(&raw.output_dir)),
            folds,
            jobs,
            top_k: raw.top_k,
            train,
        })
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.name)
    }
}
