use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use bandminer::dataset::{
    generate_synthetic, load_dataset, manifest_path, read_json, save_dataset, write_json, Dataset, DatasetManifest,
    SynthSpec,
};
use bandminer::eval::{self, cross_validate, evaluate, export_interpretation};
use bandminer::trainer::{history_csv, train as train_model, Checkpoint, CHECKPOINT_VERSION};
use log::{info, warn};
use serde::Serialize;

use crate::config::{Overrides, RunConfig};
use crate::Common;

/// Copies log output to stderr and to a file.
struct Tee {
    file: Mutex<File>,
}

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        io::stderr().write_all(buf)?;
        self.file.lock().expect("log file lock").write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        self.file.lock().expect("log file lock").flush()
    }
}

fn init_logging(log_dir: &Path, command: &str) -> Result<()> {
    fs::create_dir_all(log_dir).with_context(|| format!("creating {}", log_dir.display()))?;
    let path = log_dir.join(format!("{command}.log"));
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Pipe(Box::new(Tee { file: Mutex::new(file) })))
        .format_timestamp_secs()
        .try_init();
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn overrides(c: &Common) -> Overrides {
    Overrides {
        seed: c.seed,
        out: c.out.clone(),
        jobs: c.jobs,
        folds: c.folds,
    }
}

fn manifest_channels(dataset: &Path) -> Result<usize> {
    let m: DatasetManifest = read_json(&manifest_path(dataset))?;
    Ok(m.channel_names.len())
}

struct Run {
    config: RunConfig,
    dir: PathBuf,
    dataset: Dataset,
}

impl Run {
    fn open(common: &Common, command: &str) -> Result<Self> {
        let Some(path) = &common.config else {
            bail!("`{command}` needs --config");
        };
        let config = RunConfig::load(path, manifest_channels, &overrides(common))?;
        let dir = config.run_dir();
        init_logging(&dir.join("logs"), command)?;
        info!("{command}: run directory {}", dir.display());
        let dataset = load_dataset(&config.dataset)?;
        if dataset.n_channels() != config.train.n_channels {
            bail!(
                "invalid config field `train.n_channels`: {} but the dataset has {} channels",
                config.train.n_channels,
                dataset.n_channels()
            );
        }
        info!(
            "loaded {} trials from {} subjects",
            dataset.trials.len(),
            dataset.subjects().len()
        );
        Ok(Run { config, dir, dataset })
    }

    fn path(&self, sub: &str, file: &str) -> PathBuf {
        self.dir.join(sub).join(file)
    }

    fn load_checkpoint(&self, path: &Path) -> Result<Checkpoint> {
        let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
        if ck.channel_names != self.dataset.channel_names {
            bail!("checkpoint channels {:?} differ from the dataset's", ck.channel_names);
        }
        Ok(ck)
    }
}

pub fn synth(common: &Common) -> Result<()> {
    let Some(out) = &common.out else {
        bail!("`synth` needs --out <dataset directory>");
    };
    init_logging(&out.join("logs"), "synth")?;
    let mut spec: SynthSpec = match &common.config {
        Some(p) => read_json(p)?,
        None => bandminer::dataset::default_synth_spec(),
    };
    if let Some(seed) = common.seed {
        spec.seed = seed;
    }
    let generated = generate_synthetic(&spec)?;
    write_json(&out.join("ground_truth.json"), &generated.ground_truth)?;
    let manifest = save_dataset(&generated.dataset, out)?;
    info!(
        "wrote {} trials of {} channels to {}",
        manifest.trials.len(),
        manifest.channel_names.len(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    n_trials: usize,
    epochs: usize,
    final_mean_loss: f64,
    final_train_uar: f64,
}

pub fn train(common: &Common) -> Result<()> {
    let run = Run::open(common, "train")?;
    let outcome = train_model(&run.config.train, &run.dataset.trials)?;
    let ck = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        config: run.config.train.clone(),
        fs: run.dataset.fs,
        channel_names: run.dataset.channel_names.clone(),
        state: outcome.state,
    };
    let ck_path = run.path("checkpoints", "model.json");
    ck.save(&ck_path)?;
    write_text(&run.path("reports", "train_history.csv"), &history_csv(&outcome.history)?)?;
    let last = outcome.history.last().expect("at least one epoch");
    write_json(
        &run.path("reports", "train_summary.json"),
        &TrainSummary {
            n_trials: run.dataset.trials.len(),
            epochs: outcome.history.len(),
            final_mean_loss: last.mean_loss,
            final_train_uar: last.train_uar,
        },
    )?;
    info!("checkpoint written to {}", ck_path.display());
    Ok(())
}

pub fn eval(common: &Common, checkpoint: &Path) -> Result<()> {
    let run = Run::open(common, "eval")?;
    let ck = run.load_checkpoint(checkpoint)?;
    let report = evaluate(&ck.state.model, &run.dataset.trials, ck.config.windowing())?;
    write_json(&run.path("reports", "eval.json"), &report)?;
    write_text(&run.path("reports", "eval_predictions.csv"), &eval::predictions_csv(&report)?)?;
    info!("UAR {:.4} on {} trials", report.uar, report.trials.len());
    Ok(())
}

pub fn cv(common: &Common) -> Result<()> {
    let run = Run::open(common, "cv")?;
    let cfg = &run.config;
    info!("{} folds, {} job(s)", cfg.folds, cfg.jobs);
    let outcome = cross_validate(&cfg.train, &run.dataset, cfg.folds, cfg.jobs)?;
    for f in &outcome.folds {
        let name = format!("fold_{:02}.json", f.fold_index);
        write_json(&run.path("reports", &name), f)?;
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config: cfg.train.clone(),
            fs: run.dataset.fs,
            channel_names: run.dataset.channel_names.clone(),
            state: f.state.clone(),
        }
        .save(&run.path("checkpoints", &name))?;
        info!("fold {}: validation UAR {:.4}", f.fold_index, f.val_uar);
    }
    write_text(&run.path("reports", "cv_history.csv"), &eval::cv_history_csv(&outcome.folds)?)?;
    write_json(&run.path("reports", "cv_summary.json"), &outcome.summary)?;
    info!(
        "mean UAR {:.4} +- {:.4}",
        outcome.summary.mean_uar, outcome.summary.std_uar
    );
    Ok(())
}

pub fn export(common: &Common, checkpoint: &Path) -> Result<()> {
    let run = Run::open(common, "export")?;
    let ck = run.load_checkpoint(checkpoint)?;
    let interp = export_interpretation(
        &ck.state.model,
        &run.dataset.trials,
        &run.dataset.channel_names,
        ck.config.windowing(),
        run.config.top_k,
    )?;
    for w in &interp.warnings {
        warn!("{w}");
    }
    let names = &run.dataset.channel_names;
    write_json(&run.path("exports", "interpretation.json"), &interp)?;
    write_text(&run.path("exports", "filters.csv"), &eval::filters_csv(&interp.filters, names)?)?;
    write_text(&run.path("exports", "weights.csv"), &eval::weights_csv(&interp.weights)?)?;
    write_text(&run.path("exports", "top_k.csv"), &eval::weights_csv(&interp.top_k)?)?;
    write_text(
        &run.path("exports", "feature_tests.csv"),
        &eval::feature_tests_csv(&interp.feature_tests)?,
    )?;
    write_text(
        &run.path("exports", "feature_distributions.csv"),
        &eval::distributions_csv(&interp)?,
    )?;
    if let Some(profile) = &interp.magnitude_profile {
        write_text(
            &run.path("exports", "magnitude_profile.csv"),
            &eval::profile_csv(profile, names)?,
        )?;
    }
    info!("interpretation bundle written to {}", run.dir.join("exports").display());
    Ok(())
}
