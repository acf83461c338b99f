//! Subject-held-out cross-validation, recall metrics, statistics and
//! interpretation exports.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::features::{feature_index_map, FeatureIndexMap, FeatureKind};
use crate::filterbank::FilterRecord;
use crate::gradient::Model;
use crate::signal::{self, TrialTensor};
use crate::trainer::{sample_windows, train, EpochRecord, ModelState, TrainConfig, WindowMode, Windowing};

/// Unweighted average recall over the classes present in `truth`.
pub fn uar(predicted: &[u8], truth: &[u8]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::shape(truth.len(), predicted.len()));
    }
    let mut recalls = Vec::with_capacity(2);
    for class in [0u8, 1u8] {
        let total = truth.iter().filter(|&&t| t == class).count();
        if total == 0 {
            return Err(Error::Statistics(format!("class {class} absent from true labels")));
        }
        let hits = truth
            .iter()
            .zip(predicted)
            .filter(|(&t, &p)| t == class && p == class)
            .count();
        recalls.push(hits as f64 / total as f64);
    }
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Strictly greater than one half is class 1.
pub fn threshold(prob: f64) -> u8 {
    u8::from(prob > 0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialPrediction {
    pub trial_id: String,
    pub subject_id: String,
    pub label: u8,
    pub n_windows: usize,
    /// Mean of the window probabilities.
    pub probability: f64,
    pub predicted: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub uar: f64,
    pub trials: Vec<TrialPrediction>,
}

fn eval_windows(trial: &TrialTensor, windowing: Option<Windowing>) -> Result<Vec<TrialTensor>> {
    // eval windows are deterministic; the generator is never drawn from
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    sample_windows(trial, WindowMode::Eval, windowing, &mut unused)
}

/// Probability of one trial: eval-mode predictions averaged over its
/// consecutive windows.
pub fn trial_probability(model: &Model, trial: &TrialTensor, windowing: Option<Windowing>) -> Result<(f64, usize)> {
    let windows = eval_windows(trial, windowing)?;
    let spectra: Vec<_> = windows.iter().map(signal::rfft).collect();
    let probs = model.predict_eval(&spectra)?;
    Ok((probs.iter().sum::<f64>() / probs.len() as f64, probs.len()))
}

pub fn evaluate(model: &Model, val_trials: &[TrialTensor], windowing: Option<Windowing>) -> Result<EvalReport> {
    let mut trials = Vec::with_capacity(val_trials.len());
    for t in val_trials {
        let (probability, n_windows) = trial_probability(model, t, windowing)?;
        trials.push(TrialPrediction {
            trial_id: t.trial_id.clone(),
            subject_id: t.subject_id.clone(),
            label: t.label,
            n_windows,
            probability,
            predicted: threshold(probability),
        });
    }
    let predicted: Vec<u8> = trials.iter().map(|t| t.predicted).collect();
    let truth: Vec<u8> = trials.iter().map(|t| t.label).collect();
    Ok(EvalReport {
        uar: uar(&predicted, &truth)?,
        trials,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold_index: usize,
    pub train_subjects: Vec<String>,
    pub val_subjects: Vec<String>,
    pub val_uar: f64,
    pub history: Vec<EpochRecord>,
    pub state: ModelState,
    pub evaluation: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub n_folds: usize,
    pub seed: u64,
    pub feature_kind: FeatureKind,
    pub fold_uars: Vec<f64>,
    pub mean_uar: f64,
    /// Population standard deviation across folds.
    pub std_uar: f64,
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub folds: Vec<FoldReport>,
    pub summary: CvSummary,
}

/// Sorted distinct subject ids shuffled with `seed` and dealt into
/// `n_folds` groups whose sizes differ by at most one (larger ones first).
pub fn partition_subjects(subjects: &[String], n_folds: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    let mut ids: Vec<String> = subjects.to_vec();
    ids.sort();
    ids.dedup();
    if n_folds < 2 {
        return Err(Error::invalid("cross-validation needs at least 2 folds"));
    }
    if ids.len() < n_folds {
        return Err(Error::invalid(format!(
            "{} subjects cannot fill {n_folds} folds; lower the fold count with --folds",
            ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let base = ids.len() / n_folds;
    let extra = ids.len() % n_folds;
    let mut out = Vec::with_capacity(n_folds);
    let mut at = 0;
    for f in 0..n_folds {
        let size = base + usize::from(f < extra);
        let mut fold = ids[at..at + size].to_vec();
        fold.sort();
        out.push(fold);
        at += size;
    }
    Ok(out)
}

fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(fold as u64 + 1)
}

fn run_fold(config: &TrainConfig, dataset: &Dataset, fold_index: usize, val_subjects: &[String]) -> Result<FoldReport> {
    let (train_set, val_set): (Vec<TrialTensor>, Vec<TrialTensor>) = dataset
        .trials
        .iter()
        .cloned()
        .partition(|t| !val_subjects.contains(&t.subject_id));
    let mut train_subjects: Vec<String> = train_set.iter().map(|t| t.subject_id.clone()).collect();
    train_subjects.sort();
    train_subjects.dedup();
    let mut fold_config = config.clone();
    fold_config.seed = fold_seed(config.seed, fold_index);
    // oversampling happens inside `train`, on the training side only
    let outcome = train(&fold_config, &train_set)?;
    let evaluation = evaluate(&outcome.state.model, &val_set, config.windowing())?;
    Ok(FoldReport {
        fold_index,
        train_subjects,
        val_subjects: val_subjects.to_vec(),
        val_uar: evaluation.uar,
        history: outcome.history,
        state: outcome.state,
        evaluation,
    })
}

/// Subject-held-out cross-validation with `jobs` folds trained concurrently.
/// Results do not depend on `jobs`.
pub fn cross_validate(config: &TrainConfig, dataset: &Dataset, n_folds: usize, jobs: usize) -> Result<CvOutcome> {
    config.validate()?;
    let subjects: Vec<String> = dataset.trials.iter().map(|t| t.subject_id.clone()).collect();
    let folds = partition_subjects(&subjects, n_folds, config.seed)?;
    let jobs = jobs.clamp(1, n_folds);
    let mut results: Vec<Option<Result<FoldReport>>> = (0..n_folds).map(|_| None).collect();
    if jobs == 1 {
        for (i, val) in folds.iter().enumerate() {
            results[i] = Some(run_fold(config, dataset, i, val));
        }
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..jobs)
                .map(|w| {
                    let folds = &folds;
                    scope.spawn(move || {
                        (w..n_folds)
                            .step_by(jobs)
                            .map(|i| (i, run_fold(config, dataset, i, &folds[i])))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("fold worker panicked") {
                    results[i] = Some(r);
                }
            }
        });
    }
    let folds: Vec<FoldReport> = results
        .into_iter()
        .map(|r| r.expect("every fold scheduled"))
        .collect::<Result<_>>()?;
    let fold_uars: Vec<f64> = folds.iter().map(|f| f.val_uar).collect();
    let mean = fold_uars.iter().sum::<f64>() / n_folds as f64;
    let std = (fold_uars.iter().map(|u| (u - mean).powi(2)).sum::<f64>() / n_folds as f64).sqrt();
    Ok(CvOutcome {
        summary: CvSummary {
            n_folds,
            seed: config.seed,
            feature_kind: config.feature_kind,
            fold_uars,
            mean_uar: mean,
            std_uar: std,
        },
        folds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: f64,
    pub n_a: usize,
    pub n_b: usize,
    pub mean_a: f64,
    pub mean_b: f64,
}

/// Independent two-sample Student t-test with pooled variance, two-sided.
pub fn two_sample_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Statistics("t-test needs at least 2 values per group".into()));
    }
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let (ma, mb) = (mean(a), mean(b));
    let ss = |x: &[f64], m: f64| x.iter().map(|v| (v - m).powi(2)).sum::<f64>();
    let df = (a.len() + b.len() - 2) as f64;
    let pooled = (ss(a, ma) + ss(b, mb)) / df;
    if !(pooled > 0.0) || !pooled.is_finite() {
        return Err(Error::Statistics("t-test with zero pooled variance".into()));
    }
    let se = (pooled * (1.0 / a.len() as f64 + 1.0 / b.len() as f64)).sqrt();
    let t = (ma - mb) / se;
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Statistics(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest {
        t,
        p,
        df,
        n_a: a.len(),
        n_b: b.len(),
        mean_a: ma,
        mean_b: mb,
    })
}

/// Relative change `(A - B) / B` of grand-averaged magnitude spectra of two
/// classes, per channel and frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeProfile {
    pub class_a: u8,
    pub class_b: u8,
    pub freqs: Vec<f64>,
    /// `relative_change[c][k]`; `None` where the class-b average is zero.
    pub relative_change: Vec<Vec<Option<f64>>>,
    pub undefined_bins: usize,
}

fn interpolate(src_freqs: &[f64], values: &[f64], x: f64) -> f64 {
    match src_freqs.iter().position(|&f| f >= x) {
        Some(0) => values[0],
        None => *values.last().expect("non-empty spectrum"),
        Some(i) => {
            let (f0, f1) = (src_freqs[i - 1], src_freqs[i]);
            let w = (x - f0) / (f1 - f0);
            values[i - 1] * (1.0 - w) + values[i] * w
        }
    }
}

/// Spectral magnitudes are scaled by `1/sqrt(N)` so trials of different
/// lengths average on a common footing; the common grid is the native bin
/// grid of the most frequent trial length.
pub fn magnitude_profile_relative_change(trials: &[TrialTensor], class_a: u8, class_b: u8) -> Result<MagnitudeProfile> {
    let first = trials.first().ok_or_else(|| Error::invalid("no trials"))?;
    let fs = first.fs;
    let c = first.n_channels();
    let mut length_counts: BTreeMap<usize, usize> = BTreeMap::new();
    for t in trials {
        *length_counts.entry(t.n_samples()).or_default() += 1;
    }
    let n_grid = length_counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(&n, _)| n)
        .expect("non-empty");
    let grid = signal::bin_freqs(n_grid, fs);
    let mut sums = [vec![vec![0.0; grid.len()]; c], vec![vec![0.0; grid.len()]; c]];
    let mut counts = [0usize; 2];
    for t in trials {
        let slot = if t.label == class_a {
            0
        } else if t.label == class_b {
            1
        } else {
            continue;
        };
        counts[slot] += 1;
        let spec = signal::rfft(t);
        let freqs = spec.bin_freqs();
        let scale = 1.0 / (t.n_samples() as f64).sqrt();
        for (ch, bins) in spec.channels.iter().enumerate() {
            let mags: Vec<f64> = bins.iter().map(|z| z.norm() * scale).collect();
            for (k, &x) in grid.iter().enumerate() {
                sums[slot][ch][k] += if t.n_samples() == n_grid {
                    mags[k]
                } else {
                    interpolate(&freqs, &mags, x)
                };
            }
        }
    }
    if counts[0] == 0 || counts[1] == 0 {
        return Err(Error::Statistics("both classes must be present for a magnitude profile".into()));
    }
    let mut undefined = 0;
    let relative_change = (0..c)
        .map(|ch| {
            (0..grid.len())
                .map(|k| {
                    let a = sums[0][ch][k] / counts[0] as f64;
                    let b = sums[1][ch][k] / counts[1] as f64;
                    if b == 0.0 {
                        undefined += 1;
                        None
                    } else {
                        Some((a - b) / b)
                    }
                })
                .collect()
        })
        .collect();
    Ok(MagnitudeProfile {
        class_a,
        class_b,
        freqs: grid,
        relative_change,
        undefined_bins: undefined,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightEntry {
    pub index: usize,
    pub label: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTest {
    pub index: usize,
    pub label: String,
    pub weight: f64,
    /// `None` when the test is degenerate (e.g. constant feature).
    pub ttest: Option<TTest>,
}

/// Raw features per trial, split by class; `values[t][d]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassFeatures {
    pub label: u8,
    pub trial_ids: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interpretation {
    pub feature_kind: FeatureKind,
    pub filters: Vec<FilterRecord>,
    pub feature_index_map: FeatureIndexMap,
    pub weights: Vec<WeightEntry>,
    pub class_features: Vec<ClassFeatures>,
    /// Class 1 vs class 0 for each top-ranked feature.
    pub feature_tests: Vec<FeatureTest>,
    /// Non-zero weights ranked by magnitude.
    pub top_k: Vec<WeightEntry>,
    pub magnitude_profile: Option<MagnitudeProfile>,
    pub warnings: Vec<String>,
}

/// Ranks non-zero weights by `|w|`, largest first, ties by index.
pub fn rank_weights(weights: &[f64], index_map: &FeatureIndexMap, k: usize) -> Vec<WeightEntry> {
    let mut idx: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] != 0.0).collect();
    idx.sort_by(|&a, &b| weights[b].abs().total_cmp(&weights[a].abs()).then(a.cmp(&b)));
    idx.into_iter()
        .take(k)
        .map(|i| WeightEntry {
            index: i,
            label: index_map.entries[i].label.clone(),
            weight: weights[i],
        })
        .collect()
}

/// Mean raw feature vector over a trial's eval windows.
pub fn trial_features(model: &Model, trial: &TrialTensor, windowing: Option<Windowing>) -> Result<Vec<f64>> {
    let windows = eval_windows(trial, windowing)?;
    let mut acc = vec![0.0; model.feature_dim()];
    for w in &windows {
        for (a, v) in acc.iter_mut().zip(model.features(&signal::rfft(w))?) {
            *a += v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= windows.len() as f64);
    Ok(acc)
}

pub fn export_interpretation(
    model: &Model,
    trials: &[TrialTensor],
    channel_names: &[String],
    windowing: Option<Windowing>,
    top_k: usize,
) -> Result<Interpretation> {
    let index_map = feature_index_map(model.kind, channel_names, model.bank.n_maps)?;
    let weights: Vec<WeightEntry> = model
        .head
        .weights
        .iter()
        .enumerate()
        .map(|(i, &w)| WeightEntry {
            index: i,
            label: index_map.entries[i].label.clone(),
            weight: w,
        })
        .collect();
    let mut class_features: Vec<ClassFeatures> = [0u8, 1]
        .iter()
        .map(|&label| ClassFeatures {
            label,
            trial_ids: Vec::new(),
            values: Vec::new(),
        })
        .collect();
    for t in trials {
        let slot = &mut class_features[usize::from(t.label != 0)];
        slot.trial_ids.push(t.trial_id.clone());
        slot.values.push(trial_features(model, t, windowing)?);
    }
    let ranked = rank_weights(&model.head.weights, &index_map, top_k);
    let mut warnings = Vec::new();
    if ranked.is_empty() {
        warnings.push("all classifier weights are zero; no features ranked".to_string());
    }
    let feature_tests = ranked
        .iter()
        .map(|e| {
            let col = |cf: &ClassFeatures| cf.values.iter().map(|v| v[e.index]).collect::<Vec<f64>>();
            FeatureTest {
                index: e.index,
                label: e.label.clone(),
                weight: e.weight,
                ttest: two_sample_ttest(&col(&class_features[1]), &col(&class_features[0])).ok(),
            }
        })
        .collect();
    let magnitude_profile = if model.kind == FeatureKind::Magnitude {
        match magnitude_profile_relative_change(trials, 1, 0) {
            Ok(p) => Some(p),
            Err(e) => {
                warnings.push(format!("magnitude profile skipped: {e}"));
                None
            }
        }
    } else {
        None
    };
    Ok(Interpretation {
        feature_kind: model.kind,
        filters: model.bank.describe(),
        feature_index_map: index_map,
        weights,
        class_features,
        feature_tests,
        top_k: ranked,
        magnitude_profile,
        warnings,
    })
}

fn csv_string(rows: Vec<Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.write_record(&row).map_err(|e| Error::invalid(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Rows are channels, columns are frequency bins; undefined cells are empty.
pub fn profile_csv(profile: &MagnitudeProfile, channel_names: &[String]) -> Result<String> {
    let mut rows = Vec::with_capacity(profile.relative_change.len() + 1);
    let mut header = vec!["channel".to_string()];
    header.extend(profile.freqs.iter().map(|f| f.to_string()));
    rows.push(header);
    for (c, vals) in profile.relative_change.iter().enumerate() {
        let mut row = vec![channel_names.get(c).cloned().unwrap_or_else(|| c.to_string())];
        row.extend(vals.iter().map(|v| v.map_or(String::new(), |x| x.to_string())));
        rows.push(row);
    }
    csv_string(rows)
}

/// Rows are features, columns are trials (class 0 first, then class 1).
pub fn distributions_csv(interp: &Interpretation) -> Result<String> {
    let mut header = vec!["feature".to_string()];
    for cf in &interp.class_features {
        header.extend(cf.trial_ids.iter().map(|id| format!("{id}:class{}", cf.label)));
    }
    let mut rows = vec![header];
    for entry in &interp.feature_index_map.entries {
        let mut row = vec![entry.label.clone()];
        for cf in &interp.class_features {
            row.extend(cf.values.iter().map(|v| v[entry.index].to_string()));
        }
        rows.push(row);
    }
    csv_string(rows)
}

/// Columns `channel,map,mu_hz,h_hz,beta_raw,beta_eff`; shared filters leave
/// `channel` empty.
pub fn filters_csv(filters: &[FilterRecord], channel_names: &[String]) -> Result<String> {
    let mut rows = vec![["channel", "map", "mu_hz", "h_hz", "beta_raw", "beta_eff"].map(String::from).to_vec()];
    for f in filters {
        rows.push(vec![
            f.channel
                .map(|c| channel_names.get(c).cloned().unwrap_or_else(|| c.to_string()))
                .unwrap_or_default(),
            f.map.to_string(),
            f.mu_hz.to_string(),
            f.h_hz.to_string(),
            f.beta_raw.to_string(),
            f.beta_eff.to_string(),
        ]);
    }
    csv_string(rows)
}

pub fn weights_csv(weights: &[WeightEntry]) -> Result<String> {
    let mut rows = vec![vec!["index".to_string(), "feature".into(), "weight".into()]];
    rows.extend(
        weights
            .iter()
            .map(|w| vec![w.index.to_string(), w.label.clone(), w.weight.to_string()]),
    );
    csv_string(rows)
}

/// Empty statistics cells mark degenerate tests.
pub fn feature_tests_csv(tests: &[FeatureTest]) -> Result<String> {
    let mut rows = vec![["index", "feature", "weight", "t", "p", "df", "mean_class1", "mean_class0"]
        .map(String::from)
        .to_vec()];
    for t in tests {
        let stats = match &t.ttest {
            Some(r) => [r.t, r.p, r.df, r.mean_a, r.mean_b].iter().map(f64::to_string).collect(),
            None => vec![String::new(); 5],
        };
        let mut row = vec![t.index.to_string(), t.label.clone(), t.weight.to_string()];
        row.extend(stats);
        rows.push(row);
    }
    csv_string(rows)
}

/// Columns `fold,epoch,mean_loss,train_uar,lr`.
pub fn cv_history_csv(folds: &[FoldReport]) -> Result<String> {
    let mut rows = vec![["fold", "epoch", "mean_loss", "train_uar", "lr"].map(String::from).to_vec()];
    for f in folds {
        for h in &f.history {
            rows.push(vec![
                f.fold_index.to_string(),
                h.epoch.to_string(),
                h.mean_loss.to_string(),
                h.train_uar.to_string(),
                h.lr.to_string(),
            ]);
        }
    }
    csv_string(rows)
}

/// Columns `trial_id,subject_id,label,n_windows,probability,predicted`.
pub fn predictions_csv(report: &EvalReport) -> Result<String> {
    let mut rows = vec![["trial_id", "subject_id", "label", "n_windows", "probability", "predicted"]
        .map(String::from)
        .to_vec()];
    for t in &report.trials {
        rows.push(vec![
            t.trial_id.clone(),
            t.subject_id.clone(),
            t.label.to_string(),
            t.n_windows.to_string(),
            t.probability.to_string(),
            t.predicted.to_string(),
        ]);
    }
    csv_string(rows)
}
