//! One pass/fail line per acceptance criterion. Exits non-zero if any fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use bandminer::dataset::{default_synth_spec, generate_synthetic, write_json, Dataset, EffectKind, SynthSpec};
use bandminer::eval::{cross_validate, rank_weights, two_sample_ttest, CvOutcome};
use bandminer::features::{feature_index_map, plv_direct_oracle, plv_features};
use bandminer::filterbank::{filter_magnitude, FilterParams};
use bandminer::signal::{analytic_channel, rfft_channel};
use bandminer::{count_parameters, FeatureKind, TrainConfig};
use common::{check_gradients, tiny_batch, tiny_model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FOLDS: usize = 10;
const BAND: [f64; 2] = [8.0, 13.0];
const BOOST_CHANNEL: usize = 3;
const LINK_PAIR: [usize; 2] = [1, 5];

const ANCHOR_TOL: f64 = 1e-12;
const PLV_TOL: f64 = 1e-10;
const GRAD_TOL: f64 = 1e-3;
const MU_TOL_HZ: f64 = 2.0;
const NONZERO_W: f64 = 1e-3;
const TTEST_TOL: f64 = 1e-3;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

struct Report {
    failures: usize,
}

impl Report {
    fn run(&mut self, id: usize, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Outcome) -> Duration {
        let t0 = Instant::now();
        let mut o = f();
        let took = t0.elapsed();
        if let Some(b) = budget {
            if took > b {
                o.pass = false;
                o.detail.push_str(&format!("; over the {:.0?} budget", b));
            }
        }
        if !o.pass {
            self.failures += 1;
        }
        println!(
            "{} {:>2} {:<36} {:>9.1?}  {}",
            if o.pass { "PASS" } else { "FAIL" },
            id,
            name,
            took,
            o.detail
        );
        took
    }
}

fn secs(s: u64) -> Option<Duration> {
    Some(Duration::from_secs(s))
}

fn dataset(spec: &SynthSpec) -> Dataset {
    generate_synthetic(spec)
        .expect("generate")
        .dataset
        .standardize()
        .expect("standardize")
}

fn boost_spec() -> SynthSpec {
    let spec = default_synth_spec();
    match spec.effects[..] {
        [EffectKind::MagnitudeBoost { channel, band_hz, .. }] => {
            assert_eq!((channel, band_hz), (BOOST_CHANNEL, BAND))
        }
        _ => panic!("default spec plants one magnitude boost"),
    }
    spec
}

fn magnitude_config(gamma: f64) -> TrainConfig {
    let mut cfg = TrainConfig::new(FeatureKind::Magnitude, 8, 1, 300);
    cfg.batch_size = 16;
    cfg.lr0 = 1.0;
    cfg.gamma = gamma;
    cfg
}

fn correlation_config() -> TrainConfig {
    let mut cfg = TrainConfig::new(FeatureKind::Correlation, 8, 1, 100);
    cfg.batch_size = 16;
    cfg.lr0 = 2.0;
    cfg
}

fn cv(cfg: &TrainConfig, ds: &Dataset) -> CvOutcome {
    cross_validate(cfg, ds, FOLDS, 1).expect("cross validation")
}

fn summary_bytes(out: &CvOutcome) -> Vec<u8> {
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("cv_summary.json");
    write_json(&path, &out.summary).expect("write summary");
    std::fs::read(path).expect("read summary")
}

fn nonzero_weights(out: &CvOutcome) -> Vec<usize> {
    out.folds
        .iter()
        .map(|f| f.state.model.head.weights.iter().filter(|w| w.abs() > NONZERO_W).count())
        .collect()
}

/// Distance between the 0.9 and 0.1 crossings of the upper skirt on a 0.1 Hz grid.
fn transition_width(p: &FilterParams) -> f64 {
    let grid: Vec<f64> = (0..=2000).map(|i| i as f64 * 0.1).collect();
    let mags = filter_magnitude(p, &grid);
    let crossing = |level: f64| {
        let i = (0..grid.len())
            .find(|&i| grid[i] >= p.mu && mags[i] < level)
            .expect("skirt falls below level on the grid");
        grid[i]
    };
    crossing(0.1) - crossing(0.9)
}

fn parameter_counts() -> Outcome {
    let table = [
        (FeatureKind::Magnitude, 14, 113),
        (FeatureKind::Correlation, 14, 267),
        (FeatureKind::Plv, 14, 189),
        (FeatureKind::Magnitude, 62, 497),
        (FeatureKind::Correlation, 62, 4155),
        (FeatureKind::Plv, 62, 3789),
    ];
    let mut bad = Vec::new();
    for (kind, c, want) in table {
        let got = count_parameters(kind, c, 2).expect("count");
        if got != want {
            bad.push(format!("{kind:?}/{c}: {got} != {want}"));
        }
    }
    outcome(bad.is_empty(), if bad.is_empty() { "6/6 exact".into() } else { bad.join(", ") })
}

fn filter_anchors() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let p = FilterParams {
            mu: rng.random_range(1.0..63.0),
            h: rng.random_range(1.0..64.0),
            beta_raw: rng.random_range(2.0..=3.0),
        };
        let m = filter_magnitude(&p, &[p.mu, p.mu - p.h / 2.0, p.mu + p.h / 2.0]);
        worst = worst.max((m[0] - 1.0).abs()).max((m[1] - 0.5).abs()).max((m[2] - 0.5).abs());
    }
    outcome(worst < ANCHOR_TOL, format!("max deviation {worst:.1e}"))
}

fn sinc_limit() -> Outcome {
    let widths: Vec<f64> = [2.0, 4.0, 6.0, 8.0, 10.0]
        .iter()
        .map(|be: &f64| {
            transition_width(&FilterParams {
                mu: 23.0,
                h: 44.0,
                beta_raw: (be + 14.0) / 8.0,
            })
        })
        .collect();
    let ratio = widths[4] / widths[0];
    let monotone = widths.windows(2).all(|w| w[1] < w[0]);
    outcome(
        ratio < 0.3 && monotone,
        format!("widths {widths:.1?} Hz, ratio {ratio:.3}"),
    )
}

fn plv_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(16..256);
        let mut analytic = || {
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            analytic_channel(&rfft_channel(&x), n).expect("analytic")
        };
        let (a, b) = (analytic(), analytic());
        let fast = plv_features(&[vec![a.clone(), b.clone()]]).expect("plv").values[0];
        worst = worst.max((fast - plv_direct_oracle(&a, &b).expect("oracle")).abs());
    }
    outcome(worst < PLV_TOL, format!("max deviation {worst:.1e}"))
}

fn gradient_check() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for (i, kind) in [FeatureKind::Magnitude, FeatureKind::Correlation, FeatureKind::Plv]
        .into_iter()
        .enumerate()
    {
        let trials = tiny_batch(40 + i as u64, 4, 3, 64, 64.0);
        let model = tiny_model(50 + i as u64, kind, 3);
        let r = check_gradients(&model, &trials, 0.0);
        pass &= r.worst_rel < GRAD_TOL && r.checked > 0;
        parts.push(format!("{kind:?} {}/{} rel {:.1e}", r.checked, model.n_trainable(), r.worst_rel));
    }
    outcome(pass, parts.join(", "))
}

fn magnitude_recovery(out: &CvOutcome) -> Outcome {
    let map = feature_index_map(FeatureKind::Magnitude, &channel_names(8), 1).expect("map");
    let centre = (BAND[0] + BAND[1]) / 2.0;
    let mut on_channel = 0;
    let mut mu_ok = 0;
    let mut mus = Vec::new();
    for f in &out.folds {
        let m = &f.state.model;
        let Some(top) = rank_weights(&m.head.weights, &map, 1).into_iter().next() else {
            continue;
        };
        let entry = &map.entries[top.index];
        if entry.channels == [BOOST_CHANNEL] {
            on_channel += 1;
        }
        let mu = m.bank.filter(entry.channels[0], entry.map).mu;
        mus.push(mu);
        if (mu - centre).abs() <= MU_TOL_HZ {
            mu_ok += 1;
        }
    }
    let uar = out.summary.mean_uar;
    outcome(
        uar >= 0.90 && on_channel == FOLDS && mu_ok == FOLDS,
        format!("UAR {uar:.3}, top on ch{BOOST_CHANNEL} {on_channel}/{FOLDS}, mu {mus:.1?}"),
    )
}

fn correlation_recovery() -> Outcome {
    let spec = SynthSpec {
        effects: vec![EffectKind::CorrelationLink {
            channel_pair: LINK_PAIR,
            band_hz: BAND,
            strength: 0.8,
            class: 1,
        }],
        ..default_synth_spec()
    };
    let out = cv(&correlation_config(), &dataset(&spec));
    let map = feature_index_map(FeatureKind::Correlation, &channel_names(8), 1).expect("map");
    let hits = out
        .folds
        .iter()
        .filter(|f| {
            rank_weights(&f.state.model.head.weights, &map, 1)
                .first()
                .is_some_and(|top| map.entries[top.index].channels == LINK_PAIR)
        })
        .count();
    let uar = out.summary.mean_uar;
    outcome(
        uar >= 0.85 && hits >= 8,
        format!("UAR {uar:.3}, planted pair top-1 in {hits}/{FOLDS}"),
    )
}

fn null_experiment() -> Outcome {
    let spec = SynthSpec {
        effects: Vec::new(),
        ..default_synth_spec()
    };
    let out = cv(&magnitude_config(0.0), &dataset(&spec));
    let uar = out.summary.mean_uar;
    outcome((0.40..=0.60).contains(&uar), format!("UAR {uar:.3}"))
}

fn sparsification(dense: &CvOutcome, ds: &Dataset) -> Outcome {
    let sparse = cv(&magnitude_config(2e-3), ds);
    let (a, b) = (nonzero_weights(dense), nonzero_weights(&sparse));
    let (na, nb) = (a.iter().sum::<usize>() as f64, b.iter().sum::<usize>() as f64);
    let reduction = 1.0 - nb / na;
    let drop = dense.summary.mean_uar - sparse.summary.mean_uar;
    outcome(
        reduction >= 0.25 && drop <= 0.05,
        format!("|w|>{NONZERO_W} per fold {a:?} -> {b:?} ({:.0}% fewer), UAR drop {drop:.3}", reduction * 100.0),
    )
}

fn determinism(first: &CvOutcome, ds: &Dataset) -> Outcome {
    let again = cv(&magnitude_config(0.0), ds);
    let (a, b) = (summary_bytes(first), summary_bytes(&again));
    outcome(a == b, format!("{} vs {} bytes, identical: {}", a.len(), b.len(), a == b))
}

fn ttest_check() -> Outcome {
    let t = two_sample_ttest(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).expect("ttest");
    outcome(
        (t.t + 1.2247).abs() <= TTEST_TOL && (t.p - 0.2878).abs() <= TTEST_TOL && t.df == 4.0,
        format!("t {:.4}, p {:.4}, df {}", t.t, t.p, t.df),
    )
}

fn channel_names(c: usize) -> Vec<String> {
    (0..c).map(|i| format!("ch{i}")).collect()
}

fn main() -> ExitCode {
    let mut r = Report { failures: 0 };
    r.run(1, "parameter counts", secs(1), parameter_counts);
    r.run(2, "filter anchors", secs(1), filter_anchors);
    r.run(3, "sinc limit", secs(1), sinc_limit);
    r.run(4, "plv decomposition", secs(5), plv_identity);
    r.run(5, "end-to-end gradient check", secs(30), gradient_check);

    let boost = dataset(&boost_spec());
    let mut dense = None;
    let t6 = r.run(6, "synthetic magnitude recovery", secs(600), || {
        let out = cv(&magnitude_config(0.0), &boost);
        let o = magnitude_recovery(&out);
        dense = Some(out);
        o
    });
    let dense = dense.expect("criterion 6 ran");
    r.run(7, "synthetic correlation recovery", secs(900), correlation_recovery);
    r.run(8, "null experiment", secs(600), null_experiment);
    r.run(9, "l1 sparsification", None, || sparsification(&dense, &boost));
    r.run(10, "determinism", Some(t6 * 2), || determinism(&dense, &boost));
    r.run(11, "two-sample t-test", None, ttest_check);

    if r.failures == 0 {
        println!("all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("{} criteria failed", r.failures);
        ExitCode::FAILURE
    }
}
