#![allow(dead_code)]

use bandminer::filterbank::FilterParams;
use bandminer::gradient::{backward, batch_loss, Model, PreparedTrial};
use bandminer::signal::standardize_trial;
use bandminer::FeatureKind;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct GradCheck {
    pub checked: usize,
    pub worst_rel: f64,
    pub worst_name: String,
}

pub fn tiny_batch(seed: u64, b: usize, c: usize, n: usize, fs: f64) -> Vec<PreparedTrial> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..b)
        .map(|i| {
            let rows: Vec<Vec<f64>> = (0..c)
                .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let s = standardize_trial(&rows, fs, (i % 2) as u8, format!("s{i}"), format!("t{i}")).unwrap();
            PreparedTrial::new(&s.trial)
        })
        .collect()
}

/// Random filters away from the clamp bounds and non-zero head weights.
pub fn tiny_model(seed: u64, kind: FeatureKind, c: usize) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::new(kind, c, 1).unwrap();
    for p in model.bank.params.iter_mut() {
        *p = FilterParams {
            mu: rng.random_range(5.0..20.0) + 0.31,
            h: rng.random_range(5.0..18.0),
            beta_raw: rng.random_range(2.1..2.9),
        };
    }
    for w in model.head.weights.iter_mut() {
        *w = rng.random_range(0.3..1.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    }
    model.head.bias = rng.random_range(-0.5..0.5);
    model
}

/// Central differences (step 1e-4) on every trainable scalar against the analytic tape.
pub fn check_gradients(model: &Model, trials: &[PreparedTrial], gamma: f64) -> GradCheck {
    let refs: Vec<&PreparedTrial> = trials.iter().collect();
    let tape = backward(model, &refs, gamma).unwrap().tape;
    let loss_at = |m: &Model| batch_loss(m, &refs, gamma).unwrap();
    let mut out = GradCheck {
        checked: 0,
        worst_rel: 0.0,
        worst_name: String::new(),
    };
    let mut record = |name: String, analytic: f64, numeric: f64| {
        if analytic.abs().max(numeric.abs()) <= 1e-8 {
            return;
        }
        out.checked += 1;
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        if rel > out.worst_rel {
            out.worst_rel = rel;
            out.worst_name = name;
        }
    };
    let flat = model.bank.flat_params();
    for i in 0..flat.len() {
        // beta_raw enters through beta_eff = 8 * beta_raw - 14, so its step is
        // taken in effective-shape units
        let step = if i % 3 == 2 { 1e-4 / 8.0 } else { 1e-4 };
        let mut plus = model.clone();
        let mut minus = model.clone();
        let mut fp = flat.clone();
        fp[i] += step;
        plus.bank.set_flat_params(&fp);
        fp[i] -= 2.0 * step;
        minus.bank.set_flat_params(&fp);
        let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * step);
        record(format!("filter param {i}"), tape.filters[i], numeric);
    }
    for i in 0..model.head.weights.len() {
        let step = 1e-4;
        let mut plus = model.clone();
        let mut minus = model.clone();
        plus.head.weights[i] += step;
        minus.head.weights[i] -= step;
        let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * step);
        record(format!("weight {i}"), tape.weights[i], numeric);
    }
    let mut plus = model.clone();
    let mut minus = model.clone();
    plus.head.bias += 1e-4;
    minus.head.bias -= 1e-4;
    record("bias".into(), tape.bias, (loss_at(&plus) - loss_at(&minus)) / 2e-4);
    out
}
