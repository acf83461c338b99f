mod common;

use bandminer::eval::{evaluate, partition_subjects, uar};
use bandminer::features::{plv_direct_oracle, plv_features};
use bandminer::filterbank::{
    apply_filterbank, beta_eff, filter_magnitude, filter_response, init_bank_for, ClampBounds, FilterParams,
};
use bandminer::gradient::{backward, Model, PreparedTrial};
use bandminer::head::{batchnorm_backward_train, BatchNormState, BatchStats, BN_EPS};
use bandminer::signal::{self, analytic_channel, bin_freqs, hermitian_weight, rfft_channel, TrialTensor};
use bandminer::trainer::nesterov_step;
use bandminer::FeatureKind;
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn signal_of(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Distance between the outer 0.9 and 0.1 crossings on the upper skirt.
fn transition_width(p: &FilterParams) -> f64 {
    let grid: Vec<f64> = (0..20_000).map(|i| p.mu + i as f64 * 0.005).collect();
    let mags = filter_magnitude(p, &grid);
    let at = |level: f64| grid[mags.iter().position(|&m| m < level).unwrap()];
    at(0.1) - at(0.9)
}

fn params() -> impl Strategy<Value = FilterParams> {
    (1.0f64..60.0, 1.0f64..60.0, 2.0f64..=3.0).prop_map(|(mu, h, beta_raw)| FilterParams { mu, h, beta_raw })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn parseval_holds(seed in 0u64..10_000, n in 8usize..200) {
        let x = signal_of(seed, n);
        let time: f64 = x.iter().map(|v| v * v).sum();
        let freq: f64 = rfft_channel(&x)
            .iter()
            .enumerate()
            .map(|(k, z)| hermitian_weight(k, n) * z.norm_sqr())
            .sum::<f64>() / n as f64;
        prop_assert!((time - freq).abs() <= 1e-6 * time);
    }

    #[test]
    fn analytic_signal_has_no_negative_frequencies(seed in 0u64..10_000, n in 16usize..160) {
        let x = signal_of(seed, n);
        let z = analytic_channel(&rfft_channel(&x), n).unwrap();
        // plain DFT oracle so this does not lean on the crate's transform
        let dft: Vec<Complex64> = (0..n)
            .map(|k| {
                z.iter().enumerate().fold(Complex64::new(0.0, 0.0), |acc, (t, v)| {
                    acc + v * Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64)
                })
            })
            .collect();
        let total: f64 = dft.iter().map(|c| c.norm_sqr()).sum();
        let negative: f64 = ((n / 2 + 1)..n).map(|k| dft[k].norm_sqr()).sum();
        prop_assert!(negative < 1e-9 * total);
    }

    #[test]
    fn half_maximum_anchors(p in params()) {
        prop_assert!((p.gain(p.mu - p.h / 2.0) - 0.5).abs() < 1e-12);
        prop_assert!((p.gain(p.mu + p.h / 2.0) - 0.5).abs() < 1e-12);
        prop_assert!((p.gain(p.mu) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn steepening_is_monotone(mu in 10.0f64..40.0, h in 4.0f64..40.0, lo in 2.0f64..2.9, step in 0.05f64..0.5) {
        let hi = (lo + step).min(3.0);
        let w_lo = transition_width(&FilterParams { mu, h, beta_raw: lo });
        let w_hi = transition_width(&FilterParams { mu, h, beta_raw: hi });
        prop_assert!(w_hi < w_lo, "beta {} -> {}: {} vs {}", beta_eff(lo), beta_eff(hi), w_lo, w_hi);
    }

    #[test]
    fn phase_is_linear_and_delay_free_in_magnitude(p in params(), n in 16usize..256, fs in 32.0f64..512.0) {
        let freqs = bin_freqs(n, fs);
        let with = filter_response(&p, &freqs, 0.02);
        let without = filter_response(&p, &freqs, 0.0);
        for (k, x) in freqs.iter().enumerate() {
            prop_assert!((with[k].norm() - without[k].norm()).abs() <= 1e-15);
            if with[k].norm() > 1e-300 {
                let r = with[k].arg() + 2.0 * std::f64::consts::PI * x * 0.02;
                let wrapped = r - (r / (2.0 * std::f64::consts::PI)).round() * 2.0 * std::f64::consts::PI;
                prop_assert!(wrapped.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn clamped_steps_stay_in_bounds(seed in 0u64..10_000, lr in 0.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bounds = ClampBounds::for_sampling_rate(128.0);
        let mut bank = init_bank_for(FeatureKind::Magnitude, 4, 1).unwrap();
        let mut vel = vec![0.0; bank.n_trainable()];
        for _ in 0..5 {
            let grads: Vec<f64> = (0..bank.n_trainable()).map(|_| rng.random_range(-5.0..5.0)).collect();
            let mut flat = bank.flat_params();
            nesterov_step(&mut flat, &grads, &mut vel, lr, 0.99);
            bank.set_flat_params(&flat);
            bank.clamp(&bounds);
            for p in &bank.params {
                prop_assert!((2.0..=3.0).contains(&p.beta_raw));
                prop_assert!(p.mu >= bounds.mu_min && p.mu <= bounds.mu_max);
                prop_assert!(p.h >= bounds.h_min && p.h <= bounds.h_max);
            }
        }
    }

    #[test]
    fn plv_matches_direct_oracle(seed in 0u64..10_000) {
        let n = 96;
        let a = signal_of(seed, n);
        let b = signal_of(seed ^ 0xabcdef, n);
        let za = analytic_channel(&rfft_channel(&a), n).unwrap();
        let zb = analytic_channel(&rfft_channel(&b), n).unwrap();
        let fast = plv_features(&[vec![za.clone(), zb.clone()]]).unwrap().values[0];
        prop_assert!((fast - plv_direct_oracle(&za, &zb).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn plv_ignores_shared_group_delay(seed in 0u64..10_000) {
        // tau * fs = 2 samples, so the delay is an exact circular shift
        let (n, fs) = (100, 100.0);
        let rows: Vec<Vec<f64>> = (0..3).map(|c| signal_of(seed * 3 + c, n)).collect();
        let spec = signal::rfft_rows(&rows, fs);
        let mut bank = init_bank_for(FeatureKind::Plv, 3, 1).unwrap();
        bank.params[0] = FilterParams { mu: 15.0, h: 12.0, beta_raw: 2.5 };
        let plv_for = |tau: f64| {
            let mut b = bank.clone();
            b.group_delay_s = tau;
            let filtered = apply_filterbank(&spec, &b).unwrap();
            let z = signal::analytic_signal(&filtered[0], n).unwrap();
            plv_features(&[z]).unwrap().values
        };
        for (x, y) in plv_for(0.02).iter().zip(plv_for(0.0)) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn batchnorm_train_output_is_standardized(seed in 0u64..10_000, b in 2usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch: Vec<Vec<f64>> = (0..b).map(|_| (0..3).map(|_| rng.random_range(-10.0..10.0)).collect()).collect();
        let bn = BatchNormState::new(3);
        let (out, stats) = bn.forward_train(&batch).unwrap();
        for d in 0..3 {
            let mean = out.iter().map(|r| r[d]).sum::<f64>() / b as f64;
            let var = out.iter().map(|r| (r[d] - mean).powi(2)).sum::<f64>() / b as f64;
            prop_assert!(mean.abs() < 1e-9);
            let expected = stats.var[d] / (stats.var[d] + BN_EPS);
            prop_assert!((var - expected).abs() < 1e-9);
            let d_out: Vec<Vec<f64>> = (0..b).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let grads = batchnorm_backward_train(&out, &stats, BN_EPS, &d_out);
            prop_assert!(grads.iter().map(|g| g[d]).sum::<f64>().abs() < 1e-9);
        }
        prop_assert_eq!(BatchStats::of(&batch).mean.len(), 3);
    }

    #[test]
    fn eval_normalization_ignores_batch_composition(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bn = BatchNormState::new(2);
        bn.running_mean = vec![rng.random_range(-1.0..1.0), 0.3];
        bn.running_var = vec![rng.random_range(0.5..2.0), 1.7];
        let rows: Vec<Vec<f64>> = (0..5).map(|_| vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).collect();
        let all = bn.forward_eval(&rows).unwrap();
        for (i, r) in rows.iter().enumerate() {
            prop_assert_eq!(&bn.forward_eval(std::slice::from_ref(r)).unwrap()[0], &all[i]);
        }
    }

    #[test]
    fn subject_partition_covers_disjointly(n_subjects in 2usize..60, folds in 2usize..12, seed in 0u64..1000) {
        prop_assume!(folds <= n_subjects);
        let subjects: Vec<String> = (0..n_subjects).map(|i| format!("s{i}")).collect();
        let parts = partition_subjects(&subjects, folds, seed).unwrap();
        let mut all: Vec<String> = parts.concat();
        prop_assert_eq!(all.len(), n_subjects);
        all.sort();
        all.dedup();
        prop_assert_eq!(all.len(), n_subjects);
        let sizes: Vec<usize> = parts.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn uar_is_swap_invariant(labels in proptest::collection::vec(0u8..2, 4..40), preds in proptest::collection::vec(0u8..2, 40)) {
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let preds = &preds[..labels.len()];
        let flip = |v: &[u8]| v.iter().map(|x| 1 - x).collect::<Vec<u8>>();
        prop_assert_eq!(uar(preds, &labels).unwrap(), uar(&flip(preds), &flip(&labels)).unwrap());
    }
}

#[test]
fn gradients_are_deterministic() {
    let trials = common::tiny_batch(4, 6, 3, 64, 64.0);
    let refs: Vec<&PreparedTrial> = trials.iter().collect();
    for kind in [FeatureKind::Magnitude, FeatureKind::Correlation, FeatureKind::Plv] {
        let model = common::tiny_model(9, kind, 3);
        let a = backward(&model, &refs, 1e-3).unwrap().tape;
        let b = backward(&model, &refs, 1e-3).unwrap().tape;
        assert_eq!(a, b);
    }
}

#[test]
fn evaluate_ignores_validation_order() {
    let mut model = common::tiny_model(2, FeatureKind::Correlation, 3);
    model.bn.running_mean = vec![0.2; model.feature_dim()];
    model.bn.mode = bandminer::head::Mode::Eval;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let trials: Vec<TrialTensor> = (0..8)
        .map(|i| TrialTensor {
            data: (0..3).map(|_| (0..64).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
            fs: 64.0,
            label: (i % 2) as u8,
            subject_id: "s".into(),
            trial_id: format!("t{i}"),
        })
        .collect();
    let forward = evaluate(&model, &trials, None).unwrap();
    let mut reversed = trials.clone();
    reversed.reverse();
    let backward_order = evaluate(&model, &reversed, None).unwrap();
    for t in &forward.trials {
        let other = backward_order.trials.iter().find(|o| o.trial_id == t.trial_id).unwrap();
        assert_eq!(t.probability, other.probability);
    }
    assert_eq!(forward.uar, backward_order.uar);
}

#[test]
fn head_has_one_parameter_per_feature_plus_bias() {
    for kind in [FeatureKind::Magnitude, FeatureKind::Correlation, FeatureKind::Plv] {
        let m = Model::new(kind, 5, 2).unwrap();
        assert_eq!(m.n_trainable() - m.bank.n_trainable(), m.feature_dim() + 1);
    }
}
