use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{split, synthetic, SplitSpec, SynthConfig};
use crate::model::ModelConfig;
use crate::tensor::relative_error;
use crate::tokenizer::TokenScheme;
use crate::topology::PeKind;

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        n_heads: 1,
        d_model: 4,
        d_ff: 4,
        scheme: TokenScheme::Variable,
        patch: None,
        lookback: 4,
        horizon: 2,
        n_vars: 2,
        pe_kind: PeKind::Convolutional,
        tem_enabled: true,
        ln_eps: 1e-5,
        init_raw: 0.0,
    }
}

fn random_batch(n: usize, seed: u64) -> Vec<WindowSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| WindowSample {
            x: Matrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0)),
            y: Matrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0)),
            start: i,
        })
        .collect()
}

fn small_splits(len: usize) -> Splits {
    let ds = synthetic(&SynthConfig {
        n_vars: 2,
        length: len,
        periods: vec![6.0, 10.0],
        noise_std: 0.05,
        seed: 3,
    })
    .unwrap();
    split(&ds, SplitSpec::Ratios(0.6, 0.2, 0.2), 4, true).unwrap()
}

fn quick_tc(seed: u64) -> TrainConfig {
    TrainConfig {
        eta1: 1e-2,
        eta2: 1e-2,
        batch_size: 4,
        max_epochs: 3,
        patience: 3,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn losses_trivial_cases() {
    let y = Matrix::from_fn(3, 2, |i, j| (i + j) as f64);
    assert_eq!(mse(&y, &y).unwrap(), 0.0);
    assert_eq!(mae(&y, &y).unwrap(), 0.0);
    let p = y.map(|v| v + 2.0);
    assert_eq!(mse(&p, &y).unwrap(), 4.0);
    assert_eq!(mae(&p, &y).unwrap(), 2.0);
    assert!(mse(&y, &Matrix::zeros(2, 3)).is_err());
}

#[test]
fn losses_match_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = Matrix::from_fn(5, 3, |_, _| rng.random_range(-2.0..2.0));
    let b = Matrix::from_fn(5, 3, |_, _| rng.random_range(-2.0..2.0));
    let (mut se, mut ae) = (0.0, 0.0);
    for i in 0..5 {
        for j in 0..3 {
            let d = a.get(i, j) - b.get(i, j);
            se += d * d;
            ae += d.abs();
        }
    }
    assert!((mse(&a, &b).unwrap() - se / 15.0).abs() < 1e-14);
    assert!((mae(&a, &b).unwrap() - ae / 15.0).abs() < 1e-14);

    let mut g = Graph::new();
    let pa = g.constant(&a);
    let l = mse_graph(&mut g, pa, &b).unwrap();
    assert!((g.scalar_value(l).unwrap() - se / 15.0).abs() < 1e-14);
}

#[test]
fn adam_zero_gradient_is_fixed_point() {
    let mut p = vec![1.0, -2.0];
    let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
    adam_step(&mut p, &[0.0, 0.0], &mut m, &mut v, 0.1, 1);
    assert_eq!(p, vec![1.0, -2.0]);
}

#[test]
fn adam_first_step_hand_oracle() {
    let (lr, g) = (0.01, 0.3);
    let mut p = vec![0.5];
    let (mut m, mut v) = (vec![0.0], vec![0.0]);
    adam_step(&mut p, &[g], &mut m, &mut v, lr, 1);
    // m̂ = g, v̂ = g²
    let expected = 0.5 - lr * g / (g.abs() + 1e-8);
    assert!((p[0] - expected).abs() < 1e-15);
}

#[test]
fn adam_moment_recurrence() {
    let g = -0.7;
    let mut p = vec![0.0];
    let (mut m, mut v) = (vec![0.0], vec![0.0]);
    adam_step(&mut p, &[g], &mut m, &mut v, 0.01, 1);
    adam_step(&mut p, &[g], &mut m, &mut v, 0.01, 2);
    let m2 = 0.9 * (0.1 * g) + 0.1 * g;
    let v2 = 0.999 * (0.001 * g * g) + 0.001 * g * g;
    assert!((m[0] - m2).abs() < 1e-15);
    assert!((v[0] - v2).abs() < 1e-15);
    // bias correction makes both steps ≈ lr·sign(g)
    let step2 = (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
    let expected = -0.01 * g / (g.abs() + 1e-8) - 0.01 * step2;
    assert!((p[0] - expected).abs() < 1e-12);
}

#[test]
fn sgd_scalar_hand_gradient() {
    let mut g = Graph::new();
    let theta = g.param(1, 1, vec![0.0]).unwrap();
    let d = g.add_const(theta, -1.0);
    let l = g.mul(d, d).unwrap();
    let gr = g.grad(l, &[theta], false).unwrap();
    let mut p = vec![0.0];
    sgd_step(&mut p, g.value(gr[0]), 0.1);
    assert!((p[0] - 0.2).abs() < 1e-15);
}

#[test]
fn inner_step_zero_rate_and_fixed_injection() {
    let mut model = Model::new(&ModelSpec::Single(tiny_cfg()), 1).unwrap();
    let batch = random_batch(3, 2);
    let (p0, i0) = (model.params.checksum(), model.injection.checksum());
    let mut st = InnerState::Sgd;
    inner_step(&mut model, &mut st, &batch, 0.0).unwrap();
    assert_eq!(model.params.checksum(), p0);
    inner_step(&mut model, &mut st, &batch, 0.05).unwrap();
    assert_ne!(model.params.checksum(), p0);
    assert_eq!(model.injection.checksum(), i0);
}

#[test]
fn inner_step_descends_for_small_rates() {
    let base = Model::new(&ModelSpec::Single(tiny_cfg()), 4).unwrap();
    let batch = random_batch(4, 5);
    let before = batch_loss(&base, &batch).unwrap();
    for eta in [1e-4, 1e-3, 1e-2] {
        let mut m = base.clone();
        inner_step(&mut m, &mut InnerState::Sgd, &batch, eta).unwrap();
        let after = batch_loss(&m, &batch).unwrap();
        assert!(after < before, "eta {eta}: {after} !< {before}");
    }
}

#[test]
fn outer_step_zero_rate_keeps_raws() {
    let mut model = Model::new(&ModelSpec::Single(tiny_cfg()), 1).unwrap();
    let batch = random_batch(2, 3);
    let i0 = model.injection.checksum();
    let mut adam = AdamState::new(&model.injection);
    outer_step(&mut model, &mut adam, None, &batch, 0.1, 0.0, OuterMode::FirstOrder).unwrap();
    assert_eq!(model.injection.checksum(), i0);
    outer_step(&mut model, &mut adam, None, &batch, 0.1, 0.01, OuterMode::FirstOrder).unwrap();
    assert_ne!(model.injection.checksum(), i0);
}

fn exact_and_first_order(model: &Model, batch: &[WindowSample], eta1: f64) -> (Vec<f64>, Vec<f64>) {
    let theta = model.params.values();
    let mut m1 = model.clone();
    inner_step(&mut m1, &mut InnerState::Sgd, batch, eta1).unwrap();
    let (_, ex) = outer_gradient(&m1, Some(&theta), batch, eta1, OuterMode::Exact).unwrap();
    let (_, fo) = outer_gradient(&m1, None, batch, eta1, OuterMode::FirstOrder).unwrap();
    (ex.concat(), fo.concat())
}

#[test]
fn exact_outer_gradient_matches_finite_differences() {
    let model = Model::new(&ModelSpec::Single(tiny_cfg()), 11).unwrap();
    assert!(model.params.numel() + model.injection.numel() <= 200);
    let worst = bilevel_gradient_check(&model, &random_batch(2, 12), 0.2, 1e-4).unwrap();
    assert!(worst < 1e-4, "max rel err {worst}");
}

#[test]
fn model_gradients_match_finite_differences() {
    let model = Model::new(&ModelSpec::Single(tiny_cfg()), 13).unwrap();
    let worst = model_gradient_check(&model, &random_batch(2, 14), 1e-5).unwrap();
    assert!(worst < 1e-5, "max rel err {worst}");
}

#[test]
fn exact_equals_first_order_only_without_inner_step() {
    let model = Model::new(&ModelSpec::Single(tiny_cfg()), 21).unwrap();
    let batch = random_batch(2, 22);
    let (ex, fo) = exact_and_first_order(&model, &batch, 0.0);
    for (a, b) in ex.iter().zip(&fo) {
        assert!(relative_error(*a, *b) < 1e-12, "{a} vs {b}");
    }
    let (ex, fo) = exact_and_first_order(&model, &batch, 0.2);
    let diff = ex.iter().zip(&fo).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff > 1e-8, "indirect path vanished: {diff}");
}

#[test]
fn exact_mode_rejects_adam_inner() {
    let tc = TrainConfig {
        outer_mode: OuterMode::Exact,
        inner_optimizer: InnerOptimizer::Adam,
        ..TrainConfig::default()
    };
    assert!(matches!(tc.validate(), Err(Error::Unsupported(_))));
    assert!(TrainConfig { patience: 0, ..TrainConfig::default() }.validate().is_err());
}

#[test]
fn early_stopping_after_three_flat_epochs() {
    let mut es = EarlyStopping::new(3);
    let seq = [1.0, 0.9, 0.95, 0.93, 0.91];
    let got: Vec<StopDecision> = seq.iter().map(|&v| es.update(v)).collect();
    use StopDecision::*;
    assert_eq!(got, vec![Improved, Improved, Continue, Continue, Stop]);
    assert_eq!(es.best_epoch(), 2);

    // an improvement resets the counter
    let mut es = EarlyStopping::new(3);
    let got: Vec<StopDecision> = [1.0, 1.1, 1.2, 0.5, 0.6, 0.6, 0.7].iter().map(|&v| es.update(v)).collect();
    assert_eq!(got, vec![Improved, Continue, Continue, Improved, Continue, Continue, Stop]);
}

#[test]
fn learning_rates_halve_after_first_epoch() {
    let tc = TrainConfig { eta1: 0.4, eta2: 0.2, ..TrainConfig::default() };
    assert_eq!(tc.rates(1), (0.4, 0.2));
    assert_eq!(tc.rates(2), (0.2, 0.1));
    assert_eq!(tc.rates(4), (0.05, 0.025));
}

#[test]
fn training_is_deterministic_and_restores_best() {
    let splits = small_splits(80);
    let spec = ModelSpec::Single(tiny_cfg());
    let (m1, r1) = train(&splits, &spec, &quick_tc(7)).unwrap();
    let (_, r2) = train(&splits, &spec, &quick_tc(7)).unwrap();
    assert_eq!(r1.to_csv(), r2.to_csv());
    assert!(r1.to_csv().starts_with("epoch,train_loss,val_mse,val_mae\n1,"));
    assert!(r1.to_csv().lines().last().unwrap().starts_with("test,"));

    let best = r1.epochs.iter().map(|e| e.val_mse).fold(f64::INFINITY, f64::min);
    let val = split_windows(&splits, &splits.val, 4, 2, 1).unwrap();
    let (v, _) = evaluate(&m1, &val, None).unwrap();
    assert_eq!(v, best);
    assert_eq!(r1.epochs[r1.best_epoch - 1].val_mse, best);
    assert!(r1.test_mse >= 0.0 && r1.test_mae >= 0.0);
}

#[test]
fn baseline_training_never_touches_injection() {
    let splits = small_splits(80);
    let spec = ModelSpec::Single(ModelConfig { tem_enabled: false, ..tiny_cfg() });
    let fresh = Model::new(&spec, 5).unwrap();
    let (m, _) = train(&splits, &spec, &quick_tc(5)).unwrap();
    assert_eq!(m.injection.checksum(), fresh.injection.checksum());
    assert_ne!(m.params.checksum(), fresh.params.checksum());
}

#[test]
fn exact_mode_trains() {
    let splits = small_splits(60);
    let tc = TrainConfig {
        outer_mode: OuterMode::Exact,
        inner_optimizer: InnerOptimizer::Sgd,
        max_epochs: 2,
        ..quick_tc(2)
    };
    let (_, r) = train(&splits, &ModelSpec::Single(tiny_cfg()), &tc).unwrap();
    assert_eq!(r.epochs.len(), 2);
}

#[test]
fn injection_weights_settle_as_rates_decay() {
    let splits = small_splits(40);
    let tc = TrainConfig {
        max_epochs: 40,
        patience: 40,
        eta2: 0.05,
        ..quick_tc(1)
    };
    let (_, r) = train(&splits, &ModelSpec::Single(tiny_cfg()), &tc).unwrap();
    assert_eq!(r.epochs.len(), 40);
    let tail = &r.epochs[r.epochs.len() - 2..];
    assert!((tail[1].gamma_mean - tail[0].gamma_mean).abs() < 1e-9);
    assert!((tail[1].xi_mean - tail[0].xi_mean).abs() < 1e-9);
}

#[test]
fn empty_splits_are_rejected() {
    // 20 rows: val/test views too short for any window without overhang
    let ds = synthetic(&SynthConfig { n_vars: 2, length: 20, ..Default::default() }).unwrap();
    let s = split(&ds, SplitSpec::Ratios(0.8, 0.1, 0.1), 4, false).unwrap();
    assert!(matches!(train(&s, &ModelSpec::Single(tiny_cfg()), &quick_tc(0)), Err(Error::Data(_))));
}
