mod common;

use common::{metrics_oracle, rand_t, rng};
use painvit::augment::AugmentConfig;
use painvit::model::{checkpoint, PainViT, PainViTConfig};
use painvit::numerics::gradcheck::relative_error;
use painvit::training::{
    argmax, ce_label_smoothing, evaluate, lr_at, multitask_loss, smoothed_targets, train, AdamW, InMemory, Metrics,
    MultiTaskLossState, TrainConfig,
};
use painvit::{Error, Graph, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn ce_value(logits: &Tensor, targets: &[usize], eps: f64) -> f64 {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = ce_label_smoothing(&mut g, l, targets, eps).unwrap();
    g.value(loss).item().unwrap()
}

/// Per-sample formula: -Σ_j q_j log p_j with q the smoothed target.
fn ce_oracle(logits: &Tensor, targets: &[usize], eps: f64) -> f64 {
    let c = logits.shape()[1];
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = &logits.data()[r * c..(r + 1) * c];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for (j, v) in row.iter().enumerate() {
            let q = if j == t { 1.0 - eps } else { eps / (c as f64 - 1.0) };
            total -= q * (v.exp() / z).ln();
        }
    }
    total / targets.len() as f64
}

// ------------------------------------------------------------ cross entropy

#[test]
fn ce_confident_prediction_is_near_zero() {
    let logits = Tensor::new(&[1, 3], vec![50.0, 0.0, 0.0]).unwrap();
    let l = ce_value(&logits, &[0], 0.0);
    assert!(l >= 0.0 && l < 1e-20);
}

#[test]
fn ce_uniform_logits_is_ln3() {
    let logits = Tensor::full(&[4, 3], 0.7);
    for eps in [0.0, 0.1, 0.4, 0.9] {
        assert!((ce_value(&logits, &[0, 1, 2, 1], eps) - 3f64.ln()).abs() < 1e-14);
    }
}

#[test]
fn ce_matches_direct_formula() {
    for seed in 0..20 {
        let logits = rand_t(&[6, 3], seed);
        let targets: Vec<usize> = (0..6).map(|i| (i + seed as usize) % 3).collect();
        let eps = seed as f64 / 25.0;
        assert!((ce_value(&logits, &targets, eps) - ce_oracle(&logits, &targets, eps)).abs() < 1e-12);
    }
}

#[test]
fn ce_target_out_of_range() {
    let mut g = Graph::new();
    let l = g.constant(Tensor::zeros(&[1, 3]));
    assert!(matches!(ce_label_smoothing(&mut g, l, &[3], 0.1), Err(Error::Data(_))));
    assert!(matches!(ce_label_smoothing(&mut g, l, &[0], 1.0), Err(Error::Config(_))));
}

#[test]
fn ce_gradient_matches_finite_differences() {
    let x = rand_t(&[3, 4], 5);
    let targets = [0, 3, 1];
    let mut g = Graph::new();
    let xl = x.clone().with_requires_grad(true);
    let v = g.leaf(&xl);
    let loss = ce_label_smoothing(&mut g, v, &targets, 0.2).unwrap();
    let grads = g.backward(loss).unwrap();
    let analytic = grads.get(v).unwrap();
    for i in 0..x.numel() {
        let mut p = x.clone();
        p.data_mut()[i] += 1e-6;
        let mut m = x.clone();
        m.data_mut()[i] -= 1e-6;
        let n = (ce_value(&p, &targets, 0.2) - ce_value(&m, &targets, 0.2)) / 2e-6;
        assert!(relative_error(analytic[i], n) < 1e-6);
    }
}

proptest! {
    #[test]
    fn ce_bounded_below_by_target_entropy(seed in 0u64..10_000, eps in 0.0f64..0.99) {
        let logits = rand_t(&[5, 3], seed);
        let mut r = rng(seed);
        let targets: Vec<usize> = (0..5).map(|_| r.gen_range(0..3)).collect();
        let q = smoothed_targets(&targets, 3, eps).unwrap();
        let entropy: f64 = -q.data().iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>() / 5.0;
        prop_assert!(ce_value(&logits, &targets, eps) >= entropy - 1e-12);
    }
}

// --------------------------------------------------------------- multitask

fn multitask(w: &[f64], losses: &[f64], sign: bool) -> (f64, Vec<f64>) {
    let mut g = Graph::new();
    let wt = Tensor::new(&[w.len()], w.to_vec()).unwrap().with_requires_grad(true);
    let wv = g.leaf(&wt);
    let ls: Vec<_> = losses.iter().map(|&l| Some(g.constant(Tensor::scalar(l)))).collect();
    let total = multitask_loss(&mut g, wv, &ls, sign).unwrap();
    let grads = g.backward(total).unwrap();
    (g.value(total).item().unwrap(), grads.get(wv).unwrap().to_vec())
}

#[test]
fn multitask_zero_weights_sum_losses() {
    let ls = [0.3, 1.7, 2.25];
    assert_eq!(multitask(&[0.0; 3], &ls, false).0, ls.iter().sum::<f64>());
    assert_eq!(multitask(&[0.0; 3], &ls, true).0, ls.iter().sum::<f64>());
}

#[test]
fn multitask_single_task_arithmetic() {
    let (v, _) = multitask(&[2f64.ln()], &[2.0], false);
    assert!((v - (4.0 + 2f64.ln())).abs() < 1e-15);
}

#[test]
fn multitask_weight_gradient() {
    let w = [0.3, -0.8, 1.1];
    let ls = [0.9, 2.0, 0.4];
    for sign in [false, true] {
        let (_, g) = multitask(&w, &ls, sign);
        for i in 0..3 {
            let mut p = w;
            p[i] += 1e-6;
            let mut m = w;
            m[i] -= 1e-6;
            let n = (multitask(&p, &ls, sign).0 - multitask(&m, &ls, sign).0) / 2e-6;
            let exact = if sign { -(-w[i]).exp() * ls[i] + 1.0 } else { w[i].exp() * ls[i] + 1.0 };
            assert!(relative_error(g[i], n) < 1e-6);
            assert!((g[i] - exact).abs() < 1e-14);
        }
    }
}

#[test]
fn multitask_missing_loss_is_state_error() {
    let mut g = Graph::new();
    let w = g.leaf(&Tensor::zeros(&[2]));
    let l = g.constant(Tensor::scalar(1.0));
    assert!(matches!(multitask_loss(&mut g, w, &[Some(l), None], false), Err(Error::State(_))));
    assert!(matches!(multitask_loss(&mut g, w, &[Some(l)], false), Err(Error::State(_))));
    assert!(MultiTaskLossState::new(0).is_err());
}

#[test]
fn multitask_weights_learn_on_synthetic_tasks() {
    // two fixed task losses; the canonical sign drives w_i toward ln L_i
    let mut state = MultiTaskLossState::new(2).unwrap();
    state.uncertainty_sign = true;
    let ls = [4.0, 0.5];
    let mut opt = AdamW::new(0.0);
    for _ in 0..3000 {
        let mut g = Graph::new();
        let wv = g.leaf(&state.w);
        let l: Vec<_> = ls.iter().map(|&v| Some(g.constant(Tensor::scalar(v)))).collect();
        let total = multitask_loss(&mut g, wv, &l, true).unwrap();
        let grad = g.backward(total).unwrap().get(wv).unwrap().to_vec();
        opt.step(&mut [state.w.data_mut()], &[Some(&grad)], 0.01).unwrap();
    }
    for (w, l) in state.w.data().iter().zip(ls) {
        assert!((w - f64::ln(l)).abs() < 1e-2, "{w} vs {}", f64::ln(l));
    }
}

// ---------------------------------------------------------------- schedule

#[test]
fn lr_schedule_shape() {
    let cfg = TrainConfig::default();
    let spe = 7;
    assert_eq!(lr_at(0, spe, &cfg), 0.0);
    assert_eq!(lr_at(10 * spe, spe, &cfg), 2e-5);
    let total = cfg.epochs * spe;
    let mut prev = f64::INFINITY;
    for s in 10 * spe..total {
        let lr = lr_at(s, spe, &cfg);
        assert!(lr <= prev);
        prev = lr;
    }
    for s in 1..10 * spe {
        assert!(lr_at(s, spe, &cfg) > lr_at(s - 1, spe, &cfg));
    }
    assert!((lr_at(total - 1, spe, &cfg) - 2e-7).abs() < 1e-20);
    assert!((lr_at(90 * spe, spe, &cfg) - 2e-7).abs() < 1e-20);
}

#[test]
fn config_validation() {
    let bad = TrainConfig {
        warmup_epochs: 60,
        cooldown_epochs: 50,
        ..TrainConfig::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    TrainConfig::default().validate().unwrap();
}

// ------------------------------------------------------------------- adamw

#[test]
fn adamw_zero_gradient_no_decay_is_noop() {
    let mut p = vec![0.5, -1.5];
    let mut opt = AdamW::new(0.0);
    opt.step(&mut [&mut p], &[Some(&[0.0, 0.0])], 1e-3).unwrap();
    assert_eq!(p, vec![0.5, -1.5]);
}

#[test]
fn adamw_first_step_moves_by_lr() {
    let mut p = vec![1.0];
    let mut opt = AdamW::new(0.0);
    opt.step(&mut [&mut p], &[Some(&[1.0])], 1e-3).unwrap();
    assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-10);
}

#[test]
fn adamw_decay_shrinks() {
    let mut p = vec![2.0, -3.0];
    let mut opt = AdamW::new(0.1);
    opt.step(&mut [&mut p], &[Some(&[0.0, 0.0])], 0.01).unwrap();
    assert!((p[0] - 2.0 * (1.0 - 0.001)).abs() < 1e-15);
    assert!((p[1] + 3.0 * (1.0 - 0.001)).abs() < 1e-15);
}

#[test]
fn adamw_shape_mismatch() {
    let mut p = vec![1.0, 2.0];
    let mut opt = AdamW::new(0.0);
    assert!(matches!(opt.step(&mut [&mut p], &[Some(&[1.0])], 0.1), Err(Error::Dimension(_))));
    assert!(matches!(opt.step(&mut [&mut p], &[], 0.1), Err(Error::Dimension(_))));
}

// ----------------------------------------------------------------- metrics

#[test]
fn perfect_predictions() {
    let t = [0, 1, 2, 2, 1, 0];
    let m = Metrics::from_predictions(&t, &t, 3).unwrap();
    assert_eq!((m.accuracy, m.macro_f1, m.macro_precision, m.macro_recall), (1.0, 1.0, 1.0, 1.0));
}

#[test]
fn constant_predictor_on_balanced_set() {
    let t = [0, 1, 2, 0, 1, 2, 0, 1, 2];
    let m = Metrics::from_predictions(&[1; 9], &t, 3).unwrap();
    assert!((m.accuracy - 1.0 / 3.0).abs() < 1e-15);
    assert!((m.macro_recall - 1.0 / 3.0).abs() < 1e-15);
    let trace: usize = (0..3).map(|i| m.confusion[i][i]).sum();
    assert_eq!(m.accuracy, trace as f64 / 9.0);
}

#[test]
fn random_predictions_match_oracle() {
    let mut r = rng(77);
    for _ in 0..200 {
        let n = r.gen_range(1..60);
        let c = r.gen_range(2..6);
        let p: Vec<usize> = (0..n).map(|_| r.gen_range(0..c)).collect();
        let t: Vec<usize> = (0..n).map(|_| r.gen_range(0..c)).collect();
        let m = Metrics::from_predictions(&p, &t, c).unwrap();
        let o = metrics_oracle(&p, &t, c);
        for (a, b) in [m.accuracy, m.macro_precision, m.macro_recall, m.macro_f1].iter().zip(o) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn argmax_ties_go_low() {
    assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
    assert_eq!(argmax(&[1.0, 1.0, 1.0]), 0);
}

// ------------------------------------------------------------- train loop

/// Class 0: bright left half; class 1: bright right half.
fn separable(n_per_class: usize, size: usize, seed: u64) -> InMemory {
    let mut r = rng(seed);
    let mut data = InMemory::default();
    for i in 0..2 * n_per_class {
        let class = i % 2;
        let mut img = vec![0.0; 3 * size * size];
        for c in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    let bright = (x < size / 2) == (class == 0);
                    img[(c * size + y) * size + x] = if bright { 0.8 } else { 0.2 } + r.gen_range(-0.1..0.1);
                }
            }
        }
        data.images.push(Tensor::new(&[3, size, size], img).unwrap());
        data.labels.push(class);
    }
    data
}

fn small_model(seed: u64) -> PainViT {
    let cfg = PainViTConfig {
        image_size: 32,
        num_classes: 2,
        ..PainViTConfig::tiny()
    };
    PainViT::new(cfg, seed).unwrap()
}

fn quick_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        lr: 2e-3,
        epochs,
        warmup_epochs: 1,
        cooldown_epochs: 0,
        batch_size: 32,
        dropout: 0.1,
        weight_decay: 0.01,
        ..TrainConfig::default()
    }
}

#[test]
fn one_epoch_of_64_samples_is_two_steps() {
    let data = separable(32, 32, 0);
    let mut m = small_model(0);
    let out = train(&mut m, &data, None, &quick_cfg(1).clone_with_no_warmup(), &AugmentConfig::default(), 1).unwrap();
    assert_eq!(out.optimizer_steps, 2);
    assert_eq!(out.history[0].steps, 2);
}

trait NoWarmup {
    fn clone_with_no_warmup(&self) -> Self;
}

impl NoWarmup for TrainConfig {
    fn clone_with_no_warmup(&self) -> Self {
        TrainConfig {
            warmup_epochs: 0,
            ..self.clone()
        }
    }
}

#[test]
fn training_is_deterministic() {
    let data = separable(10, 32, 1);
    let aug = AugmentConfig::uniform(0.5, 2);
    let run = || {
        let mut m = small_model(3);
        let cfg = TrainConfig {
            batch_size: 8,
            ..quick_cfg(3)
        };
        let out = train(&mut m, &data, Some(&data), &cfg, &aug, 9).unwrap();
        let mut buf = Vec::new();
        checkpoint::write_checkpoint(&m, &mut buf).unwrap();
        (out.history.iter().map(|h| h.train_loss.to_bits()).collect::<Vec<_>>(), buf)
    };
    let (a, ca) = run();
    let (b, cb) = run();
    assert_eq!(a, b);
    assert_eq!(ca, cb);
}

#[test]
fn loss_decreases_on_separable_data() {
    let data = separable(32, 32, 2);
    let mut m = small_model(4);
    let cfg = TrainConfig {
        batch_size: 16,
        ..quick_cfg(10)
    };
    let out = train(&mut m, &data, None, &cfg, &AugmentConfig::default(), 5).unwrap();
    let first = out.history[0].train_loss;
    let last = out.history.last().unwrap().train_loss;
    assert!(last < first, "loss {first} -> {last}");
    let acc = evaluate(&m, &data, 32).unwrap().accuracy;
    assert!(acc > 0.9, "train accuracy {acc}");
}

#[test]
fn best_validation_weights_are_kept() {
    let data = separable(8, 32, 3);
    let mut m = small_model(5);
    let cfg = TrainConfig {
        batch_size: 8,
        ..quick_cfg(4)
    };
    let out = train(&mut m, &data, Some(&data), &cfg, &AugmentConfig::default(), 2).unwrap();
    let best = out.best_val_accuracy.unwrap();
    let max = out.history.iter().map(|h| h.val.as_ref().unwrap().accuracy).fold(0.0, f64::max);
    assert_eq!(best, max);
    assert_eq!(evaluate(&m, &data, 8).unwrap().accuracy, best);
}

#[test]
fn empty_dataset_errors() {
    let mut m = small_model(0);
    let empty = InMemory::default();
    assert!(matches!(
        train(&mut m, &empty, None, &quick_cfg(1), &AugmentConfig::default(), 0),
        Err(Error::Data(_))
    ));
    assert!(matches!(evaluate(&m, &empty, 4), Err(Error::Data(_))));
}

#[test]
fn evaluate_is_side_effect_free() {
    let data = separable(4, 32, 4);
    let mut m = small_model(6);
    m.calibrate(&[rand_t(&[4, 3, 32, 32], 1)]).unwrap();
    let before = m.store().norms().to_vec();
    let a = evaluate(&m, &data, 3).unwrap();
    let b = evaluate(&m, &data, 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(m.store().norms(), before.as_slice());
}
