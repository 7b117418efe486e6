#![allow(dead_code)]

pub mod attention;

use painvit::model::{PainViT, PainViTConfig};
use painvit::numerics::gradcheck::relative_error;
use painvit::{Mode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed))
}

/// Tiny model whose batch-norm running stats are set to fixed random values.
pub fn frozen_tiny(image_size: usize, seed: u64) -> PainViT {
    let cfg = PainViTConfig {
        image_size,
        ..PainViTConfig::tiny()
    };
    frozen(cfg, seed)
}

/// Model built from `cfg` with fixed random running stats.
pub fn frozen(cfg: PainViTConfig, seed: u64) -> PainViT {
    let mut m = PainViT::new(cfg, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    let store = m.store_mut();
    for n in store.norms_mut() {
        for v in n.mean.iter_mut() {
            *v = r.gen_range(-0.1..0.1);
        }
        for v in n.var.iter_mut() {
            *v = r.gen_range(0.5..1.5);
        }
        n.initialized = true;
    }
    m
}

/// `sum(logits ⊙ w)` in eval mode.
pub fn weighted_logits(model: &PainViT, images: &Tensor, w: &Tensor) -> f64 {
    let (_, logits) = model.infer(images).unwrap();
    logits.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

/// Adds small random offsets to every bias so no activation sits exactly on
/// a ReLU kink (zero-initialised biases over dead channels produce exact
/// zeros, where only a subgradient exists).
pub fn jitter_biases(model: &mut PainViT, seed: u64) {
    let mut r = rng(seed);
    for p in model.store_mut().params_mut() {
        if p.name.ends_with(".bias") {
            for v in p.tensor.data_mut() {
                *v += r.gen_range(-0.05..0.05);
            }
        }
    }
}

pub struct GradReport {
    /// Worst relative error over all checked scalars.
    pub worst: f64,
    pub checked: usize,
    /// Scalars whose step-`h` difference straddled a kink and were settled
    /// at a smaller step.
    pub refined: usize,
}

/// Central-difference check of reverse-mode parameter gradients on a sampled
/// `fraction` of every parameter tensor (at least one entry each).
///
/// A scalar failing at step `h` is retried at `h/10` and `h/100`: a
/// piecewise-linear activation crossing its kink inside `[-h, h]` spoils the
/// difference quotient, a wrong gradient does not get better.
pub fn model_gradient_check(model: &mut PainViT, images: &Tensor, fraction: f64, h: f64, seed: u64) -> GradReport {
    let classes = model.config().num_classes;
    let w = rand_t(&[images.shape()[0], classes], seed);
    let grads = {
        let mut pass = model.pass(model.options(Mode::Eval, true));
        let x = pass.graph.constant(images.clone());
        let out = model.forward(&mut pass, x, None).unwrap();
        let wv = pass.graph.constant(w.clone());
        let prod = pass.graph.mul(out.logits, wv).unwrap();
        let loss = pass.graph.sum(prod);
        pass.param_grads(loss).unwrap()
    };
    let mut r = rng(seed + 1);
    let mut report = GradReport {
        worst: 0.0,
        checked: 0,
        refined: 0,
    };
    for p in 0..model.store().params().len() {
        let n = model.store().params()[p].tensor.numel();
        let k = ((n as f64 * fraction).ceil() as usize).max(1);
        let analytic = grads.0[p].clone().unwrap_or_else(|| vec![0.0; n]);
        for _ in 0..k {
            let i = r.gen_range(0..n);
            let orig = model.store().params()[p].tensor.data()[i];
            let mut e = f64::INFINITY;
            for (attempt, step) in [h, h / 10.0, h / 100.0].into_iter().enumerate() {
                model.store_mut().params_mut()[p].tensor.data_mut()[i] = orig + step;
                let plus = weighted_logits(model, images, &w);
                model.store_mut().params_mut()[p].tensor.data_mut()[i] = orig - step;
                let minus = weighted_logits(model, images, &w);
                model.store_mut().params_mut()[p].tensor.data_mut()[i] = orig;
                e = relative_error(analytic[i], (plus - minus) / (2.0 * step));
                if e < 1e-4 {
                    report.refined += usize::from(attempt > 0);
                    break;
                }
            }
            report.worst = report.worst.max(e);
            report.checked += 1;
        }
    }
    report
}

/// Exact sum via a common binary fixed point in `i128`, rounded once by the
/// `i128 → f64` conversion. `None` when the exponent spread is too wide.
pub fn fixed_point_sum(values: &[f64]) -> Option<f64> {
    let parts: Vec<(i128, i32)> = values
        .iter()
        .filter(|v| **v != 0.0)
        .map(|&v| {
            let bits = v.to_bits();
            let exp = ((bits >> 52) & 0x7ff) as i32;
            let frac = (bits & ((1u64 << 52) - 1)) as i128;
            let (m, e) = if exp == 0 { (frac, -1074) } else { (frac | (1 << 52), exp - 1075) };
            (if v < 0.0 { -m } else { m }, e)
        })
        .collect();
    let Some(emin) = parts.iter().map(|p| p.1).min() else {
        return Some(0.0);
    };
    let emax = parts.iter().map(|p| p.1).max().unwrap();
    if emax - emin > 60 || parts.len() > 1 << 10 {
        return None;
    }
    let total: i128 = parts.iter().map(|&(m, e)| m << (e - emin)).sum();
    Some(total as f64 * 2f64.powi(emin))
}

/// Per-class counts written out independently of the library.
pub fn metrics_oracle(preds: &[usize], targets: &[usize], c: usize) -> [f64; 4] {
    let n = preds.len() as f64;
    let acc = preds.iter().zip(targets).filter(|(p, t)| p == t).count() as f64 / n;
    let (mut mp, mut mr, mut mf) = (0.0, 0.0, 0.0);
    for k in 0..c {
        let tp = preds.iter().zip(targets).filter(|(&p, &t)| p == k && t == k).count() as f64;
        let fp = preds.iter().zip(targets).filter(|(&p, &t)| p == k && t != k).count() as f64;
        let fn_ = preds.iter().zip(targets).filter(|(&p, &t)| p != k && t == k).count() as f64;
        let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let f = if tp > 0.0 { 2.0 * tp / (2.0 * tp + fp + fn_) } else { 0.0 };
        mp += p;
        mr += r;
        mf += f;
    }
    [acc, mp / c as f64, mr / c as f64, mf / c as f64]
}
