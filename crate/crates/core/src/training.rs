//! Losses, the learning-rate schedule, AdamW, the training loop and
//! classification metrics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{policy_stack, AugmentConfig};
use crate::error::{Error, Result};
use crate::model::{ParamGrads, ParamStore, PainViT};
use crate::numerics::{Graph, Mode, Tensor, Var};

// ------------------------------------------------------------------ losses

/// Targets with `1 − ε` on the true class and `ε/(C−1)` elsewhere.
pub fn smoothed_targets(targets: &[usize], classes: usize, eps: f64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Config(format!("label smoothing {eps} outside [0, 1)")));
    }
    let off = if classes > 1 { eps / (classes - 1) as f64 } else { 0.0 };
    let on = if classes > 1 { 1.0 - eps } else { 1.0 };
    let mut data = vec![off; targets.len() * classes];
    for (r, &t) in targets.iter().enumerate() {
        if t >= classes {
            return Err(Error::Data(format!("target class {t} at row {r} but only {classes} classes")));
        }
        data[r * classes + t] = on;
    }
    Tensor::new(&[targets.len(), classes], data)
}

/// Batch-mean cross-entropy of `logits[B,C]` against label-smoothed targets.
pub fn ce_label_smoothing(graph: &mut Graph, logits: Var, targets: &[usize], eps: f64) -> Result<Var> {
    let shape = graph.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::Dimension(format!(
            "logits {shape:?} do not match {} targets",
            targets.len()
        )));
    }
    let t = smoothed_targets(targets, shape[1], eps)?;
    graph.softmax_cross_entropy(logits, &t)
}

/// Learnable per-task weights of the multi-task objective
/// `Σᵢ e^{wᵢ}·Lᵢ + wᵢ`.
#[derive(Clone, Debug)]
pub struct MultiTaskLossState {
    pub w: Tensor,
    /// Use `e^{−wᵢ}` instead of `e^{wᵢ}`.
    pub uncertainty_sign: bool,
}

impl MultiTaskLossState {
    pub fn new(num_tasks: usize) -> Result<Self> {
        if num_tasks == 0 {
            return Err(Error::Config("multi-task loss needs at least one task".into()));
        }
        Ok(MultiTaskLossState {
            w: Tensor::zeros(&[num_tasks]).with_requires_grad(true),
            uncertainty_sign: false,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.w.numel()
    }
}

/// Combines per-task scalar losses with the weights bound at `w`
/// (shape `[T]`). Every slot of `losses` must be filled.
pub fn multitask_loss(graph: &mut Graph, w: Var, losses: &[Option<Var>], uncertainty_sign: bool) -> Result<Var> {
    let t = graph.shape(w).iter().product::<usize>();
    if losses.len() != t {
        return Err(Error::State(format!("{} task losses for {t} task weights", losses.len())));
    }
    let mut total: Option<Var> = None;
    for (i, l) in losses.iter().enumerate() {
        let l = l.ok_or_else(|| Error::State(format!("task {i} has no loss this step")))?;
        let wi = graph.narrow(w, 0, i, 1)?;
        let wi = graph.reshape(wi, &[])?;
        let arg = if uncertainty_sign { graph.scale(wi, -1.0) } else { wi };
        let factor = graph.exp(arg);
        let l = graph.reshape(l, &[])?;
        let term = graph.mul(factor, l)?;
        let term = graph.add(term, wi)?;
        total = Some(match total {
            Some(acc) => graph.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one task"))
}

// --------------------------------------------------------------- schedule

/// Hyper-parameters of the training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub cooldown_epochs: usize,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub dropout: f64,
    /// Floor of the cosine decay as a fraction of `lr`.
    pub lr_floor_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-5,
            weight_decay: 0.1,
            epochs: 100,
            warmup_epochs: 10,
            cooldown_epochs: 10,
            batch_size: 32,
            label_smoothing: 0.1,
            dropout: 0.5,
            lr_floor_ratio: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if self.warmup_epochs + self.cooldown_epochs > self.epochs {
            return bad(format!(
                "warmup ({}) + cooldown ({}) exceed {} epochs",
                self.warmup_epochs, self.cooldown_epochs, self.epochs
            ));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return bad(format!("lr {} / weight decay {} out of range", self.lr, self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) || !(0.0..1.0).contains(&self.dropout) {
            return bad(format!(
                "label smoothing {} / dropout {} outside [0, 1)",
                self.label_smoothing, self.dropout
            ));
        }
        Ok(())
    }
}

/// Learning rate at optimizer step `step`: linear warmup from 0, cosine decay
/// to `lr · lr_floor_ratio`, then that floor through the cooldown epochs.
pub fn lr_at(step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let warm = cfg.warmup_epochs * steps_per_epoch;
    let decay_end = (cfg.epochs - cfg.cooldown_epochs) * steps_per_epoch;
    let floor = cfg.lr * cfg.lr_floor_ratio;
    if step < warm {
        return cfg.lr * step as f64 / warm as f64;
    }
    if step >= decay_end {
        return if decay_end > warm { floor } else { cfg.lr };
    }
    let t = (step - warm) as f64 / (decay_end - warm) as f64;
    floor + (cfg.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

// -------------------------------------------------------------- optimizer

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            ..AdamW::new(cfg.weight_decay)
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every `params[i]` with `grads[i]`; a `None` gradient
    /// leaves that tensor and its moments untouched.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Option<&[f64]>], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Dimension(format!(
                "{} parameter tensors but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Dimension(format!(
                "optimizer state holds {} tensors, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if let Some(g) = g {
                if g.len() != p.len() || self.m[i].len() != p.len() {
                    return Err(Error::Dimension(format!(
                        "tensor {i}: {} values, {} gradients, {} state entries",
                        p.len(),
                        g.len(),
                        self.m[i].len()
                    )));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                p[j] -= lr * self.weight_decay * p[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// [`AdamW::step`] over every parameter of `store`.
    pub fn step_store(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f64) -> Result<()> {
        let mut params: Vec<&mut [f64]> = store.params_mut().iter_mut().map(|p| p.tensor.data_mut()).collect();
        let g: Vec<Option<&[f64]>> = grads.0.iter().map(|g| g.as_deref()).collect();
        self.step(&mut params, &g, lr)
    }
}

// ---------------------------------------------------------------- metrics

/// Confusion-matrix metrics. Rows of `confusion` are true classes, columns
/// predictions. Per-class precision, recall or F1 with a zero denominator
/// count as 0 in the macro averages.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub confusion: Vec<Vec<usize>>,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl Metrics {
    pub fn from_confusion(confusion: Vec<Vec<usize>>) -> Result<Self> {
        let c = confusion.len();
        if c == 0 || confusion.iter().any(|r| r.len() != c) {
            return Err(Error::Dimension("confusion matrix must be square and non-empty".into()));
        }
        let total: usize = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(Error::Data("no samples to score".into()));
        }
        let trace: usize = (0..c).map(|i| confusion[i][i]).sum();
        let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
        for k in 0..c {
            let tp = confusion[k][k];
            let predicted: usize = (0..c).map(|i| confusion[i][k]).sum();
            let support: usize = confusion[k].iter().sum();
            let pk = ratio(tp, predicted);
            let rk = ratio(tp, support);
            let fk = if pk + rk > 0.0 { 2.0 * pk * rk / (pk + rk) } else { 0.0 };
            p += pk;
            r += rk;
            f += fk;
        }
        let n = c as f64;
        Ok(Metrics {
            accuracy: ratio(trace, total),
            macro_precision: p / n,
            macro_recall: r / n,
            macro_f1: f / n,
            confusion,
        })
    }

    pub fn from_predictions(predictions: &[usize], targets: &[usize], classes: usize) -> Result<Self> {
        if predictions.len() != targets.len() {
            return Err(Error::Dimension(format!(
                "{} predictions for {} targets",
                predictions.len(),
                targets.len()
            )));
        }
        let mut confusion = vec![vec![0; classes]; classes];
        for (&p, &t) in predictions.iter().zip(targets) {
            if p >= classes || t >= classes {
                return Err(Error::Data(format!("class index out of range ({p} / {t} of {classes})")));
            }
            confusion[t][p] += 1;
        }
        Metrics::from_confusion(confusion)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

// --------------------------------------------------------------- datasets

/// Labelled images produced on demand.
pub trait Samples {
    fn len(&self) -> usize;
    fn label(&self, i: usize) -> usize;
    /// `[C, H, W]` image of sample `i`.
    fn image(&self, i: usize) -> Result<Tensor>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Images held in memory.
#[derive(Clone, Debug, Default)]
pub struct InMemory {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Samples for InMemory {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    fn image(&self, i: usize) -> Result<Tensor> {
        Ok(self.images[i].clone())
    }
}

/// Stacks equally shaped `[C, H, W]` images into `[B, C, H, W]`.
pub fn stack(images: &[Tensor]) -> Result<Tensor> {
    let shape = images[0].shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * images[0].numel());
    for im in images {
        if im.shape() != shape.as_slice() {
            return Err(Error::Dimension(format!(
                "batch mixes image shapes {shape:?} and {:?}",
                im.shape()
            )));
        }
        data.extend_from_slice(im.data());
    }
    let mut full = vec![images.len()];
    full.extend(shape);
    Tensor::new(&full, data)
}

/// Eval-mode logits for every sample, `batch_size` images at a time.
pub fn predict_logits(model: &PainViT, data: &dyn Samples, batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let c = model.config().num_classes;
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let imgs = chunk.iter().map(|&i| data.image(i)).collect::<Result<Vec<_>>>()?;
        let (_, logits) = model.infer(&stack(&imgs)?)?;
        out.extend(logits.data().chunks(c).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Accuracy and macro metrics of `model` on `data` (eval mode, no updates).
pub fn evaluate(model: &PainViT, data: &dyn Samples, batch_size: usize) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let logits = predict_logits(model, data, batch_size)?;
    let preds: Vec<usize> = logits.iter().map(|l| argmax(l)).collect();
    let targets: Vec<usize> = (0..data.len()).map(|i| data.label(i)).collect();
    Metrics::from_predictions(&preds, &targets, model.config().num_classes)
}

// ----------------------------------------------------------------- train

/// One row of the training history.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub steps: usize,
    pub val: Option<Metrics>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Epoch whose weights the model holds on return.
    pub best_epoch: usize,
    pub best_val_accuracy: Option<f64>,
    pub optimizer_steps: usize,
}

/// Independent rng streams derived from one seed.
pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

const SHUFFLE_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 2;
const DROPOUT_STREAM: u64 = 3;

/// Mini-batch training with shuffling, train-only augmentation, train-mode
/// batch norm, AdamW and the warmup/cosine/cooldown schedule. When `val` is
/// given the model is left holding the weights of the best validation
/// accuracy (earliest epoch on ties).
pub fn train(
    model: &mut PainViT,
    data: &dyn Samples,
    val: Option<&dyn Samples>,
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    train_with(model, data, val, cfg, aug, seed, &mut |_, _| Ok(()))
}

/// [`train`] with a callback after each epoch.
pub fn train_with(
    model: &mut PainViT,
    data: &dyn Samples,
    val: Option<&dyn Samples>,
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochRecord, &PainViT) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    aug.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let n = data.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let mut shuffle_rng = stream(seed, SHUFFLE_STREAM);
    let mut aug_rng = stream(seed, AUGMENT_STREAM);
    let mut drop_rng = stream(seed, DROPOUT_STREAM);
    let mut opt = AdamW::from_config(cfg);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut global = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut imgs = Vec::with_capacity(batch.len());
            for &i in batch {
                let im = data.image(i)?;
                imgs.push(if aug.is_identity() {
                    im
                } else {
                    policy_stack(&im, aug, &mut aug_rng)?
                });
            }
            let targets: Vec<usize> = batch.iter().map(|&i| data.label(i)).collect();
            let x = stack(&imgs)?;
            let (loss, grads, moments) = {
                let mut pass = model.pass(model.options(Mode::Train, true));
                let xv = pass.graph.constant(x);
                let out = model.forward(&mut pass, xv, Some((cfg.dropout, &mut drop_rng)))?;
                let loss = ce_label_smoothing(&mut pass.graph, out.logits, &targets, cfg.label_smoothing)?;
                let value = pass.graph.value(loss).item()?;
                let grads = pass.param_grads(loss)?;
                (value, grads, pass.take_moments())
            };
            if !loss.is_finite() {
                return Err(Error::State(format!("loss diverged at epoch {epoch}")));
            }
            model.apply_moments(&moments);
            lr = lr_at(global, steps_per_epoch, cfg);
            opt.step_store(model.store_mut(), &grads, lr)?;
            loss_sum += loss * batch.len() as f64;
            global += 1;
        }
        let val_metrics = match val {
            Some(v) => Some(evaluate(model, v, cfg.batch_size)?),
            None => None,
        };
        if let Some(m) = &val_metrics {
            if best.as_ref().is_none_or(|b| m.accuracy > b.0) {
                best = Some((m.accuracy, epoch, model.store().clone()));
            }
        }
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / n as f64,
            steps: steps_per_epoch,
            val: val_metrics,
        };
        on_epoch(&rec, model)?;
        history.push(rec);
    }

    let (best_epoch, best_val_accuracy) = match best {
        Some((acc, epoch, store)) => {
            *model.store_mut() = store;
            (epoch, Some(acc))
        }
        None => (cfg.epochs - 1, None),
    };
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_accuracy,
        optimizer_steps: global,
    })
}
