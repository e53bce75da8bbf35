use std::fmt;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::atomic::write_atomic;
use crate::error::{config_err, Error, Result};
use crate::model::{checkpoint, Model};
use crate::nn::{Ctx, Mode, ParamStore};
use crate::tensor::Scalar;

use super::data::{Dataset, CHANNELS, SIDE};
use super::optim::{cosine_lr, ema_update, AdamW, AdamWConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub ema_decay: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
    /// Random flip and pad-crop.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr: 5e-4, weight_decay: 0.05, epochs: 3, batch_size: 64, ema_decay: 0.999, warmup_epochs: 1, seed: 0, augment: true }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(config_err!("learning rate must be finite and ≥ 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(config_err!("ema decay must lie in [0, 1), got {}", self.ema_decay));
        }
        if self.batch_size < 2 {
            return Err(config_err!("batch size must be ≥ 2 for batch statistics"));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(config_err!("weight decay must be ≥ 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    /// Training-mode top-1 on the (augmented) batches seen.
    pub acc: f64,
    /// Eval-mode top-1 of the moving-average weights on the training set.
    pub ema_acc: f64,
}

impl fmt::Display for EpochMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epoch={} lr={:.6e} loss={:.6} acc={:.4} ema_acc={:.4}", self.epoch, self.lr, self.loss, self.acc, self.ema_acc)
    }
}

/// Where a run persists its state; both are rewritten atomically after each
/// completed epoch.
#[derive(Clone, Debug, Default)]
pub struct Outputs {
    pub checkpoint: Option<PathBuf>,
    pub metrics_log: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainSummary<T> {
    pub metrics: Vec<EpochMetrics>,
    pub ema: ParamStore<T>,
    pub steps: u64,
}

/// One optimisation step on a batch; returns the loss and the number of
/// correct training-mode predictions.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut AdamW<T>,
    images: &crate::tensor::Tensor<T>,
    labels: &[usize],
    lr: f64,
) -> Result<(f64, usize)> {
    let arch = &model.arch;
    let mut ctx = Ctx::new(&mut model.params, Mode::Train);
    let x = ctx.input(images.clone());
    let logits = arch.forward(&mut ctx, x)?;
    let correct = count_top_k(ctx.tape.value(logits).data(), labels, 1);
    let loss = ctx.tape.cross_entropy(logits, labels)?;
    let loss_value = ctx.tape.value(loss).item().as_f64();
    if !loss_value.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let grads = ctx.param_grads(loss)?;
    drop(ctx);
    opt.step(&mut model.params, &grads, lr)?;
    Ok((loss_value, correct))
}

/// Labels in the top `k` of each row of `[B, C]` logits. Ties resolve to the
/// lower class index.
pub fn count_top_k<T: Scalar>(logits: &[T], labels: &[usize], k: usize) -> usize {
    let c = logits.len() / labels.len().max(1);
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = &logits[i * c..(i + 1) * c];
            let above = row.iter().enumerate().filter(|&(j, v)| *v > row[y] || (*v == row[y] && j < y)).count();
            above < k
        })
        .count()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Accuracy {
    pub top1: f64,
    pub top5: f64,
}

/// Eval-mode top-1/top-5 (top-k clipped to the class count).
pub fn evaluate<T: Scalar>(model: &mut Model<T>, data: &Dataset, batch_size: usize) -> Result<Accuracy> {
    if data.is_empty() {
        return Err(config_err!("cannot evaluate on an empty dataset"));
    }
    check_compatible(model, data)?;
    let k5 = 5.min(data.num_classes);
    let (mut c1, mut c5) = (0, 0);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.batch::<T>(chunk, None);
        let out = model.predict(&x)?;
        c1 += count_top_k(out.logits.data(), &y, 1);
        c5 += count_top_k(out.logits.data(), &y, k5);
    }
    let n = data.len() as f64;
    Ok(Accuracy { top1: c1 as f64 / n, top5: c5 as f64 / n })
}

fn check_compatible<T: Scalar>(model: &Model<T>, data: &Dataset) -> Result<()> {
    let cfg = model.config();
    if cfg.num_classes != data.num_classes {
        return Err(config_err!("model has {} classes, dataset {}", cfg.num_classes, data.num_classes));
    }
    if cfg.image_size != SIDE || cfg.in_chans != CHANNELS {
        return Err(config_err!("model expects {}x{}x{} images, dataset holds 3x32x32", cfg.in_chans, cfg.image_size, cfg.image_size));
    }
    Ok(())
}

/// Trains in place. `on_epoch` sees each epoch's metrics after they are
/// persisted. A non-finite loss aborts the run; files from the last completed
/// epoch are left untouched.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    outputs: &Outputs,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainSummary<T>> {
    cfg.validate()?;
    check_compatible(model, data)?;
    if data.len() < 2 {
        return Err(config_err!("need at least 2 training samples"));
    }
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let warmup = steps_per_epoch * cfg.warmup_epochs;
    let mut opt = AdamW::new(&model.params, AdamWConfig { weight_decay: cfg.weight_decay, ..Default::default() });
    let mut ema = model.params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches, mut correct, mut seen, mut lr) = (0.0, 0usize, 0usize, 0usize, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let (x, y) = data.batch::<T>(chunk, cfg.augment.then_some(&mut rng));
            lr = cosine_lr(step, total, warmup, cfg.lr);
            let (loss, c) = train_step(model, &mut opt, &x, &y, lr)?;
            for (s, p) in ema.values_mut().iter_mut().zip(model.params.values()) {
                ema_update(s.data_mut(), p.data(), cfg.ema_decay);
            }
            loss_sum += loss;
            batches += 1;
            correct += c;
            seen += chunk.len();
            step += 1;
        }
        let mut ema_model = Model { arch: model.arch.clone(), params: ema.clone() };
        let ema_acc = evaluate(&mut ema_model, data, cfg.batch_size)?.top1;
        let m = EpochMetrics {
            epoch,
            lr,
            loss: loss_sum / batches.max(1) as f64,
            acc: correct as f64 / seen.max(1) as f64,
            ema_acc,
        };
        metrics.push(m);
        persist(model, &ema, epoch, &metrics, outputs)?;
        on_epoch(&m);
    }
    Ok(TrainSummary { metrics, ema, steps: opt.t })
}

/// Text of the metrics log: one line per epoch.
pub fn render_metrics(metrics: &[EpochMetrics]) -> String {
    metrics.iter().map(|m| format!("{m}\n")).collect()
}

fn persist<T: Scalar>(model: &Model<T>, ema: &ParamStore<T>, epoch: usize, metrics: &[EpochMetrics], out: &Outputs) -> Result<()> {
    if let Some(path) = &out.checkpoint {
        checkpoint::save(path, model.config(), &model.params, Some(ema), epoch)?;
    }
    if let Some(path) = &out.metrics_log {
        write_atomic(path, render_metrics(metrics).as_bytes())?;
    }
    Ok(())
}
