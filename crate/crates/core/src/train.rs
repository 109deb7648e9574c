//! Loss, AdamW, learning-rate schedule, training loop and evaluation.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::data::{BatchIter, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::model::PaCaModel;
use crate::params::ParamStore;
use crate::scalar::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Defaults to 5% of `steps` when `None`.
    pub warmup_steps: Option<usize>,
    pub seed: u64,
    /// Global-norm clip threshold.
    pub grad_clip: Option<f64>,
    /// Evaluate every this many steps (and after the last one); 0 disables
    /// periodic evaluation.
    pub eval_every: usize,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            weight_decay: 0.05,
            betas: (0.9, 0.999),
            eps: 1e-8,
            steps: 200,
            batch_size: 32,
            warmup_steps: None,
            seed: 0,
            grad_clip: Some(5.0),
            eval_every: 50,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return bad("betas must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 || self.eps <= 0.0 {
            return bad("weight decay must be non-negative and eps positive");
        }
        if self.batch_size == 0 || self.steps == 0 {
            return bad("steps and batch size must be positive");
        }
        if matches!(self.grad_clip, Some(c) if c.is_nan() || c <= 0.0) {
            return bad("gradient clip must be positive");
        }
        Ok(())
    }

    pub fn warmup(&self) -> usize {
        self.warmup_steps.unwrap_or(self.steps / 20)
    }
}

/// Mean cross-entropy of `logits[B, K]` against `labels`.
pub fn cross_entropy<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

/// Linear warmup to `base`, then cosine decay to zero at `total`.
pub fn lr_at(step: usize, total: usize, warmup: usize, base: f64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    base * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress))
}

/// First and second moment buffers, one pair per parameter.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = |id| Tensor::zeros_like_shape(params.get(id).shape());
        OptimizerState {
            m: params.ids().map(zeros).collect(),
            v: params.ids().map(zeros).collect(),
            step: 0,
        }
    }
}

/// One AdamW update with bias correction. Decay is decoupled and applied
/// only to parameters registered with `decay` (biases and norm affine
/// parameters are excluded). A `None` gradient counts as zero.
pub fn adamw_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut OptimizerState<T>,
    lr: f64,
    cfg: &TrainConfig,
) {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - libm::pow(b1, t as f64);
    let c2 = 1.0 - libm::pow(b2, t as f64);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let decay = params.decays(id);
        let i = id.index();
        let g = grads.get(i).and_then(|g| g.as_ref());
        let p = params.get_mut(id).data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for k in 0..p.len() {
            let gk = g.map_or(0.0, |g| g.data()[k].to_f64());
            let mut pk = p[k].to_f64();
            if decay {
                pk *= 1.0 - lr * cfg.weight_decay;
            }
            let mk = b1 * m[k].to_f64() + (1.0 - b1) * gk;
            let vk = b2 * v[k].to_f64() + (1.0 - b2) * gk * gk;
            pk -= lr * (mk / c1) / (libm::sqrt(vk / c2) + cfg.eps);
            m[k] = T::from_f64(mk);
            v[k] = T::from_f64(vk);
            p[k] = T::from_f64(pk);
        }
    }
}

/// Scales gradients in place so their global L2 norm is at most `max`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [Option<Tensor<T>>], max: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|v| v.to_f64() * v.to_f64())
        .sum();
    let norm = libm::sqrt(sq);
    if norm > max {
        let s = T::from_f64(max / (norm + 1e-6));
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Loss and per-parameter gradients (indexed by `ParamId`) on one batch.
pub fn compute_gradients<T: Real>(
    model: &PaCaModel<T>,
    images: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Vec<Option<Tensor<T>>>)> {
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape, true);
    let out = model.forward(&mut tape, &p, images, false)?;
    let loss = cross_entropy(&mut tape, out.logits, labels)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    tape.backward(loss)?;
    let grads = p.vars().iter().map(|&v| tape.grad(v).cloned()).collect();
    Ok((value, grads))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy over the whole dataset.
pub fn evaluate<T: Real>(
    model: &PaCaModel<T>,
    ds: &Dataset,
    batch_size: usize,
    norm: Normalization,
) -> Result<f64> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for batch in BatchIter::<T>::sequential(ds, batch_size, norm)? {
        let logits = model.predict(&batch.images)?;
        for (r, &label) in batch.labels.iter().enumerate() {
            if argmax(logits.row(r)) == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub eval_top1: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
    pub best_top1: Option<f64>,
}

impl MetricsLog {
    /// `step,lr,loss,eval_top1` with an empty cell when no evaluation ran.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,lr,loss,eval_top1\n");
        for r in &self.rows {
            let _ = write!(s, "{},{:.9e},{:.9e},", r.step, r.lr, r.loss);
            if let Some(acc) = r.eval_top1 {
                let _ = write!(s, "{acc:.6}");
            }
            s.push('\n');
        }
        s
    }

    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Best,
    Final,
}

/// Callbacks from [`train_loop`]; all default to no-ops.
pub trait TrainHooks<T> {
    fn on_step(&mut self, _row: &MetricsRow) {}
    fn on_checkpoint(&mut self, _kind: CheckpointKind, _model: &PaCaModel<T>) -> Result<()> {
        Ok(())
    }
}

impl<T> TrainHooks<T> for () {}

/// Trains `model` in place for `cfg.steps` steps. Evaluation uses `eval`,
/// or the training set when `eval` is `None`.
pub fn train_loop<T: Real>(
    model: &mut PaCaModel<T>,
    train: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    hooks: &mut dyn TrainHooks<T>,
) -> Result<MetricsLog> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidConfig("empty training set".into()));
    }
    if train.classes() > model.config().classes {
        return Err(Error::InvalidConfig(format!(
            "dataset has {} classes, model {}",
            train.classes(),
            model.config().classes
        )));
    }
    let norm = Normalization::default();
    let eval_ds = eval.unwrap_or(train);
    let warmup = cfg.warmup();
    let mut state = OptimizerState::new(model.params());
    let mut log = MetricsLog::default();
    let mut epoch = 0u64;
    let mut batches = epoch_iter(train, cfg, epoch, norm)?;

    for step in 0..cfg.steps {
        let batch = match batches.next() {
            Some(b) => b,
            None => {
                epoch += 1;
                batches = epoch_iter(train, cfg, epoch, norm)?;
                batches
                    .next()
                    .ok_or_else(|| Error::InvalidConfig("empty epoch".into()))?
            }
        };
        let lr = lr_at(step, cfg.steps, warmup, cfg.lr);
        let (loss, mut grads) =
            compute_gradients(model, &batch.images, &batch.labels).map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFiniteLoss { step },
                e => e,
            })?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        if let Some(max) = cfg.grad_clip {
            clip_grad_norm(&mut grads, max);
        }
        adamw_step(model.params_mut(), &grads, &mut state, lr, cfg);

        let last = step + 1 == cfg.steps;
        let eval_top1 = if last || (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) {
            Some(evaluate(model, eval_ds, cfg.batch_size, norm)?)
        } else {
            None
        };
        let row = MetricsRow {
            step,
            lr,
            loss: loss.to_f64(),
            eval_top1,
        };
        hooks.on_step(&row);
        if let Some(acc) = eval_top1 {
            if log.best_top1.is_none_or(|b| acc > b) {
                log.best_top1 = Some(acc);
                hooks.on_checkpoint(CheckpointKind::Best, model)?;
            }
        }
        log.rows.push(row);
    }
    hooks.on_checkpoint(CheckpointKind::Final, model)?;
    Ok(log)
}

fn epoch_iter<'a, T: Real>(
    ds: &'a Dataset,
    cfg: &TrainConfig,
    epoch: u64,
    norm: Normalization,
) -> Result<BatchIter<'a, T>> {
    let it = BatchIter::new(ds, cfg.batch_size, cfg.seed, epoch, norm)?;
    Ok(if cfg.augment {
        it.with_augmentation(cfg.seed, epoch)
    } else {
        it
    })
}
