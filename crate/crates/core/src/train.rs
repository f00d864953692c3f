//! Pre-training and fine-tuning loops.

use std::collections::HashMap;
use std::fmt;

use demmae_tensor::Tensor;
use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mae::{pretrain_step, MaeModel};
use crate::metrics::Confusion;
use crate::optim::{weighted_cross_entropy, AdamW, PolySchedule, TrainPlan, IGNORE_INDEX};
use crate::rng;
use crate::seg::{argmax_classes, Segmenter};

const BATCH_STREAM: u64 = 0x4241_5443;

/// `batch` ids drawn uniformly with replacement from `pool` for `iteration`.
pub fn sample_batch(pool: &[usize], batch: usize, seed: u64, iteration: u64) -> Vec<usize> {
    let mut r = rng::stream(seed, &[BATCH_STREAM, iteration]);
    (0..batch).map(|_| pool[r.gen_range(0..pool.len())]).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainPlan {
    pub total_iters: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub lr_power: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainPlan {
    fn default() -> Self {
        PretrainPlan {
            total_iters: 500,
            batch_size: 8,
            base_lr: 1.5e-4,
            min_lr: 0.0,
            lr_power: 1.0,
            weight_decay: 0.05,
            seed: 0,
        }
    }
}

impl PretrainPlan {
    pub fn schedule(&self) -> PolySchedule {
        PolySchedule {
            base_lr: self.base_lr,
            min_lr: self.min_lr,
            power: self.lr_power,
            total_iters: self.total_iters,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
        }
        match key {
            "total_iters" => self.total_iters = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "base_lr" => self.base_lr = num(key, value)?,
            "min_lr" => self.min_lr = num(key, value)?,
            "lr_power" => self.lr_power = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown pre-training key {key:?}"))),
        }
        Ok(())
    }
}

/// Runs MAE steps `start+1 ..= total_iters` on images drawn from `pool`,
/// calling `on_step(step, loss, model)` after each update. Returns the
/// per-step losses.
pub fn pretrain_loop(
    model: &mut MaeModel,
    optimizer: &mut AdamW,
    data: &Dataset,
    pool: &[usize],
    plan: &PretrainPlan,
    start: usize,
    mut on_step: impl FnMut(usize, f64, &MaeModel) -> Result<()>,
) -> Result<Vec<f64>> {
    if pool.is_empty() {
        return Err(Error::Config("pre-training pool is empty".into()));
    }
    if plan.batch_size == 0 || start > plan.total_iters {
        return Err(Error::Config(format!(
            "cannot run pre-training from step {start} to {} with batch {}",
            plan.total_iters, plan.batch_size
        )));
    }
    let schedule = plan.schedule();
    let channels = model.config().in_channels;
    let mut losses = Vec::with_capacity(plan.total_iters - start);
    for step in start + 1..=plan.total_iters {
        let ids = sample_batch(pool, plan.batch_size, plan.seed, step as u64);
        let (images, _) = data.batch(&ids, channels)?;
        let lr = schedule.at(step - 1)?;
        let loss = pretrain_step(model, &images, optimizer, lr, plan.seed, step as u64)
            .map_err(|e| Error::Training(format!("iteration {step}: {e}")))?;
        losses.push(loss);
        on_step(step, loss, model)?;
    }
    Ok(losses)
}

/// One validation point of a fine-tuning run.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceEntry {
    pub iter: usize,
    /// Mean training loss since the previous entry.
    pub loss: f64,
    /// Validation IoU of the target class; 0 when the class is absent from
    /// both prediction and truth.
    pub val_iou: f64,
    pub lr: f64,
}

impl fmt::Display for TraceEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "iter {} loss {:.6} val_iou {:.6} lr {:.6e}",
            self.iter, self.loss, self.val_iou, self.lr
        )
    }
}

pub struct FinetuneOutcome {
    pub best: Segmenter,
    pub best_iter: usize,
    pub best_iou: f64,
    pub last: Segmenter,
    pub trace: Vec<TraceEntry>,
}

/// Frozen-backbone taps, computed once per sample.
struct TapCache {
    taps: HashMap<usize, Vec<Tensor>>,
}

impl TapCache {
    fn batch(&mut self, model: &Segmenter, data: &Dataset, ids: &[usize]) -> Result<Vec<Tensor>> {
        let channels = model.config().in_channels;
        for &i in ids {
            if let std::collections::hash_map::Entry::Vacant(e) = self.taps.entry(i) {
                let (img, _) = data.batch(&[i], channels)?;
                let taps = model.features(&img)?.expect("backbone present");
                e.insert(taps);
            }
        }
        let n = self.taps[&ids[0]].len();
        (0..n)
            .map(|level| {
                let parts: Vec<Tensor> = ids.iter().map(|i| self.taps[i][level].clone()).collect();
                Ok(Tensor::concat(&parts, 0)?)
            })
            .collect()
    }
}

fn logits(model: &Segmenter, data: &Dataset, ids: &[usize], cache: Option<&mut TapCache>) -> Result<(Tensor, Vec<u8>)> {
    let (images, labels) = data.batch(ids, model.config().in_channels)?;
    let out = match cache {
        Some(c) => {
            let taps = c.batch(model, data, ids)?;
            model.logits_from(&images, Some(&taps))?
        }
        None => model.logits(&images)?,
    };
    Ok((out, labels))
}

fn validate(model: &Segmenter, data: &Dataset, val: &[usize], batch: usize, target: usize, mut cache: Option<&mut TapCache>) -> Result<f64> {
    let mut conf = Confusion::new(data.n_classes());
    for chunk in val.chunks(batch.max(1)) {
        let (out, labels) = logits(model, data, chunk, cache.as_deref_mut())?;
        conf.accumulate(&argmax_classes(&out)?, &labels)?;
    }
    Ok(conf.iou(target).unwrap_or(0.0))
}

/// Trains the trainable parts of `model` on `train`, validating on `val`
/// every `plan.val_every` iterations. The snapshot with the highest
/// validation IoU (earliest on ties) is returned as `best`.
pub fn finetune_loop(
    mut model: Segmenter,
    data: &Dataset,
    train: &[usize],
    val: &[usize],
    plan: &TrainPlan,
    mut on_trace: impl FnMut(&TraceEntry) -> Result<()>,
) -> Result<FinetuneOutcome> {
    plan.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    if let Some(i) = val.iter().find(|i| train.contains(i)) {
        return Err(Error::Config(format!("sample {i} is in both training and validation splits")));
    }
    if plan.class_weights.len() != data.n_classes() || plan.target_class >= data.n_classes() {
        return Err(Error::Config(format!(
            "{} class weights / target class {} for {} classes",
            plan.class_weights.len(),
            plan.target_class,
            data.n_classes()
        )));
    }
    model.set_backbone_trainable(!plan.freeze_backbone);
    let frozen = model.backbone_frozen();
    let mut cache = frozen.then(|| TapCache { taps: HashMap::new() });
    let mut optimizer = AdamW::new(plan.weight_decay);
    let schedule = plan.schedule();

    let mut trace = Vec::with_capacity(plan.n_validations());
    let mut best: Option<(f64, usize, Segmenter)> = None;
    let mut window = Vec::with_capacity(plan.val_every);
    for iter in 1..=plan.total_iters {
        let ids = sample_batch(train, plan.batch_size, plan.seed, iter as u64);
        let lr = schedule.at(iter - 1)?;
        let (out, labels) = logits(&model, data, &ids, cache.as_mut())?;
        let loss = weighted_cross_entropy(&out, &labels, &plan.class_weights, IGNORE_INDEX)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Training(format!("non-finite loss at iteration {iter}")));
        }
        loss.backward()?;
        optimizer
            .step(&mut model.param_sets_mut(), lr)
            .map_err(|e| Error::Training(format!("iteration {iter}: {e}")))?;
        window.push(value);
        if iter % plan.val_every == 0 {
            let val_iou = validate(&model, data, val, plan.batch_size, plan.target_class, cache.as_mut())?;
            let entry = TraceEntry {
                iter,
                loss: window.iter().sum::<f64>() / window.len() as f64,
                val_iou,
                lr,
            };
            window.clear();
            on_trace(&entry)?;
            if best.as_ref().is_none_or(|(b, _, _)| val_iou > *b) {
                best = Some((val_iou, iter, model.clone()));
            }
            trace.push(entry);
        }
    }
    let (best_iou, best_iter, best) = best.expect("at least one validation");
    Ok(FinetuneOutcome {
        best,
        best_iter,
        best_iou,
        last: model,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_are_seeded() {
        let pool: Vec<usize> = (10..20).collect();
        let a = sample_batch(&pool, 8, 3, 5);
        assert_eq!(a, sample_batch(&pool, 8, 3, 5));
        assert_ne!(a, sample_batch(&pool, 8, 3, 6));
        assert!(a.iter().all(|i| pool.contains(i)));
    }

    #[test]
    fn trace_line_format() {
        let e = TraceEntry {
            iter: 150,
            loss: 0.5,
            val_iou: 0.25,
            lr: 1e-3,
        };
        assert_eq!(e.to_string(), "iter 150 loss 0.500000 val_iou 0.250000 lr 1.000000e-3");
    }
}
