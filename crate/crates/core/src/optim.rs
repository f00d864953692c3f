//! AdamW, the polynomial learning-rate schedule, class-weighted pixel
//! cross-entropy and inverse-frequency class weights.

use std::collections::BTreeMap;

use demmae_tensor::Tensor;

use crate::error::{Error, Result};
use crate::nn::ParamSet;

/// First and second moment of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Decoupled-weight-decay Adam. Moment buffers are keyed by parameter name
/// and created on the first update of a parameter, so frozen parameters
/// never get state.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn state(&self) -> &BTreeMap<String, Moments> {
        &self.state
    }

    /// Restores a saved step counter and moment buffers.
    pub fn restore(&mut self, step: u64, state: BTreeMap<String, Moments>) {
        self.step = step;
        self.state = state;
    }

    /// Applies one update to every trainable parameter that received a
    /// gradient, then replaces it with a fresh leaf. Decay applies only to
    /// parameters of rank ≥ 2 (weight matrices and kernels).
    pub fn step(&mut self, sets: &mut [&mut ParamSet], lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for set in sets.iter_mut() {
            for (name, param) in set.iter_mut() {
                if !param.requires_grad() {
                    continue;
                }
                let Some(g) = param.grad() else { continue };
                if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Training(format!(
                        "non-finite gradient in {name} at element {i} (step {})",
                        self.step
                    )));
                }
                let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
                    m: vec![0.0; g.len()],
                    v: vec![0.0; g.len()],
                });
                let decay = if param.rank() >= 2 { self.weight_decay } else { 0.0 };
                let mut values = param.to_vec();
                for (((p, &gi), m), v) in values.iter_mut().zip(&g).zip(&mut st.m).zip(&mut st.v) {
                    *m = b1 * *m + (1.0 - b1) * gi;
                    *v = b2 * *v + (1.0 - b2) * gi * gi;
                    *p -= lr * decay * *p;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
                }
                *param = Tensor::parameter(values, param.shape())?;
            }
        }
        Ok(())
    }
}

/// `(base − min)·(1 − iter/total)^power + min`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolySchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub power: f64,
    pub total_iters: usize,
}

impl PolySchedule {
    pub fn at(&self, iter: usize) -> Result<f64> {
        if iter > self.total_iters || self.total_iters == 0 {
            return Err(Error::Contract(format!(
                "learning-rate query at iteration {iter} of {}",
                self.total_iters
            )));
        }
        let frac = 1.0 - iter as f64 / self.total_iters as f64;
        Ok((self.base_lr - self.min_lr) * frac.powf(self.power) + self.min_lr)
    }
}

/// Learning rate of `plan` at `iter`.
pub fn poly_lr(iter: usize, plan: &TrainPlan) -> Result<f64> {
    plan.schedule().at(iter)
}

pub const IGNORE_INDEX: u8 = 255;

/// Class-weighted pixel cross-entropy over `[B×K×H×W]` logits and
/// `[B×H×W]` labels: `Σ −w_y·log softmax(x)_y / Σ w_y` over non-ignored
/// pixels. Weights are divided by their maximum first, so any common scale
/// cancels exactly. All pixels ignored gives 0 with zero gradient.
pub fn weighted_cross_entropy(logits: &Tensor, labels: &[u8], class_weights: &[f64], ignore_index: u8) -> Result<Tensor> {
    let [b, k, h, w] = *logits.shape() else {
        return Err(Error::Contract(format!("logits must be [B, K, H, W], got {:?}", logits.shape())));
    };
    let plane = h * w;
    if labels.len() != b * plane {
        return Err(Error::Contract(format!(
            "{} labels for logits {:?}",
            labels.len(),
            logits.shape()
        )));
    }
    if class_weights.len() != k || class_weights.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
        return Err(Error::Config(format!("need {k} positive class weights, got {class_weights:?}")));
    }
    let max_w = class_weights.iter().cloned().fold(0.0, f64::max);
    let weights: Vec<f64> = class_weights.iter().map(|c| c / max_w).collect();

    let x = logits.data();
    let mut probs = vec![0.0; x.len()];
    let mut total = 0.0;
    let mut weight_sum = 0.0;
    for (idx, &y) in labels.iter().enumerate() {
        if y == ignore_index {
            continue;
        }
        let (img, px) = (idx / plane, idx % plane);
        if y as usize >= k {
            return Err(Error::Data(format!(
                "label {y} at image {img} row {} col {} outside {k} classes",
                px / w,
                px % w
            )));
        }
        let at = |c: usize| (img * k + c) * plane + px;
        let max = (0..k).map(|c| x[at(c)]).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..k).map(|c| (x[at(c)] - max).exp()).sum();
        for c in 0..k {
            probs[at(c)] = (x[at(c)] - max).exp() / denom;
        }
        let wy = weights[y as usize];
        total += -wy * (x[at(y as usize)] - max - denom.ln());
        weight_sum += wy;
    }
    let loss = if weight_sum > 0.0 { total / weight_sum } else { 0.0 };
    let labels = labels.to_vec();
    Ok(Tensor::from_op(
        "weighted_cross_entropy",
        vec![loss],
        vec![1],
        vec![logits.clone()],
        Box::new(move |g| {
            let mut gx = vec![0.0; probs.len()];
            if weight_sum > 0.0 {
                let scale = g[0] / weight_sum;
                for (idx, &y) in labels.iter().enumerate() {
                    if y == ignore_index {
                        continue;
                    }
                    let (img, px) = (idx / plane, idx % plane);
                    let s = scale * weights[y as usize];
                    for c in 0..k {
                        let at = (img * k + c) * plane + px;
                        let onehot = if c == y as usize { 1.0 } else { 0.0 };
                        gx[at] = s * (probs[at] - onehot);
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}

pub const CLASS_WEIGHT_MIN: f64 = 0.1;
pub const CLASS_WEIGHT_MAX: f64 = 10.0;

/// Inverse-frequency weights `total/(K·count)`, clamped to `[0.1, 10]`;
/// absent classes get the upper clamp.
pub fn compute_class_weights(counts: &[u64]) -> Result<Vec<f64>> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Data("class histogram is empty".into()));
    }
    let k = counts.len() as f64;
    Ok(counts
        .iter()
        .map(|&c| match c {
            0 => CLASS_WEIGHT_MAX,
            c => (total as f64 / (k * c as f64)).clamp(CLASS_WEIGHT_MIN, CLASS_WEIGHT_MAX),
        })
        .collect())
}

/// Fine-tuning schedule and loss settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPlan {
    pub total_iters: usize,
    pub val_every: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub lr_power: f64,
    pub weight_decay: f64,
    pub freeze_backbone: bool,
    pub class_weights: Vec<f64>,
    /// Class whose validation IoU selects the best checkpoint.
    pub target_class: usize,
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            total_iters: 3000,
            val_every: 150,
            batch_size: 8,
            base_lr: 1e-3,
            min_lr: 0.0,
            lr_power: 1.0,
            weight_decay: 0.05,
            freeze_backbone: true,
            class_weights: vec![1.0, 1.0],
            target_class: 1,
            seed: 0,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.total_iters == 0 || self.val_every == 0 || !self.total_iters.is_multiple_of(self.val_every) {
            return Err(Error::Config(format!(
                "val_every {} must divide total_iters {}",
                self.val_every, self.total_iters
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.class_weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::Config(format!("class weights must be positive: {:?}", self.class_weights)));
        }
        if !(self.base_lr >= 0.0 && self.min_lr >= 0.0 && self.lr_power >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rates, power and weight decay must be non-negative".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> PolySchedule {
        PolySchedule {
            base_lr: self.base_lr,
            min_lr: self.min_lr,
            power: self.lr_power,
            total_iters: self.total_iters,
        }
    }

    pub fn n_validations(&self) -> usize {
        self.total_iters / self.val_every
    }

    /// Applies one `key=value` override; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
        }
        match key {
            "total_iters" => self.total_iters = num(key, value)?,
            "val_every" => self.val_every = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "base_lr" => self.base_lr = num(key, value)?,
            "min_lr" => self.min_lr = num(key, value)?,
            "lr_power" => self.lr_power = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "freeze_backbone" => self.freeze_backbone = num(key, value)?,
            "target_class" => self.target_class = num(key, value)?,
            "class_weights" => {
                self.class_weights = value.split(',').map(|v| num(key, v)).collect::<Result<_>>()?;
            }
            _ => return Err(Error::Config(format!("unknown training key {key:?}"))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use demmae_tensor::{with_precision, Precision};

    #[test]
    fn lr_boundaries() {
        let s = PolySchedule {
            base_lr: 1e-3,
            min_lr: 0.0,
            power: 1.0,
            total_iters: 3000,
        };
        assert_eq!(s.at(0).unwrap(), 1e-3);
        assert_eq!(s.at(3000).unwrap(), 0.0);
        assert_eq!(s.at(1500).unwrap(), 5e-4);
        assert!(matches!(s.at(3001), Err(Error::Contract(_))));
    }

    #[test]
    fn class_weight_examples() {
        assert_eq!(compute_class_weights(&[50, 50]).unwrap(), vec![1.0, 1.0]);
        let w = compute_class_weights(&[900, 100]).unwrap();
        assert!((w[0] - 1000.0 / 1800.0).abs() < 1e-12 && w[1] == 5.0);
        assert_eq!(compute_class_weights(&[1_000_000, 1]).unwrap()[1], 10.0);
        assert_eq!(compute_class_weights(&[10, 0]).unwrap()[1], 10.0);
        assert!(matches!(compute_class_weights(&[0, 0]), Err(Error::Data(_))));
    }

    #[test]
    fn cross_entropy_label_error_names_pixel() {
        let logits = Tensor::zeros(&[1, 2, 2, 3]);
        let labels = [0, 0, 0, 0, 7, 0];
        let err = weighted_cross_entropy(&logits, &labels, &[1.0, 1.0], IGNORE_INDEX).unwrap_err();
        assert!(err.to_string().contains("row 1 col 1"), "{err}");
    }

    #[test]
    fn all_ignored_is_zero_with_zero_grad() {
        let logits = Tensor::parameter(vec![0.3; 8], &[1, 2, 2, 2]).unwrap();
        let loss = weighted_cross_entropy(&logits, &[255; 4], &[1.0, 3.0], IGNORE_INDEX).unwrap();
        assert_eq!(loss.item(), 0.0);
        loss.backward().unwrap();
        assert!(logits.grad().unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn adamw_zero_lr_keeps_values_updates_moments() {
        let mut set = ParamSet::default();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        crate::nn::Linear::new(&mut crate::nn::ParamBuilder::new(&mut set, &mut rng), "l", 3, 2).unwrap();
        let before = set.to_bytes();
        let x = Tensor::ones(&[4, 3]);
        let w = set.by_name("l.weight").unwrap().clone();
        x.linear(&w, Some(set.by_name("l.bias").unwrap())).unwrap().sum_all().backward().unwrap();
        let mut opt = AdamW::new(0.05);
        opt.step(&mut [&mut set], 0.0).unwrap();
        assert_eq!(set.to_bytes(), before);
        assert_eq!(opt.step_count(), 1);
        assert!(opt.state()["l.weight"].m.iter().all(|&m| m != 0.0));
    }

    #[test]
    fn adamw_reports_nan_gradient() {
        with_precision(Precision::F64, || {
            let mut set = ParamSet::default();
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
            let mut b = crate::nn::ParamBuilder::new(&mut set, &mut rng);
            let id = b.constant("p", &[2], 1.0).unwrap();
            set.get(id).ln().mul_scalar(f64::NAN).sum_all().backward().unwrap();
            let err = AdamW::new(0.0).step(&mut [&mut set], 0.1).unwrap_err();
            assert!(err.to_string().contains("p"));
        });
    }

    #[test]
    fn plan_validation() {
        let mut p = TrainPlan::default();
        p.validate().unwrap();
        assert_eq!(p.n_validations(), 20);
        p.val_every = 7;
        assert!(p.validate().is_err());
        assert!(p.set("learning_rate", "1").is_err());
    }
}
