//! Confusion matrices, IoU, pixel accuracy and experiment splits.

use std::fmt::{self, Write as _};

use rand::seq::SliceRandom;

use crate::data::{Dataset, IGNORE};
use crate::error::{Error, Result};
use crate::rng;
use crate::seg::{argmax_classes, Segmenter};

/// `K×K` counts, rows = truth, columns = prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub k: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(k: usize) -> Self {
        Confusion {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds every non-ignored pixel of one prediction/truth pair.
    pub fn accumulate(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::Contract(format!(
                "prediction has {} pixels, truth {}",
                pred.len(),
                truth.len()
            )));
        }
        for (i, (&p, &t)) in pred.iter().zip(truth).enumerate() {
            if t == IGNORE {
                continue;
            }
            if t as usize >= self.k || p as usize >= self.k {
                return Err(Error::Data(format!("class {t}/{p} at pixel {i} outside {} classes", self.k)));
            }
            self.counts[t as usize * self.k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
    }

    /// `TP/(TP + FP + FN)`, `None` when the class is absent from both.
    pub fn iou(&self, c: usize) -> Option<f64> {
        let tp = self.get(c, c);
        let fn_: u64 = (0..self.k).map(|p| self.get(c, p)).sum::<u64>() - tp;
        let fp: u64 = (0..self.k).map(|t| self.get(t, c)).sum::<u64>() - tp;
        let union = tp + fp + fn_;
        (union > 0).then(|| tp as f64 / union as f64)
    }

    pub fn pixel_accuracy(&self) -> Option<f64> {
        let total = self.total();
        let correct: u64 = (0..self.k).map(|c| self.get(c, c)).sum();
        (total > 0).then(|| correct as f64 / total as f64)
    }
}

/// Scores of one evaluation run.
#[derive(Clone, Debug, PartialEq)]
pub struct SegReport {
    pub confusion: Confusion,
    pub legend: Vec<String>,
    pub iou: Vec<Option<f64>>,
    pub pixel_accuracy: Option<f64>,
    pub n_images: usize,
    pub model: String,
    pub seed: u64,
}

impl SegReport {
    pub fn from_confusion(confusion: Confusion, legend: &[String], n_images: usize, model: &str, seed: u64) -> Self {
        SegReport {
            iou: (0..confusion.k).map(|c| confusion.iou(c)).collect(),
            pixel_accuracy: confusion.pixel_accuracy(),
            legend: legend.to_vec(),
            confusion,
            n_images,
            model: model.to_string(),
            seed,
        }
    }

    /// `class<TAB>iou<TAB>pixels` per class; absent IoU is written as `-`.
    pub fn records(&self) -> String {
        let mut out = String::new();
        for c in 0..self.confusion.k {
            let pixels: u64 = (0..self.confusion.k).map(|p| self.confusion.get(c, p)).sum();
            let iou = self.iou[c].map_or("-".to_string(), |v| format!("{v:.6}"));
            let _ = writeln!(out, "{}\t{iou}\t{pixels}", self.legend[c]);
        }
        out
    }
}

impl fmt::Display for SegReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "model {}  images {}  seed {}", self.model, self.n_images, self.seed)?;
        let width = self.legend.iter().map(String::len).max().unwrap_or(5).max(5);
        writeln!(f, "{:<width$}  {:>8}  {:>10}", "class", "IoU", "pixels")?;
        for c in 0..self.confusion.k {
            let pixels: u64 = (0..self.confusion.k).map(|p| self.confusion.get(c, p)).sum();
            let iou = self.iou[c].map_or("-".to_string(), |v| format!("{:.2}%", 100.0 * v));
            writeln!(f, "{:<width$}  {iou:>8}  {pixels:>10}", self.legend[c])?;
        }
        let acc = self.pixel_accuracy.map_or("-".to_string(), |v| format!("{:.2}%", 100.0 * v));
        write!(f, "pixel accuracy {acc}")
    }
}

/// Predicted class maps for `ids`, computed `batch` images at a time.
pub fn predict(model: &Segmenter, data: &Dataset, ids: &[usize], batch: usize) -> Result<Vec<Vec<u8>>> {
    let plane = data.side * data.side;
    let channels = model.config().in_channels;
    let mut out = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(batch.max(1)) {
        let (images, _) = data.batch(chunk, channels)?;
        let classes = argmax_classes(&model.logits(&images)?)?;
        out.extend(classes.chunks(plane).map(<[u8]>::to_vec));
    }
    Ok(out)
}

/// Dataset-pooled scores of `model` on `ids`.
pub fn evaluate(model: &Segmenter, data: &Dataset, ids: &[usize], batch: usize, seed: u64) -> Result<SegReport> {
    if ids.is_empty() {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    let preds = predict(model, data, ids, batch)?;
    let mut conf = Confusion::new(data.n_classes());
    for (p, &i) in preds.iter().zip(ids) {
        conf.accumulate(p, &data.samples[i].label)?;
    }
    Ok(SegReport::from_confusion(conf, &data.legend, ids.len(), model.kind().name(), seed))
}

/// Fixed validation set plus nested training subsets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleCurve {
    pub val: Vec<usize>,
    /// `(size, ids)` in ascending size; each is a prefix of the next.
    pub train: Vec<(usize, Vec<usize>)>,
}

pub const CURVE_SIZES: [usize; 4] = [10, 50, 200, 450];
pub const CURVE_VAL: usize = 50;

/// Shuffles `pool` with `seed`; the first `n_val` become validation, and
/// each training subset is a prefix of the remainder.
pub fn sample_curve(pool: &[usize], sizes: &[usize], n_val: usize, seed: u64) -> Result<SampleCurve> {
    let mut sizes = sizes.to_vec();
    sizes.sort_unstable();
    sizes.dedup();
    let largest = sizes.last().copied().unwrap_or(0);
    if pool.len() < largest + n_val {
        return Err(Error::Config(format!(
            "sample curve needs {} images ({largest} train + {n_val} val), dataset has {}",
            largest + n_val,
            pool.len()
        )));
    }
    let mut order = pool.to_vec();
    order.shuffle(&mut rng::stream(seed, &[0x4355_5256]));
    let (val, rest) = order.split_at(n_val);
    Ok(SampleCurve {
        val: val.to_vec(),
        train: sizes.iter().map(|&s| (s, rest[..s].to_vec())).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_ignored() {
        let mut c = Confusion::new(2);
        let truth: Vec<u8> = (0..100).map(|i| (i % 3 == 0) as u8).collect();
        c.accumulate(&truth, &truth).unwrap();
        assert_eq!(c.get(0, 0) + c.get(1, 1), 100);
        assert_eq!(c.iou(1), Some(1.0));
        let before = c.clone();
        c.accumulate(&[1; 4], &[IGNORE; 4]).unwrap();
        assert_eq!(c, before);
    }

    #[test]
    fn block_overlap_oracle() {
        let block = |r0: usize, c0: usize| -> Vec<u8> {
            (0..16usize).map(|i| ((i / 4).wrapping_sub(r0) < 2 && (i % 4).wrapping_sub(c0) < 2) as u8).collect()
        };
        let mut c = Confusion::new(2);
        c.accumulate(&block(0, 0), &block(1, 1)).unwrap();
        assert!((c.iou(1).unwrap() - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_and_absent() {
        let mut c = Confusion::new(2);
        c.accumulate(&[1, 0], &[0, 1]).unwrap();
        assert_eq!(c.iou(1), Some(0.0));
        let mut c = Confusion::new(2);
        c.accumulate(&[0, 0], &[0, 0]).unwrap();
        assert_eq!(c.iou(1), None);
    }

    #[test]
    fn extent_mismatch_is_contract_error() {
        assert!(matches!(Confusion::new(2).accumulate(&[0], &[0, 1]), Err(Error::Contract(_))));
    }

    #[test]
    fn curve_is_nested_and_disjoint() {
        let pool: Vec<usize> = (0..500).collect();
        let c = sample_curve(&pool, &CURVE_SIZES, CURVE_VAL, 3).unwrap();
        assert_eq!(c.val.len(), 50);
        for w in c.train.windows(2) {
            assert_eq!(&w[1].1[..w[0].0], &w[0].1[..]);
        }
        let last = &c.train[3].1;
        assert!(c.val.iter().all(|v| !last.contains(v)));
        assert_eq!(c, sample_curve(&pool, &CURVE_SIZES, CURVE_VAL, 3).unwrap());
        assert!(matches!(sample_curve(&pool[..400], &CURVE_SIZES, CURVE_VAL, 3), Err(Error::Config(_))));
    }

    #[test]
    fn report_records() {
        let mut c = Confusion::new(2);
        c.accumulate(&[0, 1, 1, 0], &[0, 1, 0, 0]).unwrap();
        let r = SegReport::from_confusion(c, &["background".into(), "building".into()], 1, "unet", 0);
        assert_eq!(r.records(), "background\t0.666667\t3\nbuilding\t0.500000\t1\n");
        assert!(r.to_string().contains("50.00%"));
    }
}
