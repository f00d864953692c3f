//! Masking, loss, optimizer, metric and data-format properties checked
//! against independent oracles.

use demmae_core::data::{
    components, read_ascii_grid, read_mask_pgm, synth_scene, tile_raster, write_ascii_grid, write_mask_pgm,
    Checkpoint, LabelMask, Raster, SceneParams,
};
use demmae_core::error::Error;
use demmae_core::mae::{keep_count, random_mask, reconstruction_loss, MaskPlan};
use demmae_core::metrics::Confusion;
use demmae_core::nn::{ParamBuilder, ParamSet};
use demmae_core::optim::{compute_class_weights, weighted_cross_entropy, AdamW, PolySchedule, TrainPlan};
use demmae_core::poly_lr;
use demmae_tensor::{with_precision, Precision, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---- masking ----

#[test]
fn floor_rule_counts() {
    assert_eq!(keep_count(196, 0.75), 49);
    let plan = random_mask(196, 0.75, &mut rng(0)).unwrap();
    assert_eq!((plan.keep_ids.len(), plan.mask_ids.len()), (49, 147));
    assert_eq!(keep_count(64, 0.75), 16);
    assert_eq!(keep_count(10, 0.75), 2);
}

#[test]
fn degenerate_ratios_are_config_errors() {
    for (n, r) in [(4, 0.9), (196, 0.0), (196, 1.0), (1, 0.5)] {
        assert!(matches!(random_mask(n, r, &mut rng(1)), Err(Error::Config(_))), "{n} {r}");
    }
}

#[test]
fn masking_frequency_is_the_ratio() {
    let n = 196;
    let draws = 10_000;
    let mut r = rng(7);
    let mut hidden = vec![0usize; n];
    for _ in 0..draws {
        for &i in &random_mask(n, 0.75, &mut r).unwrap().mask_ids {
            hidden[i] += 1;
        }
    }
    for (i, &h) in hidden.iter().enumerate() {
        let f = h as f64 / draws as f64;
        assert!((f - 0.75).abs() <= 0.02, "token {i} hidden {f}");
    }
}

proptest! {
    #[test]
    fn mask_partitions_and_restores(n in 2usize..300, ratio in 0.05f64..0.95, seed in any::<u64>()) {
        let keep = keep_count(n, ratio);
        prop_assume!(keep > 0 && keep < n);
        let plan = random_mask(n, ratio, &mut rng(seed)).unwrap();
        let mut all: Vec<usize> = plan.keep_ids.iter().chain(&plan.mask_ids).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(plan.keep_ids.len(), keep);
        // gather kept then masked, restore, compare with the identity
        let tokens = Tensor::new((0..n).map(|i| i as f64).collect(), &[n, 1]).unwrap();
        let order: Vec<usize> = plan.keep_ids.iter().chain(&plan.mask_ids).copied().collect();
        let shuffled = tokens.index_select(0, &order).unwrap();
        let restored = shuffled.index_select(0, &plan.restore_perm).unwrap();
        prop_assert_eq!(restored.data(), tokens.data());
    }
}

#[test]
fn loss_ignores_visible_predictions() {
    let mut r = rng(11);
    for case in 0..100 {
        let (b, n, l) = (r.gen_range(1..4), r.gen_range(4..40), r.gen_range(1..6));
        let ratio = r.gen_range(0.3..0.9);
        if keep_count(n, ratio) == 0 || keep_count(n, ratio) == n {
            continue;
        }
        let plans: Vec<MaskPlan> = (0..b).map(|_| random_mask(n, ratio, &mut r).unwrap()).collect();
        let pred: Vec<f64> = (0..b * n * l).map(|_| r.gen_range(-2.0..2.0)).collect();
        let target = Tensor::new((0..b * n * l).map(|_| r.gen_range(-2.0..2.0)).collect(), &[b, n, l]).unwrap();
        let mut moved = pred.clone();
        for (i, plan) in plans.iter().enumerate() {
            for &t in &plan.keep_ids {
                for j in 0..l {
                    moved[(i * n + t) * l + j] += r.gen_range(-100.0..100.0);
                }
            }
        }
        for norm in [false, true] {
            let a = reconstruction_loss(&Tensor::new(pred.clone(), &[b, n, l]).unwrap(), &target, &plans, norm).unwrap();
            let c = reconstruction_loss(&Tensor::new(moved.clone(), &[b, n, l]).unwrap(), &target, &plans, norm).unwrap();
            assert_eq!(a.item().to_bits(), c.item().to_bits(), "case {case}");
        }
    }
}

#[test]
fn loss_matches_masked_mse() {
    let mut r = rng(5);
    let (b, n, l) = (2, 16, 3);
    let plans: Vec<MaskPlan> = (0..b).map(|_| random_mask(n, 0.75, &mut r).unwrap()).collect();
    let pred: Vec<f64> = (0..b * n * l).map(|_| r.gen_range(-1.0..1.0)).collect();
    let target: Vec<f64> = (0..b * n * l).map(|_| r.gen_range(-1.0..1.0)).collect();
    let mut sum = 0.0;
    let mut count = 0;
    for (i, plan) in plans.iter().enumerate() {
        for &t in &plan.mask_ids {
            for j in 0..l {
                let k = (i * n + t) * l + j;
                sum += (pred[k] - target[k]).powi(2);
                count += 1;
            }
        }
    }
    with_precision(Precision::F64, || {
        let got = reconstruction_loss(
            &Tensor::new(pred.clone(), &[b, n, l]).unwrap(),
            &Tensor::new(target.clone(), &[b, n, l]).unwrap(),
            &plans,
            false,
        )
        .unwrap();
        assert!((got.item() - sum / count as f64).abs() < 1e-12);
    });
}

// ---- optimizer and schedule ----

/// One scalar weight (rank 2) with a linear loss `c·w`, so that the
/// gradient is exactly `c`.
fn linear_step(opt: &mut AdamW, set: &mut ParamSet, c: f64, lr: f64) {
    let w = set.by_name("w").unwrap().clone();
    let coef = Tensor::new(vec![c; w.numel()], w.shape()).unwrap();
    w.mul(&coef).unwrap().sum_all().backward().unwrap();
    opt.step(&mut [set], lr).unwrap();
}

fn scalar_set(value: f64, shape: &[usize]) -> ParamSet {
    let mut set = ParamSet::default();
    let n: usize = shape.iter().product();
    ParamBuilder::new(&mut set, &mut rng(0)).add("w", vec![value; n], shape).unwrap();
    set
}

#[test]
fn adamw_scalar_oracle() {
    with_precision(Precision::F64, || {
        let mut set = scalar_set(1.0, &[1, 1]);
        let mut opt = AdamW::new(0.05);
        linear_step(&mut opt, &mut set, 0.5, 0.01);
        // decay 1 − 0.01·0.05, then m̂ = 0.5, v̂ = 0.25
        let expect = (1.0 - 0.01 * 0.05) - 0.01 * 0.5 / (0.25f64.sqrt() + 1e-8);
        let got = set.by_name("w").unwrap().item();
        assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
        assert!((got - 0.9895000002).abs() < 1e-10);
        assert_eq!(opt.step_count(), 1);
    });
}

#[test]
fn no_decay_on_vectors() {
    with_precision(Precision::F64, || {
        let mut set = scalar_set(1.0, &[1]);
        let mut opt = AdamW::new(0.05);
        linear_step(&mut opt, &mut set, 0.5, 0.01);
        let expect = 1.0 - 0.01 * 0.5 / (0.5 + 1e-8);
        assert!((set.by_name("w").unwrap().item() - expect).abs() < 1e-12);
    });
}

#[test]
fn zero_lr_keeps_parameters_but_moves_moments() {
    let mut set = scalar_set(0.25, &[2, 2]);
    let before = set.to_bytes();
    let mut opt = AdamW::new(0.05);
    linear_step(&mut opt, &mut set, 0.5, 0.0);
    assert_eq!(set.to_bytes(), before);
    assert!(opt.state()["w"].m.iter().all(|&m| m != 0.0));
}

/// Textbook Adam with bias correction.
struct Adam {
    m: f64,
    v: f64,
    t: i32,
}

impl Adam {
    fn step(&mut self, p: f64, g: f64, lr: f64) -> f64 {
        self.t += 1;
        self.m = 0.9 * self.m + (1.0 - 0.9) * g;
        self.v = 0.999 * self.v + (1.0 - 0.999) * g * g;
        let m_hat = self.m / (1.0 - 0.9f64.powi(self.t));
        let v_hat = self.v / (1.0 - 0.999f64.powi(self.t));
        p - lr * m_hat / (v_hat.sqrt() + 1e-8)
    }
}

#[test]
fn adamw_without_decay_is_adam() {
    with_precision(Precision::F64, || {
        let mut set = scalar_set(0.7, &[1, 1]);
        let mut opt = AdamW::new(0.0);
        let mut adam = Adam { m: 0.0, v: 0.0, t: 0 };
        let mut p = 0.7;
        for i in 0..50 {
            let g = ((i as f64) * 0.37).sin();
            linear_step(&mut opt, &mut set, g, 0.01);
            p = adam.step(p, g, 0.01);
            assert_eq!(set.by_name("w").unwrap().item().to_bits(), p.to_bits(), "step {i}");
        }
    });
}

#[test]
fn equal_parameters_stay_equal() {
    let mut set = scalar_set(0.3, &[3, 3]);
    let mut opt = AdamW::new(0.0);
    for i in 0..10 {
        linear_step(&mut opt, &mut set, 0.1 * i as f64 - 0.4, 1e-2);
    }
    let v = set.by_name("w").unwrap().to_vec();
    assert!(v.iter().all(|&x| x == v[0]));
}

#[test]
fn nan_gradient_names_the_parameter() {
    let mut set = scalar_set(1.0, &[1, 1]);
    let w = set.by_name("w").unwrap().clone();
    w.mul_scalar(f64::NAN).sum_all().backward().unwrap();
    match AdamW::new(0.05).step(&mut [&mut set], 0.1) {
        Err(Error::Training(msg)) => assert!(msg.contains('w'), "{msg}"),
        other => panic!("expected training error, got {other:?}"),
    }
}

#[test]
fn poly_schedule_values() {
    let plan = TrainPlan::default();
    assert_eq!(poly_lr(0, &plan).unwrap(), plan.base_lr);
    assert_eq!(poly_lr(plan.total_iters, &plan).unwrap(), plan.min_lr);
    assert_eq!(poly_lr(1500, &plan).unwrap(), 5e-4);
    assert!(matches!(poly_lr(3001, &plan), Err(Error::Contract(_))));
    let s = PolySchedule {
        base_lr: 1.0,
        min_lr: 0.1,
        power: 2.0,
        total_iters: 10,
    };
    assert!((s.at(5).unwrap() - (0.9 * 0.25 + 0.1)).abs() < 1e-15);
}

proptest! {
    #[test]
    fn schedule_never_increases(power in 0.0f64..4.0, total in 1usize..500, base in 1e-6f64..1.0) {
        let s = PolySchedule { base_lr: base, min_lr: 0.0, power, total_iters: total };
        for i in 0..total {
            prop_assert!(s.at(i + 1).unwrap() <= s.at(i).unwrap());
        }
    }
}

// ---- weighted cross-entropy ----

#[test]
fn uniform_logits_give_ln_k() {
    for k in [2usize, 3, 5] {
        let logits = Tensor::zeros(&[2, k, 3, 3]);
        let labels: Vec<u8> = (0..18).map(|i| (i % k) as u8).collect();
        let loss = weighted_cross_entropy(&logits, &labels, &vec![1.0; k], 255).unwrap();
        assert!((loss.item() - (k as f64).ln()).abs() < 1e-6, "K={k}");
    }
}

fn random_logits(r: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| r.gen_range(-3.0..3.0)).collect(), &shape).unwrap()
}

#[test]
fn weight_scale_cancels() {
    let mut r = rng(2);
    let logits = random_logits(&mut r, [2, 3, 4, 4]);
    let labels: Vec<u8> = (0..32).map(|_| r.gen_range(0..3)).collect();
    let a = weighted_cross_entropy(&logits, &labels, &[0.5, 2.0, 1.0], 255).unwrap().item();
    let b = weighted_cross_entropy(&logits, &labels, &[1.0, 4.0, 2.0], 255).unwrap().item();
    assert!((a - b).abs() < 1e-6);
}

#[test]
fn equal_weights_are_plain_cross_entropy() {
    let mut r = rng(3);
    let (b, k, h, w) = (2, 3, 4, 5);
    let logits = random_logits(&mut r, [b, k, h, w]);
    let labels: Vec<u8> = (0..b * h * w).map(|_| [0, 1, 2, 255][r.gen_range(0..4)]).collect();
    let x = logits.data();
    let (mut sum, mut n) = (0.0, 0);
    for (i, &y) in labels.iter().enumerate() {
        if y == 255 {
            continue;
        }
        let (img, px) = (i / (h * w), i % (h * w));
        let z: Vec<f64> = (0..k).map(|c| x[(img * k + c) * h * w + px]).collect();
        let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
        sum += lse - z[y as usize];
        n += 1;
    }
    let got = weighted_cross_entropy(&logits, &labels, &[3.0, 3.0, 3.0], 255).unwrap().item();
    assert!((got - sum / n as f64).abs() < 1e-6);
    let ones = weighted_cross_entropy(&logits, &labels, &[1.0, 1.0, 1.0], 255).unwrap().item();
    assert_eq!(got.to_bits(), ones.to_bits());
}

#[test]
fn all_ignored_is_zero_with_zero_gradient() {
    let logits = random_logits(&mut rng(4), [1, 2, 2, 2]).with_requires_grad(true);
    let loss = weighted_cross_entropy(&logits, &[255; 4], &[1.0, 5.0], 255).unwrap();
    assert_eq!(loss.item(), 0.0);
    loss.backward().unwrap();
    assert!(logits.grad().unwrap().iter().all(|&g| g == 0.0));
}

#[test]
fn bad_label_reports_its_pixel() {
    let logits = Tensor::zeros(&[1, 2, 3, 3]);
    let mut labels = vec![0u8; 9];
    labels[5] = 7;
    match weighted_cross_entropy(&logits, &labels, &[1.0, 1.0], 255) {
        Err(Error::Data(msg)) => assert!(msg.contains("row 1 col 2"), "{msg}"),
        other => panic!("expected data error, got {other:?}"),
    }
}

#[test]
fn class_weight_formula() {
    let w = compute_class_weights(&[900, 100]).unwrap();
    assert!((w[0] - 1000.0 / 1800.0).abs() < 1e-12 && (w[1] - 5.0).abs() < 1e-12);
    assert_eq!(compute_class_weights(&[50, 50]).unwrap(), vec![1.0, 1.0]);
    assert_eq!(compute_class_weights(&[1_000_000, 1]).unwrap()[1], 10.0);
    assert!(matches!(compute_class_weights(&[0, 0]), Err(Error::Data(_))));
}

// ---- IoU ----

/// Per-pixel set counting for one class.
fn brute_iou(pred: &[u8], truth: &[u8], c: u8) -> Option<(u64, u64)> {
    let mut inter = 0;
    let mut union = 0;
    for (&p, &t) in pred.iter().zip(truth) {
        if t == 255 {
            continue;
        }
        inter += (p == c && t == c) as u64;
        union += (p == c || t == c) as u64;
    }
    (union > 0).then_some((inter, union))
}

#[test]
fn iou_matches_set_counting() {
    let mut r = rng(9);
    let mut pooled = Confusion::new(2);
    let (mut inter, mut union) = (0u64, 0u64);
    for _ in 0..1000 {
        let density = r.gen_range(0.0..1.0);
        let pred: Vec<u8> = (0..256).map(|_| r.gen_bool(density) as u8).collect();
        let truth: Vec<u8> = (0..256)
            .map(|_| if r.gen_bool(0.05) { 255 } else { r.gen_bool(density) as u8 })
            .collect();
        let mut single = Confusion::new(2);
        single.accumulate(&pred, &truth).unwrap();
        pooled.accumulate(&pred, &truth).unwrap();
        match brute_iou(&pred, &truth, 1) {
            Some((i, u)) => {
                let (tp, fp, fn_) = (single.get(1, 1), single.get(0, 1), single.get(1, 0));
                assert_eq!((tp, tp + fp + fn_), (i, u));
                inter += i;
                union += u;
            }
            None => assert_eq!(single.iou(1), None),
        }
    }
    let (tp, fp, fn_) = (pooled.get(1, 1), pooled.get(0, 1), pooled.get(1, 0));
    assert_eq!((tp, tp + fp + fn_), (inter, union));
    assert_eq!(pooled.iou(1), Some(inter as f64 / union as f64));
}

fn mask_pair() -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
    (1usize..200).prop_flat_map(|n| (prop::collection::vec(0u8..2, n), prop::collection::vec(0u8..2, n)))
}

proptest! {
    #[test]
    fn iou_is_symmetric((a, b) in mask_pair()) {
        let mut x = Confusion::new(2);
        x.accumulate(&a, &b).unwrap();
        let mut y = Confusion::new(2);
        y.accumulate(&b, &a).unwrap();
        prop_assert_eq!(x.iou(1), y.iou(1));
    }

    #[test]
    fn correct_foreground_never_hurts((a, b) in mask_pair()) {
        let mut x = Confusion::new(2);
        x.accumulate(&a, &b).unwrap();
        let mut y = x.clone();
        y.accumulate(&[1], &[1]).unwrap();
        prop_assert!(y.iou(1).unwrap() >= x.iou(1).unwrap_or(0.0));
    }

    #[test]
    fn pooled_is_sum_of_parts(pairs in prop::collection::vec(mask_pair(), 1..8)) {
        let mut pooled = Confusion::new(2);
        let mut total = Confusion::new(2);
        for (a, b) in &pairs {
            pooled.accumulate(a, b).unwrap();
            let mut one = Confusion::new(2);
            one.accumulate(a, b).unwrap();
            total.merge(&one);
        }
        prop_assert_eq!(pooled, total);
    }
}

// ---- data ----

#[test]
fn scenes_are_deterministic() {
    for seed in 0..100 {
        let p = SceneParams::for_size(32, seed);
        let a = synth_scene(&p).unwrap();
        let b = synth_scene(&p).unwrap();
        assert_eq!(a, b, "seed {seed}");
        for (&bld, &road) in a.buildings.classes.iter().zip(&a.roads.classes) {
            assert!(bld <= 1 && road <= 1 && !(bld == 1 && road == 1), "seed {seed}");
        }
    }
}

/// Flood-fill labelling with an explicit stack.
fn flood_components(mask: &LabelMask) -> Vec<Vec<usize>> {
    let (rows, cols) = (mask.rows, mask.cols);
    let mut seen = vec![false; rows * cols];
    let mut out = Vec::new();
    for start in 0..rows * cols {
        if seen[start] || mask.classes[start] == 0 || mask.classes[start] == 255 {
            continue;
        }
        let class = mask.classes[start];
        let mut comp = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(p) = stack.pop() {
            comp.push(p);
            let (r, c) = (p / cols, p % cols);
            let mut nb = Vec::new();
            if r > 0 {
                nb.push(p - cols);
            }
            if r + 1 < rows {
                nb.push(p + cols);
            }
            if c > 0 {
                nb.push(p - 1);
            }
            if c + 1 < cols {
                nb.push(p + 1);
            }
            for q in nb {
                if !seen[q] && mask.classes[q] == class {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out.sort();
    out
}

proptest! {
    #[test]
    fn components_match_flood_fill(rows in 1usize..12, cols in 1usize..12, seed in any::<u64>()) {
        let mut r = rng(seed);
        let classes: Vec<u8> = (0..rows * cols).map(|_| r.gen_bool(0.45) as u8).collect();
        let mask = LabelMask::binary(rows, cols, classes, "building").unwrap();
        let mut got = components(&mask);
        got.sort();
        prop_assert_eq!(got, flood_components(&mask));
    }

    #[test]
    fn ascii_grid_round_trip(rows in 1usize..10, cols in 1usize..10, seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut raster = Raster::new(rows, cols, (0..rows * cols).map(|_| r.gen_range(-500.0f32..9000.0)).collect()).unwrap();
        raster.cellsize = 0.5;
        raster.xllcorner = 1234.25;
        raster.nodata = Some(-9999.0);
        raster.values[0] = -9999.0;
        let mut buf = Vec::new();
        write_ascii_grid(&raster, &mut buf).unwrap();
        let back = read_ascii_grid(buf.as_slice()).unwrap();
        prop_assert_eq!(back.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        raster.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!((back.rows, back.cols, back.cellsize, back.xllcorner, back.nodata),
                        (rows, cols, 0.5, 1234.25, Some(-9999.0)));
    }

    #[test]
    fn mask_pgm_round_trip(rows in 1usize..20, cols in 1usize..20, k in 2usize..6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let legend: Vec<String> = (0..k).map(|i| format!("c{i}")).collect();
        let legend: Vec<&str> = legend.iter().map(String::as_str).collect();
        let classes: Vec<u8> = (0..rows * cols).map(|_| r.gen_range(0..k as u8)).collect();
        let mask = LabelMask::new(rows, cols, classes, &legend).unwrap();
        let mut buf = Vec::new();
        write_mask_pgm(&mask, &mut buf).unwrap();
        prop_assert_eq!(read_mask_pgm(buf.as_slice(), &legend).unwrap(), mask);
    }

    #[test]
    fn checkpoint_round_trip(values in prop::collection::vec(any::<f32>(), 1..64), step in any::<u32>()) {
        let mut c = Checkpoint::default();
        c.record.insert("step".into(), step.to_string());
        c.push("a.weight", &[values.len()], values.clone());
        c.push("b", &[1, 1], vec![values[0]]);
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        let got: Vec<u32> = back.get("a.weight").unwrap().values.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(got, values.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn tiles_cover_the_raster(rows in 4usize..40, cols in 4usize..40, t in 1usize..8, s in 1usize..8) {
        prop_assume!(t <= rows && t <= cols);
        let raster = Raster::new(rows, cols, (0..rows * cols).map(|i| i as f32).collect()).unwrap();
        let tiles = tile_raster(&raster, None, t, s).unwrap();
        prop_assert_eq!(tiles.len(), ((rows - t) / s + 1) * ((cols - t) / s + 1));
        let mut hit = vec![false; rows * cols];
        for (tile, _) in &tiles {
            prop_assert_eq!(tile.side, t);
            prop_assert!(tile.elevations.iter().all(|v| (0.0..=1.0).contains(v)));
            let (r0, c0) = tile.origin;
            for r in r0..r0 + t {
                for c in c0..c0 + t {
                    hit[r * cols + c] = true;
                }
            }
        }
        if s <= t && (rows - t) % s == 0 && (cols - t) % s == 0 {
            prop_assert!(hit.iter().all(|&h| h));
        }
    }
}

#[test]
fn truncated_checkpoint_is_format_error() {
    let mut c = Checkpoint::default();
    c.push("w", &[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
    let bytes = c.to_bytes().unwrap();
    for cut in 0..bytes.len() {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
    }
}
