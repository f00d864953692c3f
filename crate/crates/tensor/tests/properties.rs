use demmae_tensor::{ConvParams, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), shape).unwrap()
}

proptest! {
    #[test]
    fn matmul_is_associative(seed in any::<u64>(), m in 1usize..6, k in 1usize..6, l in 1usize..6, n in 1usize..6) {
        let a = random(seed, &[m, k]);
        let b = random(seed ^ 1, &[k, l]);
        let c = random(seed ^ 2, &[l, n]);
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        for (x, y) in left.data().iter().zip(right.data()) {
            prop_assert!((x - y).abs() <= 1e-4 * (1.0 + x.abs().max(y.abs())));
        }
    }

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..9, scale in 0.1f64..10.0) {
        let x = random(seed, &[rows, cols]).mul_scalar(scale);
        let y = x.softmax(1).unwrap();
        for r in 0..rows {
            let row = &y.data()[r * cols..(r + 1) * cols];
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| v > 0.0 && v < 1.0 || cols == 1));
        }
    }

    #[test]
    fn layer_norm_standardizes(seed in any::<u64>(), d in 4usize..32) {
        let x = random(seed, &[3, d]).mul_scalar(7.0).add_scalar(3.0);
        demmae_tensor::with_precision(demmae_tensor::Precision::F64, || {
            let x = Tensor::new(x.to_vec(), x.shape()).unwrap();
            let y = x.layer_norm(&Tensor::ones(&[d]), &Tensor::zeros(&[d]), 1e-12).unwrap();
            for r in 0..3 {
                let row = &y.data()[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                assert!(mean.abs() < 1e-5);
                assert!((var - 1.0).abs() < 1e-5);
            }
        });
    }
}

fn conv_net_grads(x: &Tensor, w1: &Tensor, w2: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (w1, w2) = (w1.with_requires_grad(true), w2.with_requires_grad(true));
    let h = x.conv2d(&w1, None, ConvParams::new(1, 1)).unwrap().gelu();
    let y = h.max_pool2d(2, 2).unwrap().conv_transpose2d(&w2, None, ConvParams::new(2, 0)).unwrap();
    let loss = y.softmax(1).unwrap().square().mean_all();
    loss.backward().unwrap();
    (w1.grad().unwrap(), w2.grad().unwrap())
}

#[test]
fn repeated_backward_is_bit_identical() {
    let x = random(1, &[4, 2, 8, 8]);
    let w1 = random(2, &[3, 2, 3, 3]);
    let w2 = random(3, &[3, 2, 2, 2]);
    let first = conv_net_grads(&x, &w1, &w2);
    let second = conv_net_grads(&x, &w1, &w2);
    assert_eq!(first, second);
}

#[test]
fn thread_count_does_not_change_results() {
    let x = random(4, &[6, 2, 8, 8]);
    let w1 = random(5, &[3, 2, 3, 3]);
    let w2 = random(6, &[3, 2, 2, 2]);
    let single = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| conv_net_grads(&x, &w1, &w2));
    let multi = rayon::ThreadPoolBuilder::new()
        .num_threads(3)
        .build()
        .unwrap()
        .install(|| conv_net_grads(&x, &w1, &w2));
    assert_eq!(single, multi);
}
