//! Finite-difference cases for every differentiable op, shared by the
//! crate tests and the workspace acceptance run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gradcheck::{check, GradCheck};
use crate::{ConvParams, Result, Tensor};

/// Relative error allowed by the suite.
pub const TOL: f64 = 1e-4;
pub const STEP: f64 = 1e-4;
/// Random instances per case.
pub const INSTANCES: u64 = 10;
/// Elements perturbed per input.
pub const MAX_ELEMS: usize = 64;

pub struct Case {
    pub name: &'static str,
    pub make: fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    pub f: fn(&[Tensor]) -> Result<Tensor>,
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.gen_range(lo..hi)).collect(), shape).expect("shape matches data")
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, -1.0, 1.0)
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, 0.5, 2.0)
}

fn broadcast_pair(r: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![random(r, &[3, 4]), random(r, &[4])]
}

fn one_2x5(r: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![random(r, &[2, 5])]
}

fn one_2x3x4(r: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![random(r, &[2, 3, 4])]
}

fn image(r: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![random(r, &[2, 2, 6, 6])]
}

pub fn op_cases() -> Vec<Case> {
    macro_rules! case {
        ($name:expr, $make:expr, $f:expr) => {
            Case {
                name: $name,
                make: $make,
                f: $f,
            }
        };
    }
    vec![
        case!("add", broadcast_pair, |t| t[0].add(&t[1])),
        case!("sub", broadcast_pair, |t| t[0].sub(&t[1])),
        case!("mul", broadcast_pair, |t| t[0].mul(&t[1])),
        case!("div", |r| vec![random(r, &[2, 3]), positive(r, &[2, 1])], |t| t[0].div(&t[1])),
        case!("exp", one_2x5, |t| Ok(t[0].exp())),
        case!("tanh", one_2x5, |t| Ok(t[0].tanh())),
        case!("gelu", one_2x5, |t| Ok(t[0].gelu())),
        case!("relu", one_2x5, |t| Ok(t[0].relu())),
        case!("square", one_2x5, |t| Ok(t[0].square())),
        case!("affine", one_2x5, |t| Ok(t[0].mul_scalar(-1.5).add_scalar(0.25))),
        case!("ln", |r| vec![positive(r, &[6])], |t| Ok(t[0].ln())),
        case!("sqrt", |r| vec![positive(r, &[6])], |t| Ok(t[0].sqrt())),
        case!("sum_all", one_2x3x4, |t| Ok(t[0].sum_all())),
        case!("mean_all", one_2x3x4, |t| Ok(t[0].mean_all())),
        case!("sum_axis", one_2x3x4, |t| t[0].sum_axis(1)),
        case!("mean_axis", one_2x3x4, |t| t[0].mean_axis(2)),
        case!("matmul", |r| vec![random(r, &[3, 4]), random(r, &[4, 5])], |t| t[0].matmul(&t[1])),
        case!(
            "matmul_flattened",
            |r| vec![random(r, &[2, 3, 4]), random(r, &[4, 2])],
            |t| t[0].matmul(&t[1])
        ),
        case!("bmm", |r| vec![random(r, &[2, 3, 4]), random(r, &[2, 4, 3])], |t| t[0].matmul(&t[1])),
        case!(
            "linear",
            |r| vec![random(r, &[3, 4]), random(r, &[4, 2]), random(r, &[2])],
            |t| t[0].linear(&t[1], Some(&t[2]))
        ),
        case!("reshape", one_2x3x4, |t| t[0].reshape(&[6, 4])),
        case!("permute", one_2x3x4, |t| t[0].permute(&[2, 0, 1])),
        case!("transpose", one_2x3x4, |t| t[0].transpose(0, 2)),
        case!("narrow", one_2x3x4, |t| t[0].narrow(1, 1, 2)),
        case!("index_select", one_2x3x4, |t| t[0].index_select(2, &[3, 0, 0, 2])),
        case!(
            "concat",
            |r| vec![random(r, &[2, 1, 3]), random(r, &[2, 2, 3])],
            |t| Tensor::concat(&[t[0].clone(), t[1].clone()], 1)
        ),
        case!("softmax_last", |r| vec![random(r, &[3, 5])], |t| t[0].softmax(1)),
        case!("softmax_middle", |r| vec![random(r, &[2, 4, 3])], |t| t[0].softmax(1)),
        case!(
            "layer_norm",
            |r| vec![random(r, &[3, 6]), random(r, &[6]), random(r, &[6])],
            |t| t[0].layer_norm(&t[1], &t[2], 1e-5)
        ),
        case!(
            "conv2d",
            |r| vec![random(r, &[2, 2, 5, 5]), random(r, &[3, 2, 3, 3]), random(r, &[3])],
            |t| t[0].conv2d(&t[1], Some(&t[2]), ConvParams::new(1, 1))
        ),
        case!(
            "conv2d_strided",
            |r| vec![random(r, &[1, 2, 6, 5]), random(r, &[2, 2, 3, 2])],
            |t| t[0].conv2d(&t[1], None, ConvParams::new(2, 1))
        ),
        case!(
            "conv_transpose2d",
            |r| vec![random(r, &[2, 3, 3, 3]), random(r, &[3, 2, 2, 2]), random(r, &[2])],
            |t| t[0].conv_transpose2d(&t[1], Some(&t[2]), ConvParams::new(2, 0))
        ),
        case!(
            "conv_transpose2d_padded",
            |r| vec![random(r, &[1, 2, 4, 3]), random(r, &[2, 2, 3, 3])],
            |t| t[0].conv_transpose2d(&t[1], None, ConvParams::new(2, 1))
        ),
        case!("max_pool2d", image, |t| t[0].max_pool2d(2, 2)),
        case!("avg_pool2d", image, |t| t[0].avg_pool2d(3, 1)),
        case!("adaptive_avg_pool2d", image, |t| t[0].adaptive_avg_pool2d(4, 4)),
        case!("bilinear_up", image, |t| t[0].bilinear_resize(11, 9)),
        case!("bilinear_down", image, |t| t[0].bilinear_resize(4, 3)),
    ]
}

/// Checks `case` on instance `seed`.
pub fn run_case(case: &Case, seed: u64) -> Result<GradCheck> {
    let inputs = (case.make)(&mut ChaCha8Rng::seed_from_u64(seed));
    check(case.f, &inputs, STEP, MAX_ELEMS)
}
