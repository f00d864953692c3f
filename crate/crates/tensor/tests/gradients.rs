//! Analytic gradients against central finite differences, 64-bit mode,
//! ten random instances per op.

use demmae_tensor::gradsuite::{op_cases, run_case, INSTANCES, TOL};

fn assert_case(name: &str) {
    let cases = op_cases();
    let case = cases.iter().find(|c| c.name == name).expect("known case");
    for seed in 0..INSTANCES {
        let report = run_case(case, seed).unwrap();
        assert!(report.passes(TOL), "{name} seed {seed}: {report:?}");
    }
}

#[test]
fn every_case_has_a_test() {
    let covered = [
        "add", "sub", "mul", "div", "exp", "tanh", "gelu", "relu", "square", "affine", "ln", "sqrt", "sum_all",
        "mean_all", "sum_axis", "mean_axis", "matmul", "matmul_flattened", "bmm", "linear", "reshape", "permute",
        "transpose", "narrow", "index_select", "concat", "softmax_last", "softmax_middle", "layer_norm", "conv2d",
        "conv2d_strided", "conv_transpose2d", "conv_transpose2d_padded", "max_pool2d", "avg_pool2d",
        "adaptive_avg_pool2d", "bilinear_up", "bilinear_down",
    ];
    let names: Vec<&str> = op_cases().iter().map(|c| c.name).collect();
    assert_eq!(names, covered);
}

#[test]
fn elementwise_binary() {
    for name in ["add", "sub", "mul", "div"] {
        assert_case(name);
    }
}

#[test]
fn elementwise_unary() {
    for name in ["exp", "tanh", "gelu", "relu", "square", "affine", "ln", "sqrt"] {
        assert_case(name);
    }
}

#[test]
fn reductions() {
    for name in ["sum_all", "mean_all", "sum_axis", "mean_axis"] {
        assert_case(name);
    }
}

#[test]
fn matmul_variants() {
    for name in ["matmul", "matmul_flattened", "bmm", "linear"] {
        assert_case(name);
    }
}

#[test]
fn shape_ops() {
    for name in ["reshape", "permute", "transpose", "narrow", "index_select", "concat"] {
        assert_case(name);
    }
}

#[test]
fn normalization_and_softmax() {
    for name in ["softmax_last", "softmax_middle", "layer_norm"] {
        assert_case(name);
    }
}

#[test]
fn convolutions() {
    for name in ["conv2d", "conv2d_strided", "conv_transpose2d", "conv_transpose2d_padded"] {
        assert_case(name);
    }
}

#[test]
fn pooling_and_resampling() {
    for name in ["max_pool2d", "avg_pool2d", "adaptive_avg_pool2d", "bilinear_up", "bilinear_down"] {
        assert_case(name);
    }
}
