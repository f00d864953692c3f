//! Central finite-difference gradient checking.
//!
//! The check evaluates `f` in 64-bit mode, reduces its output to a scalar
//! with a fixed pseudo-random projection, and compares the analytic
//! gradient of every input element against a four-point central difference
//! of the same scalar. Where the stencil crosses a non-differentiable point
//! the step is reduced until both halves of the stencil agree.

use crate::error::Result;
use crate::precision::{with_precision, Precision};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared in absolute terms, so that
/// exact zeros are not judged against finite-difference round-off.
pub const SCALE_FLOOR: f64 = 1e-6;

/// A second difference that fails to scale quadratically by more than this
/// fraction of the slope means the stencil straddles a kink (ReLU,
/// max-pool). The step is then shrunk tenfold, and the estimate with the
/// smallest such defect is kept.
pub const KINK_RATIO: f64 = 1e-6;

/// Number of step sizes tried per element.
pub const SHRINKS: usize = 6;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, SCALE_FLOOR)`
    /// over all checked elements.
    pub max_rel_error: f64,
    /// `(input, element)` where the maximum occurred.
    pub worst: (usize, usize),
    /// `(analytic, numeric)` at `worst`.
    pub worst_values: (f64, f64),
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Deterministic projection weights in (-1, 1), so that every output
/// element contributes to the scalar with a distinct, non-trivial weight.
fn projection(len: usize) -> Vec<f64> {
    let mut s: u64 = 0x9E37_79B9_7F4A_7C15;
    (0..len)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect()
}

fn scalarize(out: &Tensor, weights: &[f64]) -> f64 {
    out.data().iter().zip(weights).map(|(a, b)| a * b).sum()
}

/// Checks `f` at `inputs` (values only; grad flags are set internally).
/// At most `max_elems` evenly spaced elements per input are perturbed.
pub fn check<F>(f: F, inputs: &[Tensor], step: f64, max_elems: usize) -> Result<GradCheck>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    with_precision(Precision::F64, || {
        let leaves: Vec<Tensor> = inputs
            .iter()
            .map(|t| Tensor::parameter(t.to_vec(), t.shape()))
            .collect::<Result<_>>()?;
        let out = f(&leaves)?;
        let weights = projection(out.numel());
        let w = Tensor::new(weights.clone(), out.shape())?;
        out.mul(&w)?.sum_all().backward()?;

        let mut report = GradCheck {
            max_rel_error: 0.0,
            worst: (0, 0),
            worst_values: (0.0, 0.0),
            checked: 0,
        };
        for (which, leaf) in leaves.iter().enumerate() {
            let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
            let n = leaf.numel();
            let stride = n.div_ceil(max_elems.max(1)).max(1);
            for e in (0..n).step_by(stride) {
                let eval = |delta: f64| -> Result<f64> {
                    let perturbed: Vec<Tensor> = leaves
                        .iter()
                        .enumerate()
                        .map(|(i, t)| {
                            let mut v = t.to_vec();
                            if i == which {
                                v[e] += delta;
                            }
                            Tensor::new(v, t.shape())
                        })
                        .collect::<Result<_>>()?;
                    Ok(scalarize(&f(&perturbed)?, &weights))
                };
                let centre = eval(0.0)?;
                let mut h = step;
                let mut best = (f64::INFINITY, 0.0);
                for _ in 0..SHRINKS {
                    let (p1, m1, p2, m2) = (eval(h)?, eval(-h)?, eval(2.0 * h)?, eval(-2.0 * h)?);
                    let near = (p1 - m1) / (2.0 * h);
                    let far = (p2 - m2) / (4.0 * h);
                    // Curvature grows fourfold with the step on a smooth stretch.
                    let bend = (p2 + m2 - 2.0 * centre) - 4.0 * (p1 + m1 - 2.0 * centre);
                    let size = [centre, p1, m1, p2, m2].iter().fold(0.0f64, |a, v| a.max(v.abs()));
                    let kink = if bend.abs() <= 100.0 * f64::EPSILON * size {
                        0.0
                    } else {
                        bend.abs() / (h * near.abs().max(far.abs()).max(SCALE_FLOOR))
                    };
                    if kink < best.0 {
                        best = (kink, (4.0 * near - far) / 3.0);
                    }
                    if kink <= KINK_RATIO {
                        break;
                    }
                    h /= 10.0;
                }
                let numeric = best.1;
                let rel = (analytic[e] - numeric).abs() / analytic[e].abs().max(numeric.abs()).max(SCALE_FLOOR);
                if rel > report.max_rel_error {
                    report.max_rel_error = rel;
                    report.worst = (which, e);
                    report.worst_values = (analytic[e], numeric);
                }
                report.checked += 1;
            }
        }
        Ok(report)
    })
}
