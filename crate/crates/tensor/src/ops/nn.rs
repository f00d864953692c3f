use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

const GELU_COEFF: f64 = 0.044715;
// sqrt(2 / pi)
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

impl Tensor {
    /// Max-shifted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::dim("softmax", format!("axis {axis} for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let max = (0..len).map(|a| x[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for a in 0..len {
                    let e = (x[at(a)] - max).exp();
                    y[at(a)] = e;
                    sum += e;
                }
                for a in 0..len {
                    y[at(a)] /= sum;
                }
            }
        }
        let out = y.clone();
        Ok(Tensor::from_op(
            "softmax",
            y,
            shape.to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let dot: f64 = (0..len).map(|a| g[at(a)] * out[at(a)]).sum();
                        for a in 0..len {
                            gx[at(a)] = out[at(a)] * (g[at(a)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Normalizes each vector along the last axis to zero mean and unit
    /// variance (biased estimator, `eps` added to the variance), then
    /// applies `gamma`/`beta`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self.shape().last().unwrap();
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(TensorError::mismatch("layer_norm", self.shape(), gamma.shape()));
        }
        if eps <= 0.0 {
            return Err(TensorError::Contract(format!("layer_norm eps must be positive, got {eps}")));
        }
        let rows = self.numel() / d;
        let x = self.data();
        let (gm, bt) = (gamma.data(), beta.data());
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        let mut y = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                y[r * d + j] = h * gm[j] + bt[j];
            }
        }
        let (g_t, b_t) = (gamma.clone(), beta.clone());
        let x_req = self.requires_grad();
        Ok(Tensor::from_op(
            "layer_norm",
            y,
            self.shape().to_vec(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g| {
                let gm = g_t.data();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dx = x_req.then(|| vec![0.0; rows * d]);
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        let dh = gr[j] * gm[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                    }
                    if let Some(dx) = dx.as_mut() {
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gm[j];
                            dx[r * d + j] = rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
                vec![dx, g_t.requires_grad().then_some(dgamma), b_t.requires_grad().then_some(dbeta)]
            }),
        ))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&self) -> Tensor {
        self.unary_gelu()
    }

    fn unary_gelu(&self) -> Tensor {
        let x = self.clone();
        let data: Vec<f64> = self.data().iter().map(|&v| gelu(v)).collect();
        Tensor::from_op(
            "gelu",
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                vec![Some(g.iter().zip(x.data()).map(|(g, &v)| g * gelu_grad(v)).collect())]
            }),
        )
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform() {
        let y = Tensor::zeros(&[3]).softmax(0).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_large_logits_stay_finite() {
        let y = Tensor::new(vec![1000.0, 0.0], &[2]).unwrap().softmax(0).unwrap();
        assert!(y.data().iter().all(|v| v.is_finite()));
        assert!((y.data()[0] - 1.0).abs() < 1e-7);
        assert!(y.data()[1] < 1e-7);
    }

    #[test]
    fn softmax_one_two_three() {
        // Oracle: exp(k) / (e + e^2 + e^3) evaluated directly.
        let z: f64 = (1..=3).map(|k| (k as f64).exp()).sum();
        let want: Vec<f64> = (1..=3).map(|k| (k as f64).exp() / z).collect();
        let y = Tensor::new(vec![1.0, 2.0, 3.0], &[3]).unwrap().softmax(0).unwrap();
        for (a, b) in y.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!((want[0] - 0.0900).abs() < 5e-5);
        assert!((want[1] - 0.2447).abs() < 5e-5);
        assert!((want[2] - 0.6652).abs() < 5e-5);
    }

    #[test]
    fn layer_norm_constant_vector_is_zero() {
        let x = Tensor::full(&[2, 4], 3.5);
        let y = x.layer_norm(&Tensor::ones(&[4]), &Tensor::zeros(&[4]), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_two_values() {
        let x = Tensor::new(vec![1.0, 3.0], &[1, 2]).unwrap();
        let y = x.layer_norm(&Tensor::ones(&[2]), &Tensor::zeros(&[2]), 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-6);
        assert!((y.data()[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_rejects_bad_width() {
        let x = Tensor::zeros(&[2, 4]);
        assert!(x.layer_norm(&Tensor::ones(&[3]), &Tensor::zeros(&[3]), 1e-5).is_err());
        assert!(x.layer_norm(&Tensor::ones(&[4]), &Tensor::zeros(&[4]), 0.0).is_err());
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        // 0.5 * (1 + tanh(sqrt(2/pi) * 1.044715))
        let want = 0.5 * (1.0 + (SQRT_2_OVER_PI * 1.044715f64).tanh());
        assert!((gelu(1.0) - want).abs() < 1e-15);
        assert!((gelu(1.0) - 0.841192).abs() < 1e-5);
    }
}
