use crate::error::{Result, TensorError};
use crate::kernels::gemm;
use crate::precision::precision;
use crate::tensor::Tensor;

impl Tensor {
    /// Matrix product.
    ///
    /// * `[.., m, k] · [k, n]`: leading axes of the left operand are treated
    ///   as extra rows.
    /// * `[b, m, k] · [b, k, n]`: batched product.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (ls, rs) = (self.shape(), rhs.shape());
        if ls.len() < 2 || rs.len() < 2 {
            return Err(TensorError::mismatch("matmul", ls, rs));
        }
        if rs.len() == 2 {
            let k = ls[ls.len() - 1];
            if k != rs[0] {
                return Err(TensorError::mismatch("matmul", ls, rs));
            }
            let m: usize = ls[..ls.len() - 1].iter().product();
            let mut out_shape = ls.to_vec();
            *out_shape.last_mut().unwrap() = rs[1];
            return Ok(batched(self, rhs, 1, m, k, rs[1], false, out_shape));
        }
        if ls.len() == 3 && rs.len() == 3 && ls[0] == rs[0] && ls[2] == rs[1] {
            let out_shape = vec![ls[0], ls[1], rs[2]];
            return Ok(batched(self, rhs, ls[0], ls[1], ls[2], rs[2], true, out_shape));
        }
        Err(TensorError::mismatch("matmul", ls, rs))
    }

    /// `x · w + b` over the last axis, `w` being `[in, out]`.
    pub fn linear(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let y = self.matmul(weight)?;
        match bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn batched(
    a: &Tensor,
    b: &Tensor,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_batched: bool,
    out_shape: Vec<usize>,
) -> Tensor {
    let prec = precision();
    let mut out = vec![0.0; batch * m * n];
    let b_stride = if b_batched { k * n } else { 0 };
    for i in 0..batch {
        gemm(
            prec,
            m,
            k,
            n,
            &a.data()[i * m * k..(i + 1) * m * k],
            false,
            &b.data()[i * b_stride..i * b_stride + k * n],
            false,
            &mut out[i * m * n..(i + 1) * m * n],
            false,
        );
    }
    let (ta, tb) = (a.clone(), b.clone());
    Tensor::from_op(
        "matmul",
        out,
        out_shape,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let prec = precision();
            let ga = ta.requires_grad().then(|| {
                // dA = dC · Bᵀ
                let mut ga = vec![0.0; batch * m * k];
                for i in 0..batch {
                    gemm(
                        prec,
                        m,
                        n,
                        k,
                        &g[i * m * n..(i + 1) * m * n],
                        false,
                        &tb.data()[i * b_stride..i * b_stride + k * n],
                        true,
                        &mut ga[i * m * k..(i + 1) * m * k],
                        false,
                    );
                }
                ga
            });
            let gb = tb.requires_grad().then(|| {
                // dB = Aᵀ · dC, summed over the batch when B is shared
                let mut gb = vec![0.0; if b_batched { batch * k * n } else { k * n }];
                for i in 0..batch {
                    let off = i * b_stride;
                    gemm(
                        prec,
                        k,
                        m,
                        n,
                        &ta.data()[i * m * k..(i + 1) * m * k],
                        true,
                        &g[i * m * n..(i + 1) * m * n],
                        false,
                        &mut gb[off..off + k * n],
                        !b_batched && i > 0,
                    );
                }
                gb
            });
            vec![ga, gb]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::new(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn identity_product() {
        let i2 = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let b = t(&[5.0, 6.0, 7.0, 8.0], &[2, 2]);
        assert_eq!(i2.matmul(&b).unwrap().data(), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn two_by_two_product() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t(&[5.0, 6.0, 7.0, 8.0], &[2, 2]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn zeros_product() {
        let z = Tensor::zeros(&[2, 3]);
        let b = t(&(0..12).map(f64::from).collect::<Vec<_>>(), &[3, 4]);
        let c = z.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 4]);
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 5]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn shared_rhs_gradient_sums_over_batch() {
        let a = Tensor::parameter(vec![1.0, 2.0, 3.0, 4.0], &[2, 1, 2]).unwrap();
        let w = Tensor::parameter(vec![1.0, 1.0], &[2, 1]).unwrap();
        a.matmul(&w).unwrap().sum_all().backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![4.0, 6.0]);
        assert_eq!(a.grad().unwrap(), vec![1.0; 4]);
    }
}
