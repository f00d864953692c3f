use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

impl Tensor {
    pub fn sum_all(&self) -> Tensor {
        let total: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            "sum_all",
            vec![total],
            vec![1],
            vec![self.clone()],
            Box::new(move |g| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel();
        let mean = self.data().iter().sum::<f64>() / n as f64;
        Tensor::from_op(
            "mean_all",
            vec![mean],
            vec![1],
            vec![self.clone()],
            Box::new(move |g| vec![Some(vec![g[0] / n as f64; n])]),
        )
    }

    /// Sums out `axis`; the axis is removed from the shape (a rank-1 input
    /// yields shape `[1]`).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::dim("sum_axis", format!("axis {axis} for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * inner];
        let x = self.data();
        for o in 0..outer {
            for a in 0..len {
                let src = &x[(o * len + a) * inner..(o * len + a + 1) * inner];
                let dst = &mut data[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        let mut out_shape: Vec<usize> = shape.to_vec();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(Tensor::from_op(
            "sum_axis",
            data,
            out_shape,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for a in 0..len {
                        gx[(o * len + a) * inner..(o * len + a + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let len = *self
            .shape()
            .get(axis)
            .ok_or_else(|| TensorError::dim("mean_axis", format!("axis {axis} for shape {:?}", self.shape())))?;
        Ok(self.sum_axis(axis)?.mul_scalar(1.0 / len as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_sums() {
        let x = Tensor::new((1..=6).map(f64::from).collect(), &[2, 3]).unwrap();
        assert_eq!(x.sum_axis(0).unwrap().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(x.sum_axis(1).unwrap().data(), &[6.0, 15.0]);
        assert_eq!(x.mean_axis(1).unwrap().data(), &[2.0, 5.0]);
        assert!(x.sum_axis(2).is_err());
    }
}
