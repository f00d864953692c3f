use crate::error::{Result, TensorError};
use crate::kernels::strides;
use crate::tensor::Tensor;

/// Gather map for a permutation: `out[i] = in[map[i]]`.
fn permute_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let eff: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let numel: usize = shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0; axes.len()];
    let mut flat = 0;
    for _ in 0..numel {
        map.push(flat);
        for ax in (0..axes.len()).rev() {
            idx[ax] += 1;
            flat += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            flat -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(TensorError::mismatch("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            "reshape",
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|g| vec![Some(g.to_vec())]),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::dim("permute", format!("axes {axes:?} for shape {:?}", self.shape())));
        }
        let map = permute_map(self.shape(), axes);
        let x = self.data();
        let data: Vec<f64> = map.iter().map(|&i| x[i]).collect();
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        Ok(Tensor::from_op(
            "permute",
            data,
            out_shape,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; g.len()];
                for (&i, &v) in map.iter().zip(g) {
                    gx[i] = v;
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor> {
        let mut axes: Vec<usize> = (0..self.rank()).collect();
        if a >= axes.len() || b >= axes.len() {
            return Err(TensorError::dim("transpose", format!("axes {a},{b} for shape {:?}", self.shape())));
        }
        axes.swap(a, b);
        self.permute(&axes)
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::dim("concat", "no tensors"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(TensorError::dim("concat", format!("axis {axis} for rank {rank}")));
        }
        for p in parts {
            let same = p.rank() == rank
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(TensorError::mismatch("concat", first.shape(), p.shape()));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&lens) {
                data.extend_from_slice(&p.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = total;
        let flags: Vec<bool> = parts.iter().map(Tensor::requires_grad).collect();
        Ok(Tensor::from_op(
            "concat",
            data,
            out_shape,
            parts.to_vec(),
            Box::new(move |g| {
                let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(lens.len());
                let mut start = 0;
                for (&len, &needed) in lens.iter().zip(&flags) {
                    grads.push(needed.then(|| {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + start) * inner;
                            gp.extend_from_slice(&g[base..base + len * inner]);
                        }
                        gp
                    }));
                    start += len;
                }
                grads
            }),
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::dim(
                "narrow",
                format!("axis {axis} range {start}..{} for shape {shape:?}", start + len),
            ));
        }
        let idx: Vec<usize> = (start..start + len).collect();
        self.index_select(axis, &idx)
    }

    /// Gathers entries `indices` along `axis` (repeats allowed); the
    /// gradient scatter-adds back.
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() || indices.is_empty() {
            return Err(TensorError::dim("index_select", format!("axis {axis} for shape {shape:?}")));
        }
        let len = shape[axis];
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(TensorError::dim("index_select", format!("index {bad} out of range {len}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                data.extend_from_slice(&x[(o * len + i) * inner..(o * len + i + 1) * inner]);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = indices.len();
        let indices = indices.to_vec();
        Ok(Tensor::from_op(
            "index_select",
            data,
            out_shape,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; outer * len * inner];
                let n = indices.len();
                for o in 0..outer {
                    for (j, &i) in indices.iter().enumerate() {
                        let src = &g[(o * n + j) * inner..(o * n + j + 1) * inner];
                        let dst = &mut gx[(o * len + i) * inner..(o * len + i + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iota(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new((0..n).map(|i| i as f64).collect(), shape).unwrap()
    }

    #[test]
    fn transpose_2d() {
        let x = iota(&[2, 3]);
        let t = x.transpose(0, 1).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn permute_round_trip() {
        let x = iota(&[2, 3, 4]);
        let y = x.permute(&[2, 0, 1]).unwrap().permute(&[1, 2, 0]).unwrap();
        assert_eq!(y.data(), x.data());
        assert!(x.permute(&[0, 0, 1]).is_err());
    }

    #[test]
    fn concat_then_narrow() {
        let a = iota(&[2, 2]);
        let b = iota(&[2, 1]).add_scalar(10.0);
        let c = Tensor::concat(&[a.clone(), b], 1).unwrap();
        assert_eq!(c.data(), &[0.0, 1.0, 10.0, 2.0, 3.0, 11.0]);
        assert_eq!(c.narrow(1, 0, 2).unwrap().data(), a.data());
        assert!(c.narrow(1, 2, 2).is_err());
    }

    #[test]
    fn index_select_repeats_accumulate_grad() {
        let x = Tensor::parameter(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let y = x.index_select(0, &[2, 2, 0]).unwrap();
        assert_eq!(y.data(), &[3.0, 3.0, 1.0]);
        y.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 2.0]);
    }
}
