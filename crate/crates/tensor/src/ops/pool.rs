use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

fn dims4(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(TensorError::dim(op, format!("expected rank 4, got {:?}", t.shape()))),
    }
}

/// Sparse linear map from input planes to output planes: each output pixel
/// is a weighted sum of a few input pixels of the same plane.
struct PlaneMap {
    taps: Vec<Vec<(usize, f64)>>,
    in_plane: usize,
}

impl PlaneMap {
    fn apply(&self, x: &[f64], planes: usize) -> Vec<f64> {
        let out_plane = self.taps.len();
        let mut out = vec![0.0; planes * out_plane];
        for p in 0..planes {
            let src = &x[p * self.in_plane..(p + 1) * self.in_plane];
            for (o, taps) in self.taps.iter().enumerate() {
                out[p * out_plane + o] = taps.iter().map(|&(i, w)| src[i] * w).sum();
            }
        }
        out
    }

    fn adjoint(&self, g: &[f64], planes: usize) -> Vec<f64> {
        let out_plane = self.taps.len();
        let mut gx = vec![0.0; planes * self.in_plane];
        for p in 0..planes {
            let dst = &mut gx[p * self.in_plane..(p + 1) * self.in_plane];
            for (o, taps) in self.taps.iter().enumerate() {
                let v = g[p * out_plane + o];
                for &(i, w) in taps {
                    dst[i] += v * w;
                }
            }
        }
        gx
    }
}

fn linear_pool(x: &Tensor, op: &'static str, map: PlaneMap, out_h: usize, out_w: usize) -> Tensor {
    let [n, c, _, _] = dims4(op, x).expect("checked by caller");
    let planes = n * c;
    let data = map.apply(x.data(), planes);
    Tensor::from_op(
        op,
        data,
        vec![n, c, out_h, out_w],
        vec![x.clone()],
        Box::new(move |g| vec![Some(map.adjoint(g, planes))]),
    )
}

/// Source taps of one output coordinate under half-pixel bilinear sampling
/// (sample points outside the input clamp to the border).
fn bilinear_axis(in_len: usize, out_len: usize) -> Vec<[(usize, f64); 2]> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let t = src - i0 as f64;
            [(i0, 1.0 - t), (i1, t)]
        })
        .collect()
}

impl Tensor {
    fn check_window(&self, op: &'static str, window: usize, stride: usize) -> Result<[usize; 4]> {
        let d = dims4(op, self)?;
        if window == 0 || stride == 0 || window > d[2] || window > d[3] {
            return Err(TensorError::dim(
                op,
                format!("window {window} stride {stride} on {}x{}", d[2], d[3]),
            ));
        }
        Ok(d)
    }

    /// Max over `window×window` blocks; ties resolve to the first position
    /// in row-major order.
    pub fn max_pool2d(&self, window: usize, stride: usize) -> Result<Tensor> {
        let [n, c, h, w] = self.check_window("max_pool2d", window, stride)?;
        let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
        let x = self.data();
        let planes = n * c;
        let mut data = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let src = &x[p * h * w..(p + 1) * h * w];
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = (i * stride) * w + j * stride;
                    for a in 0..window {
                        for b in 0..window {
                            let idx = (i * stride + a) * w + j * stride + b;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    data.push(src[best]);
                    argmax.push(p * h * w + best);
                }
            }
        }
        let len = self.numel();
        Ok(Tensor::from_op(
            "max_pool2d",
            data,
            vec![n, c, oh, ow],
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; len];
                for (&i, &v) in argmax.iter().zip(g) {
                    gx[i] += v;
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn avg_pool2d(&self, window: usize, stride: usize) -> Result<Tensor> {
        let [_, _, h, w] = self.check_window("avg_pool2d", window, stride)?;
        let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
        let wt = 1.0 / (window * window) as f64;
        let mut taps = Vec::with_capacity(oh * ow);
        for i in 0..oh {
            for j in 0..ow {
                let mut t = Vec::with_capacity(window * window);
                for a in 0..window {
                    for b in 0..window {
                        t.push(((i * stride + a) * w + j * stride + b, wt));
                    }
                }
                taps.push(t);
            }
        }
        Ok(linear_pool(self, "avg_pool2d", PlaneMap { taps, in_plane: h * w }, oh, ow))
    }

    /// Averages over adaptive bins: output cell `i` covers input rows
    /// `floor(i·H/out) .. ceil((i+1)·H/out)`.
    pub fn adaptive_avg_pool2d(&self, out_h: usize, out_w: usize) -> Result<Tensor> {
        let [_, _, h, w] = dims4("adaptive_avg_pool2d", self)?;
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::dim("adaptive_avg_pool2d", "output extent 0"));
        }
        let bin = |i: usize, inp: usize, out: usize| (i * inp / out, ((i + 1) * inp).div_ceil(out));
        let mut taps = Vec::with_capacity(out_h * out_w);
        for i in 0..out_h {
            let (r0, r1) = bin(i, h, out_h);
            for j in 0..out_w {
                let (c0, c1) = bin(j, w, out_w);
                let wt = 1.0 / ((r1 - r0) * (c1 - c0)) as f64;
                let mut t = Vec::with_capacity((r1 - r0) * (c1 - c0));
                for r in r0..r1 {
                    for c in c0..c1 {
                        t.push((r * w + c, wt));
                    }
                }
                taps.push(t);
            }
        }
        Ok(linear_pool(self, "adaptive_avg_pool2d", PlaneMap { taps, in_plane: h * w }, out_h, out_w))
    }

    /// Bilinear resampling with half-pixel centres (`align_corners = false`).
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Tensor> {
        let [_, _, h, w] = dims4("bilinear_resize", self)?;
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::dim("bilinear_resize", "output extent 0"));
        }
        if (out_h, out_w) == (h, w) {
            return self.reshape(self.shape());
        }
        let rows = bilinear_axis(h, out_h);
        let cols = bilinear_axis(w, out_w);
        let mut taps = Vec::with_capacity(out_h * out_w);
        for r in &rows {
            for c in &cols {
                let mut t: Vec<(usize, f64)> = Vec::with_capacity(4);
                for &(ri, rw) in r {
                    for &(ci, cw) in c {
                        let idx = ri * w + ci;
                        let wt = rw * cw;
                        match t.iter_mut().find(|(i, _)| *i == idx) {
                            Some(e) => e.1 += wt,
                            None => t.push((idx, wt)),
                        }
                    }
                }
                taps.push(t);
            }
        }
        Ok(linear_pool(self, "bilinear_resize", PlaneMap { taps, in_plane: h * w }, out_h, out_w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor {
        Tensor::new((0..h * w).map(|i| i as f64).collect(), &[1, 1, h, w]).unwrap()
    }

    #[test]
    fn max_pool_picks_maxima() {
        let y = ramp(4, 4).max_pool2d(2, 2).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn avg_pool_block_means() {
        let y = ramp(4, 4).avg_pool2d(2, 2).unwrap();
        assert_eq!(y.data(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn adaptive_pool_quadrants() {
        let x = ramp(4, 4);
        let y = x.adaptive_avg_pool2d(2, 2).unwrap();
        assert_eq!(y.data(), x.avg_pool2d(2, 2).unwrap().data());
        let g = x.adaptive_avg_pool2d(1, 1).unwrap();
        assert_eq!(g.data(), &[7.5]);
    }

    #[test]
    fn adaptive_pool_overlapping_bins() {
        // 4 -> 3 bins: rows [0,2), [1,3), [2,4)
        let x = Tensor::new(vec![0.0, 1.0, 2.0, 3.0], &[1, 1, 1, 4]).unwrap();
        let y = x.adaptive_avg_pool2d(1, 3).unwrap();
        assert_eq!(y.data(), &[0.5, 1.5, 2.5]);
    }

    #[test]
    fn resize_identity_and_constant() {
        let x = ramp(3, 5);
        assert_eq!(x.bilinear_resize(3, 5).unwrap().data(), x.data());
        let c = Tensor::full(&[1, 2, 3, 3], 2.5).bilinear_resize(12, 12).unwrap();
        assert!(c.data().iter().all(|&v| (v - 2.5).abs() < 1e-6));
    }

    #[test]
    fn resize_upsample_half_pixel() {
        // [0, 1] -> 4 samples at src positions -0.25(clamped 0), 0.25, 0.75, 1.25(clamped)
        let x = Tensor::new(vec![0.0, 1.0], &[1, 1, 1, 2]).unwrap();
        let y = x.bilinear_resize(1, 4).unwrap();
        assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn oversized_window_is_error() {
        assert!(ramp(2, 2).max_pool2d(3, 1).is_err());
        assert!(ramp(2, 2).avg_pool2d(2, 0).is_err());
    }
}
