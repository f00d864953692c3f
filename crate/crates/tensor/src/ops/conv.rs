use rayon::prelude::*;

use crate::error::{Result, TensorError};
use crate::kernels::{col2im, convert_into, gemm_t, im2col, Scalar, Window};
use crate::precision::{precision, Precision};
use crate::tensor::Tensor;

/// Stride and symmetric zero padding of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub pad: usize,
}

impl ConvParams {
    pub const fn new(stride: usize, pad: usize) -> Self {
        ConvParams { stride, pad }
    }
}

impl Default for ConvParams {
    fn default() -> Self {
        ConvParams { stride: 1, pad: 0 }
    }
}

fn dims4(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(TensorError::dim(op, format!("expected rank 4, got {:?}", t.shape()))),
    }
}

fn check_bias(op: &'static str, bias: Option<&Tensor>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.shape() != [channels] => Err(TensorError::mismatch(op, b.shape(), &[channels])),
        _ => Ok(()),
    }
}

fn bias_grad(g: &[f64], n: usize, channels: usize, plane: usize) -> Vec<f64> {
    let mut db = vec![0.0; channels];
    for i in 0..n {
        for (c, d) in db.iter_mut().enumerate() {
            let off = (i * channels + c) * plane;
            *d += g[off..off + plane].iter().sum::<f64>();
        }
    }
    db
}

fn add_bias(out: &mut [f64], bias: Option<&[f64]>, plane: usize) {
    if let Some(b) = bias {
        for (ch, b) in b.iter().enumerate() {
            out[ch * plane..(ch + 1) * plane].iter_mut().for_each(|v| *v += b);
        }
    }
}

fn store<T: Scalar>(dst: &mut [f64], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = s.to_f64());
}

fn to_scalar<T: Scalar>(src: &[f64]) -> Vec<T> {
    let mut v = Vec::new();
    convert_into(src, &mut v);
    v
}

/// Sums per-image partials in image order.
fn sum_partials<T: Scalar>(parts: Vec<Vec<T>>, len: usize) -> Vec<f64> {
    let mut total = vec![T::default(); len];
    for p in parts {
        total.iter_mut().zip(&p).for_each(|(t, &v)| *t += v);
    }
    total.iter().map(|v| v.to_f64()).collect()
}

/// `[N×C×H×W] ⋆ [K×C×kh×kw]`; `g` describes one input image.
struct Conv {
    n: usize,
    k: usize,
    g: Window,
}

impl Conv {
    fn in_len(&self) -> usize {
        self.g.channels * self.g.height * self.g.width
    }

    fn out_len(&self) -> usize {
        self.k * self.g.cols()
    }

    fn forward<T: Scalar>(&self, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
        let (rows, plane) = (self.g.rows(), self.g.cols());
        let w: Vec<T> = to_scalar(w);
        let mut data = vec![0.0; self.n * self.out_len()];
        data.par_chunks_mut(self.out_len()).enumerate().for_each_init(
            || (vec![T::default(); rows * plane], vec![T::default(); self.out_len()]),
            |(cols, out), (i, dst)| {
                im2col(&x[i * self.in_len()..(i + 1) * self.in_len()], &self.g, cols);
                gemm_t(self.k, rows, plane, &w, false, cols, false, out, false);
                store(dst, out);
                add_bias(dst, bias, plane);
            },
        );
        data
    }

    fn grad_input<T: Scalar>(&self, go: &[T], w: &[f64]) -> Vec<f64> {
        let (rows, plane) = (self.g.rows(), self.g.cols());
        let w: Vec<T> = to_scalar(w);
        let mut dx = vec![0.0; self.n * self.in_len()];
        dx.par_chunks_mut(self.in_len()).enumerate().for_each_init(
            || (vec![T::default(); rows * plane], vec![T::default(); self.in_len()]),
            |(dcols, acc), (i, dst)| {
                let go = &go[i * self.out_len()..(i + 1) * self.out_len()];
                gemm_t(rows, self.k, plane, &w, true, go, false, dcols, false);
                acc.fill(T::default());
                col2im(dcols, &self.g, acc);
                store(dst, acc);
            },
        );
        dx
    }

    fn grad_weight<T: Scalar>(&self, go: &[T], x: &[f64]) -> Vec<f64> {
        let (rows, plane) = (self.g.rows(), self.g.cols());
        let parts: Vec<Vec<T>> = (0..self.n)
            .into_par_iter()
            .map_init(
                || vec![T::default(); rows * plane],
                |cols, i| {
                    im2col(&x[i * self.in_len()..(i + 1) * self.in_len()], &self.g, cols);
                    let go = &go[i * self.out_len()..(i + 1) * self.out_len()];
                    let mut dw = vec![T::default(); self.k * rows];
                    gemm_t(self.k, plane, rows, go, false, cols, true, &mut dw, false);
                    dw
                },
            )
            .collect();
        sum_partials(parts, self.k * rows)
    }

    fn backward<T: Scalar>(&self, grad: &[f64], x: &Tensor, w: &Tensor) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        let go: Vec<T> = to_scalar(grad);
        let dx = x.requires_grad().then(|| self.grad_input(&go, w.data()));
        let dw = w.requires_grad().then(|| self.grad_weight(&go, x.data()));
        (dx, dw)
    }
}

/// `[N×Cin×H×W]` through `[Cin×Cout×kh×kw]`; `g` describes one output
/// image, so that the forward pass is the adjoint of [`Conv`].
struct ConvT {
    n: usize,
    cin: usize,
    g: Window,
}

impl ConvT {
    fn in_len(&self) -> usize {
        self.cin * self.g.cols()
    }

    fn out_len(&self) -> usize {
        self.g.channels * self.g.height * self.g.width
    }

    fn forward<T: Scalar>(&self, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
        let (rows, plane_in) = (self.g.rows(), self.g.cols());
        let plane_out = self.g.height * self.g.width;
        let w: Vec<T> = to_scalar(w);
        let mut data = vec![0.0; self.n * self.out_len()];
        data.par_chunks_mut(self.out_len()).enumerate().for_each_init(
            || (Vec::new(), vec![T::default(); rows * plane_in], vec![T::default(); self.out_len()]),
            |(xi, cols, out), (i, dst)| {
                convert_into(&x[i * self.in_len()..(i + 1) * self.in_len()], xi);
                gemm_t(rows, self.cin, plane_in, &w, true, xi, false, cols, false);
                out.fill(T::default());
                col2im(cols, &self.g, out);
                store(dst, out);
                add_bias(dst, bias, plane_out);
            },
        );
        data
    }

    fn backward<T: Scalar>(&self, grad: &[f64], x: &Tensor, w: &Tensor) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        let (rows, plane_in) = (self.g.rows(), self.g.cols());
        let (need_x, need_w) = (x.requires_grad(), w.requires_grad());
        let wd: Vec<T> = if need_x { to_scalar(w.data()) } else { Vec::new() };
        let xd = x.data();
        let parts: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..self.n)
            .into_par_iter()
            .map_init(
                || (vec![T::default(); rows * plane_in], Vec::new()),
                |(dcols, xi), i| {
                    im2col(&grad[i * self.out_len()..(i + 1) * self.out_len()], &self.g, dcols);
                    let dx = need_x.then(|| {
                        let mut dx = vec![T::default(); self.in_len()];
                        gemm_t(self.cin, rows, plane_in, &wd, false, dcols, false, &mut dx, false);
                        dx
                    });
                    let dw = need_w.then(|| {
                        convert_into(&xd[i * self.in_len()..(i + 1) * self.in_len()], xi);
                        let mut dw = vec![T::default(); self.cin * rows];
                        gemm_t(self.cin, plane_in, rows, xi, false, dcols, true, &mut dw, false);
                        dw
                    });
                    (dx, dw)
                },
            )
            .collect();
        let (dxs, dws): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
        let dx = need_x.then(|| dxs.into_iter().flatten().flatten().map(|v| v.to_f64()).collect());
        let dw = need_w.then(|| sum_partials(dws.into_iter().flatten().collect(), self.cin * rows));
        (dx, dw)
    }
}

impl Tensor {
    /// Cross-correlation of `[N×C×H×W]` input with `[K×C×kh×kw]` weights.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, p: ConvParams) -> Result<Tensor> {
        let [n, c, h, w] = dims4("conv2d", self)?;
        let [k, wc, kh, kw] = dims4("conv2d", weight)?;
        if wc != c {
            return Err(TensorError::mismatch("conv2d", self.shape(), weight.shape()));
        }
        check_bias("conv2d", bias, k)?;
        if p.stride == 0 || h + 2 * p.pad < kh || w + 2 * p.pad < kw {
            return Err(TensorError::dim(
                "conv2d",
                format!("window {kh}x{kw} stride {} pad {} on {h}x{w}", p.stride, p.pad),
            ));
        }
        let g = Window {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride: p.stride,
            pad: p.pad,
            out_h: (h + 2 * p.pad - kh) / p.stride + 1,
            out_w: (w + 2 * p.pad - kw) / p.stride + 1,
        };
        let conv = Conv { n, k, g };
        let bd = bias.map(|b| b.data());
        let data = match precision() {
            Precision::F32 => conv.forward::<f32>(self.data(), weight.data(), bd),
            Precision::F64 => conv.forward::<f64>(self.data(), weight.data(), bd),
        };

        let (xt, wt) = (self.clone(), weight.clone());
        let has_bias = bias.is_some();
        let mut inputs = vec![self.clone(), weight.clone()];
        inputs.extend(bias.cloned());
        Ok(Tensor::from_op(
            "conv2d",
            data,
            vec![n, k, g.out_h, g.out_w],
            inputs,
            Box::new(move |grad| {
                let (dx, dw) = match precision() {
                    Precision::F32 => conv.backward::<f32>(grad, &xt, &wt),
                    Precision::F64 => conv.backward::<f64>(grad, &xt, &wt),
                };
                let mut out = vec![dx, dw];
                if has_bias {
                    out.push(Some(bias_grad(grad, n, k, g.cols())));
                }
                out
            }),
        ))
    }

    /// Transposed convolution (gradient of `conv2d` w.r.t. its input) with
    /// `[Cin×Cout×kh×kw]` weights. Output extent is `(H−1)·stride − 2·pad + kh`.
    pub fn conv_transpose2d(&self, weight: &Tensor, bias: Option<&Tensor>, p: ConvParams) -> Result<Tensor> {
        let [n, cin, h, w] = dims4("conv_transpose2d", self)?;
        let [wc, cout, kh, kw] = dims4("conv_transpose2d", weight)?;
        if wc != cin {
            return Err(TensorError::mismatch("conv_transpose2d", self.shape(), weight.shape()));
        }
        check_bias("conv_transpose2d", bias, cout)?;
        if p.stride == 0 {
            return Err(TensorError::dim("conv_transpose2d", "stride 0"));
        }
        let oh = ((h - 1) * p.stride + kh).checked_sub(2 * p.pad).filter(|&v| v > 0);
        let ow = ((w - 1) * p.stride + kw).checked_sub(2 * p.pad).filter(|&v| v > 0);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(TensorError::dim(
                "conv_transpose2d",
                format!("window {kh}x{kw} stride {} pad {} on {h}x{w}", p.stride, p.pad),
            ));
        };
        let g = Window {
            channels: cout,
            height: oh,
            width: ow,
            kh,
            kw,
            stride: p.stride,
            pad: p.pad,
            out_h: h,
            out_w: w,
        };
        let conv = ConvT { n, cin, g };
        let bd = bias.map(|b| b.data());
        let data = match precision() {
            Precision::F32 => conv.forward::<f32>(self.data(), weight.data(), bd),
            Precision::F64 => conv.forward::<f64>(self.data(), weight.data(), bd),
        };

        let (xt, wt) = (self.clone(), weight.clone());
        let has_bias = bias.is_some();
        let mut inputs = vec![self.clone(), weight.clone()];
        inputs.extend(bias.cloned());
        Ok(Tensor::from_op(
            "conv_transpose2d",
            data,
            vec![n, cout, oh, ow],
            inputs,
            Box::new(move |grad| {
                let (dx, dw) = match precision() {
                    Precision::F32 => conv.backward::<f32>(grad, &xt, &wt),
                    Precision::F64 => conv.backward::<f64>(grad, &xt, &wt),
                };
                let mut out = vec![dx, dw];
                if has_bias {
                    out.push(Some(bias_grad(grad, n, cout, oh * ow)));
                }
                out
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct sliding-window evaluation.
    fn naive_conv(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], stride: usize, pad: usize) -> Vec<f64> {
        let [n, c, h, wd] = xs;
        let [k, _, kh, kw] = ws;
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * k * oh * ow];
        for b in 0..n {
            for o in 0..k {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut s = 0.0;
                        for ci in 0..c {
                            for a in 0..kh {
                                for e in 0..kw {
                                    let y = (i * stride + a) as isize - pad as isize;
                                    let xx = (j * stride + e) as isize - pad as isize;
                                    if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                        s += x[((b * c + ci) * h + y as usize) * wd + xx as usize]
                                            * w[((o * c + ci) * kh + a) * kw + e];
                                    }
                                }
                            }
                        }
                        out[((b * k + o) * oh + i) * ow + j] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = Tensor::new((0..18).map(|v| v as f64 * 0.5).collect(), &[1, 2, 3, 3]).unwrap();
        let w = Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2, 1, 1]).unwrap();
        let y = x.conv2d(&w, None, ConvParams::default()).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let x = Tensor::ones(&[1, 1, 5, 5]);
        let w = Tensor::ones(&[1, 1, 3, 3]);
        let y = x.conv2d(&w, None, ConvParams::new(1, 1)).unwrap();
        let want = naive_conv(x.data(), [1, 1, 5, 5], w.data(), [1, 1, 3, 3], 1, 1);
        assert_eq!(y.data(), want.as_slice());
        let d = y.data();
        assert_eq!(d[0], 4.0);
        assert_eq!(d[2], 6.0);
        assert_eq!(d[12], 9.0);
        assert_eq!(d[24], 4.0);
    }

    #[test]
    fn strided_conv_matches_naive() {
        let xs = [2, 3, 7, 6];
        let ws = [4, 3, 3, 2];
        let x: Vec<f64> = (0..xs.iter().product()).map(|i: usize| (i as f64 * 0.13).sin()).collect();
        let w: Vec<f64> = (0..ws.iter().product()).map(|i: usize| (i as f64 * 0.71).cos()).collect();
        let want = naive_conv(&x, xs, &w, ws, 2, 1);
        crate::with_precision(crate::Precision::F64, || {
            let y = Tensor::new(x.clone(), &xs)
                .unwrap()
                .conv2d(&Tensor::new(w.clone(), &ws).unwrap(), None, ConvParams::new(2, 1))
                .unwrap();
            assert_eq!(y.shape(), &[2, 4, 4, 4]);
            for (a, b) in y.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        });
    }

    #[test]
    fn transpose_doubles_extent() {
        let x = Tensor::ones(&[1, 1, 2, 2]);
        let w = Tensor::ones(&[1, 3, 2, 2]);
        let y = x.conv_transpose2d(&w, None, ConvParams::new(2, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 3, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn bad_geometry_is_dimension_error() {
        let x = Tensor::ones(&[1, 1, 2, 2]);
        let w = Tensor::ones(&[1, 1, 3, 3]);
        assert!(matches!(
            x.conv2d(&w, None, ConvParams::default()),
            Err(TensorError::Dimension { .. })
        ));
        let w2 = Tensor::ones(&[1, 2, 1, 1]);
        assert!(x.conv2d(&w2, None, ConvParams::default()).is_err());
    }
}
