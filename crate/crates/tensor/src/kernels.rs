//! Raw numeric kernels over row-major slices.

use crate::precision::Precision;

/// Element type of a GEMM-backed kernel.
pub(crate) trait Scalar: Copy + Default + Send + Sync + std::ops::AddAssign + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    /// `c = a·b + beta·c` over strided operands.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m×k`, `k×n` and `m×n` views.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
    );
    fn one() -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, 1);
    }
    fn one() -> Self {
        1.0
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, 1);
    }
    fn one() -> Self {
        1.0
    }
}

/// Converts `src` into a reusable buffer of element type `T`.
pub(crate) fn convert_into<T: Scalar>(src: &[f64], dst: &mut Vec<T>) {
    dst.clear();
    dst.extend(src.iter().map(|&v| T::from_f64(v)));
}

/// `c (+)= op(a) · op(b)` in element type `T`; layouts as in [`gemm`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_t<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(T::default());
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::default() };
    // SAFETY: the assertion above bounds every strided access.
    unsafe { T::gemm_raw(m, k, n, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize) }
}

/// `c (+)= op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// `a` is stored `m×k` (or `k×m` when `ta`), `b` is stored `k×n` (or `n×k`
/// when `tb`). In `F32` mode the product is evaluated with single-precision
/// accumulation.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    prec: Precision,
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    match prec {
        Precision::F64 => gemm_t(m, k, n, a, ta, b, tb, c, accumulate),
        Precision::F32 => {
            let (mut a32, mut b32) = (Vec::new(), Vec::new());
            convert_into::<f32>(a, &mut a32);
            convert_into::<f32>(b, &mut b32);
            let mut c32 = vec![0f32; m * n];
            gemm_t(m, k, n, &a32, ta, &b32, tb, &mut c32, false);
            if accumulate {
                c.iter_mut().zip(&c32).for_each(|(c, &v)| *c += v as f64);
            } else {
                c.iter_mut().zip(&c32).for_each(|(c, &v)| *c = v as f64);
            }
        }
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Geometry of a 2-D sliding window over one `C×H×W` image.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output columns `[lo, hi)` whose tap `x = oj·stride + kj − pad` lands
/// inside `0..width`.
fn valid_span(g: &Window, kj: usize) -> (usize, usize) {
    let lo = (g.pad.saturating_sub(kj)).div_ceil(g.stride).min(g.out_w);
    let hi = (g.width + g.pad).saturating_sub(kj).div_ceil(g.stride).min(g.out_w).max(lo);
    (lo, hi)
}

/// Unfolds `image` (`C×H×W`) into `(C·kh·kw) × (out_h·out_w)` columns;
/// out-of-bounds taps read zero.
pub(crate) fn im2col<S: Copy + Into<f64>, T: Scalar>(image: &[S], g: &Window, cols: &mut [T]) {
    debug_assert_eq!(cols.len(), g.rows() * g.cols());
    let ncols = g.cols();
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = valid_span(g, kj);
                for oi in 0..g.out_h {
                    let y = (oi * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oi * g.out_w..(oi + 1) * g.out_w];
                    if y < 0 || y >= g.height as isize {
                        line.fill(T::default());
                        continue;
                    }
                    let src = &plane[y as usize * g.width..(y as usize + 1) * g.width];
                    line[..lo].fill(T::default());
                    line[hi..].fill(T::default());
                    if hi > lo {
                        let x0 = lo * g.stride + kj - g.pad;
                        let line = &mut line[lo..hi];
                        if g.stride == 1 {
                            let src = &src[x0..x0 + line.len()];
                            for (v, s) in line.iter_mut().zip(src) {
                                *v = T::from_f64((*s).into());
                            }
                        } else {
                            for (v, s) in line.iter_mut().zip(src[x0..].iter().step_by(g.stride)) {
                                *v = T::from_f64((*s).into());
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into `image`.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &Window, image: &mut [T]) {
    debug_assert_eq!(cols.len(), g.rows() * g.cols());
    let ncols = g.cols();
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = valid_span(g, kj);
                if hi == lo {
                    continue;
                }
                let x0 = lo * g.stride + kj - g.pad;
                for oi in 0..g.out_h {
                    let y = (oi * g.stride + ki) as isize - g.pad as isize;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * g.width..(y as usize + 1) * g.width];
                    let line = &src[oi * g.out_w + lo..oi * g.out_w + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst[x0..x0 + line.len()].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in dst[x0..].iter_mut().step_by(g.stride).zip(line) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}
