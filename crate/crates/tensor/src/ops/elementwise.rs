use crate::error::{Result, TensorError};
use crate::kernels::strides;
use crate::tensor::Tensor;

/// Output shape of a numpy-style broadcast, aligned on trailing axes.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each element of `out`, the flat index of the element of `input` it
/// reads under broadcasting.
fn broadcast_index(out: &[usize], input: &[usize]) -> Vec<usize> {
    let offset = out.len() - input.len();
    let in_strides = strides(input);
    let mut eff = vec![0; out.len()];
    for (i, &d) in input.iter().enumerate() {
        eff[offset + i] = if d == 1 { 0 } else { in_strides[i] };
    }
    let numel: usize = out.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0; out.len()];
    let mut flat = 0;
    for _ in 0..numel {
        map.push(flat);
        for ax in (0..out.len()).rev() {
            idx[ax] += 1;
            flat += eff[ax];
            if idx[ax] < out[ax] {
                break;
            }
            flat -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

fn reduce_to(grad: &[f64], map: Option<&[usize]>, len: usize) -> Vec<f64> {
    match map {
        None => grad.to_vec(),
        Some(map) => {
            let mut g = vec![0.0; len];
            for (&i, &v) in map.iter().zip(grad) {
                g[i] += v;
            }
            g
        }
    }
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl Tensor {
    fn binary(&self, other: &Tensor, op: BinOp, name: &'static str) -> Result<Tensor> {
        let out_shape = broadcast_shape(self.shape(), other.shape())
            .ok_or_else(|| TensorError::mismatch(name, self.shape(), other.shape()))?;
        let (amap, bmap) = if self.shape() == other.shape() {
            (None, None)
        } else {
            let a = (self.shape() != out_shape.as_slice()).then(|| broadcast_index(&out_shape, self.shape()));
            let b = (other.shape() != out_shape.as_slice()).then(|| broadcast_index(&out_shape, other.shape()));
            (a, b)
        };
        let numel: usize = out_shape.iter().product();
        let (ad, bd) = (self.data(), other.data());
        let f = |x: f64, y: f64| match op {
            BinOp::Add => x + y,
            BinOp::Sub => x - y,
            BinOp::Mul => x * y,
            BinOp::Div => x / y,
        };
        let data: Vec<f64> = match (&amap, &bmap) {
            (None, None) => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..numel)
                .map(|i| {
                    let x = ad[amap.as_ref().map_or(i, |m| m[i])];
                    let y = bd[bmap.as_ref().map_or(i, |m| m[i])];
                    f(x, y)
                })
                .collect(),
        };
        let (a, b) = (self.clone(), other.clone());
        let (a_len, b_len) = (a.numel(), b.numel());
        Ok(Tensor::from_op(
            name,
            data,
            out_shape,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let at = |i: usize, m: &Option<Vec<usize>>| m.as_ref().map_or(i, |m| m[i]);
                let (ga, gb): (Vec<f64>, Vec<f64>) = match op {
                    BinOp::Add => (g.to_vec(), g.to_vec()),
                    BinOp::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
                    BinOp::Mul => (
                        g.iter().enumerate().map(|(i, v)| v * b.data()[at(i, &bmap)]).collect(),
                        g.iter().enumerate().map(|(i, v)| v * a.data()[at(i, &amap)]).collect(),
                    ),
                    BinOp::Div => {
                        let ga = g.iter().enumerate().map(|(i, v)| v / b.data()[at(i, &bmap)]).collect();
                        let gb = g
                            .iter()
                            .enumerate()
                            .map(|(i, v)| {
                                let y = b.data()[at(i, &bmap)];
                                -v * a.data()[at(i, &amap)] / (y * y)
                            })
                            .collect();
                        (ga, gb)
                    }
                };
                vec![
                    a.requires_grad().then(|| reduce_to(&ga, amap.as_deref(), a_len)),
                    b.requires_grad().then(|| reduce_to(&gb, bmap.as_deref(), b_len)),
                ]
            }),
        ))
    }

    /// Elementwise sum with trailing-axis broadcasting.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinOp::Add, "add")
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinOp::Sub, "sub")
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinOp::Mul, "mul")
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinOp::Div, "div")
    }

    /// Applies `f` elementwise; `df(x, y)` is the derivative at input `x`
    /// with output `y`.
    fn unary(&self, name: &'static str, f: impl Fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        let x = self.clone();
        let y = data.clone();
        Tensor::from_op(
            name,
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                let gx = g
                    .iter()
                    .zip(x.data())
                    .zip(&y)
                    .map(|((g, &x), &y)| g * df(x, y))
                    .collect();
                vec![Some(gx)]
            }),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary("add_scalar", move |x| x + c, |_, _| 1.0)
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| x * c).collect();
        Tensor::from_op(
            "mul_scalar",
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| vec![Some(g.iter().map(|v| v * c).collect())]),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    pub fn exp(&self) -> Tensor {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        self.unary("ln", f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary("sqrt", f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(&self) -> Tensor {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn tanh(&self) -> Tensor {
        self.unary("tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn relu(&self) -> Tensor {
        self.unary("relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }
}
