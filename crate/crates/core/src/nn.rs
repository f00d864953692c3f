//! Parameter storage and the small set of layers every model is built from.

use demmae_tensor::{ConvParams, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named, ordered parameter table of one model component.
#[derive(Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    /// Replaces a parameter's values, keeping its grad flag.
    pub fn set(&mut self, id: ParamId, values: Vec<f64>) -> Result<()> {
        let old = &self.tensors[id.0];
        let t = Tensor::new(values, old.shape())?.with_requires_grad(old.requires_grad());
        self.tensors[id.0] = t;
        Ok(())
    }

    /// Marks every parameter trainable or frozen.
    pub fn set_trainable(&mut self, trainable: bool) {
        for t in &mut self.tensors {
            *t = t.with_requires_grad(trainable);
        }
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Little-endian `f32` bytes of every parameter in order; used for
    /// bit-level comparisons.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()))
            .collect()
    }
}

/// Creates parameters in a [`ParamSet`] under a hierarchical name prefix.
pub struct ParamBuilder<'a> {
    set: &'a mut ParamSet,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(set: &'a mut ParamSet, rng: &'a mut ChaCha8Rng) -> Self {
        ParamBuilder {
            set,
            rng,
            prefix: String::new(),
        }
    }

    /// Builder for a child scope `prefix.name`.
    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            set: self.set,
            rng: self.rng,
            prefix,
        }
    }

    pub fn add(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<ParamId> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        if self.set.id(&full).is_some() {
            return Err(Error::Config(format!("duplicate parameter {full}")));
        }
        self.set.names.push(full);
        self.set.tensors.push(Tensor::parameter(values, shape)?);
        Ok(ParamId(self.set.tensors.len() - 1))
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.add(name, values, shape)
    }

    /// Approximately normal values via a sum of uniforms (Irwin–Hall, 12 terms).
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| (0..12).map(|_| self.rng.gen::<f64>()).sum::<f64>() - 6.0)
            .map(|z| z * std)
            .collect();
        self.add(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.add(name, vec![value; shape.iter().product()], shape)
    }
}

/// `y = x·W + b` with `W` stored `[in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new(b: &mut ParamBuilder, name: &str, inp: usize, out: usize) -> Result<Self> {
        let mut s = b.scope(name);
        let bound = (6.0 / (inp + out) as f64).sqrt();
        Ok(Linear {
            weight: s.uniform("weight", &[inp, out], bound)?,
            bias: s.constant("bias", &[out], 0.0)?,
        })
    }

    pub fn forward(&self, p: &ParamSet, x: &Tensor) -> Result<Tensor> {
        Ok(x.linear(p.get(self.weight), Some(p.get(self.bias)))?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-6;

impl LayerNorm {
    pub fn new(b: &mut ParamBuilder, name: &str, dim: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(LayerNorm {
            gamma: s.constant("weight", &[dim], 1.0)?,
            beta: s.constant("bias", &[dim], 0.0)?,
        })
    }

    pub fn forward(&self, p: &ParamSet, x: &Tensor) -> Result<Tensor> {
        Ok(x.layer_norm(p.get(self.gamma), p.get(self.beta), LN_EPS)?)
    }
}

/// 2-D convolution with bias; weights `[out, in, k, k]`.
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub params: ConvParams,
}

impl Conv2d {
    /// He-uniform weights (fan-in), zero bias.
    pub fn new(b: &mut ParamBuilder, name: &str, inp: usize, out: usize, k: usize, params: ConvParams) -> Result<Self> {
        let mut s = b.scope(name);
        let bound = (6.0 / (inp * k * k) as f64).sqrt();
        Ok(Conv2d {
            weight: s.uniform("weight", &[out, inp, k, k], bound)?,
            bias: s.constant("bias", &[out], 0.0)?,
            params,
        })
    }

    pub fn forward(&self, p: &ParamSet, x: &Tensor) -> Result<Tensor> {
        Ok(x.conv2d(p.get(self.weight), Some(p.get(self.bias)), self.params)?)
    }
}

/// Transposed convolution with bias; weights `[in, out, k, k]`.
#[derive(Clone, Copy, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub params: ConvParams,
}

impl ConvTranspose2d {
    pub fn new(b: &mut ParamBuilder, name: &str, inp: usize, out: usize, k: usize, params: ConvParams) -> Result<Self> {
        let mut s = b.scope(name);
        let bound = (6.0 / (inp * k * k / (params.stride * params.stride)).max(1) as f64).sqrt();
        Ok(ConvTranspose2d {
            weight: s.uniform("weight", &[inp, out, k, k], bound)?,
            bias: s.constant("bias", &[out], 0.0)?,
            params,
        })
    }

    pub fn forward(&self, p: &ParamSet, x: &Tensor) -> Result<Tensor> {
        Ok(x.conv_transpose2d(p.get(self.weight), Some(p.get(self.bias)), self.params)?)
    }
}
