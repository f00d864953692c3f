//! ViT encoder: patch embedding, fixed 2-D sine-cosine positions and
//! pre-norm transformer blocks, with outputs captured after selected blocks.

use demmae_tensor::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, MLP_RATIO};
use crate::error::{Error, Result};
use crate::mae::MaskPlan;
use crate::nn::{LayerNorm, Linear, ParamBuilder, ParamSet};

/// Splits `[C×H×W]` (or batched `[B×C×H×W]`) into non-overlapping
/// `p×p` patches, giving `[N × C·p·p]` (or `[B×N×C·p·p]`). Patches are in
/// row-major grid order; each row is the flattened `(C, p, p)` block.
pub fn patchify(image: &Tensor, p: usize) -> Result<Tensor> {
    let (batch, c, h, w) = match *image.shape() {
        [c, h, w] => (None, c, h, w),
        [b, c, h, w] => (Some(b), c, h, w),
        _ => return Err(Error::Config(format!("patchify expects rank 3 or 4, got {:?}", image.shape()))),
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(demmae_tensor::TensorError::Dimension {
            op: "patchify",
            msg: format!("{h}x{w} not divisible by patch {p}"),
        }
        .into());
    }
    let (gh, gw) = (h / p, w / p);
    let b = batch.unwrap_or(1);
    let t = image
        .reshape(&[b, c, gh, p, gw, p])?
        .permute(&[0, 2, 4, 1, 3, 5])?;
    Ok(match batch {
        Some(b) => t.reshape(&[b, gh * gw, c * p * p])?,
        None => t.reshape(&[gh * gw, c * p * p])?,
    })
}

/// Inverse of [`patchify`] for an `h×w` image with `channels` channels.
pub fn unpatchify(tokens: &Tensor, channels: usize, h: usize, w: usize, p: usize) -> Result<Tensor> {
    let (gh, gw) = (h / p, w / p);
    let batch = match *tokens.shape() {
        [n, l] if n == gh * gw && l == channels * p * p => None,
        [b, n, l] if n == gh * gw && l == channels * p * p => Some(b),
        _ => {
            return Err(demmae_tensor::TensorError::Dimension {
                op: "unpatchify",
                msg: format!("tokens {:?} for {channels}x{h}x{w} patch {p}", tokens.shape()),
            }
            .into())
        }
    };
    let b = batch.unwrap_or(1);
    let t = tokens
        .reshape(&[b, gh, gw, channels, p, p])?
        .permute(&[0, 3, 1, 4, 2, 5])?;
    Ok(match batch {
        Some(b) => t.reshape(&[b, channels, h, w])?,
        None => t.reshape(&[channels, h, w])?,
    })
}

/// Affine embedding of flattened patches.
pub fn patch_embed(patches: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    Ok(patches.linear(weight, Some(bias))?)
}

/// Fixed `[rows·cols × dim]` table. The first half of the channels encodes
/// the row index and the second half the column index, each as interleaved
/// `(sin, cos)` pairs over frequencies `10000^(−2i/(dim/2))`.
pub fn sincos_pos_embed(rows: usize, cols: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(4) {
        return Err(Error::Config(format!("positional dim {dim} not divisible by 4")));
    }
    let half = dim / 2;
    let pairs = half / 2;
    let freq: Vec<f64> = (0..pairs)
        .map(|i| 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64))
        .collect();
    let mut data = Vec::with_capacity(rows * cols * dim);
    for r in 0..rows {
        for c in 0..cols {
            for pos in [r as f64, c as f64] {
                for &f in &freq {
                    data.push((pos * f).sin());
                    data.push((pos * f).cos());
                }
            }
        }
    }
    Ok(Tensor::new(data, &[rows * cols, dim])?)
}

/// Query/key/value projection and output projection of one attention layer.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(b: &mut ParamBuilder, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        let mut s = b.scope(name);
        Ok(Attention {
            qkv: Linear::new(&mut s, "qkv", dim, 3 * dim)?,
            proj: Linear::new(&mut s, "proj", dim, dim)?,
            heads,
        })
    }
}

/// Splits `[B×N×D]` tokens into per-head queries, keys and values, each
/// `[B·H × N × D/H]`.
fn split_heads(p: &ParamSet, x: &Tensor, attn: &Attention) -> Result<(Tensor, Tensor, Tensor, [usize; 3])> {
    let [b, n, d] = *x.shape() else {
        return Err(Error::Config(format!("attention expects [B, N, D], got {:?}", x.shape())));
    };
    let h = attn.heads;
    if h == 0 || d % h != 0 {
        return Err(Error::Config(format!("dim {d} not divisible by {h} heads")));
    }
    let dh = d / h;
    let qkv = attn
        .qkv
        .forward(p, x)?
        .reshape(&[b, n, 3, h, dh])?
        .permute(&[2, 0, 3, 1, 4])?;
    let take = |i: usize| -> Result<Tensor> { Ok(qkv.narrow(0, i, 1)?.reshape(&[b * h, n, dh])?) };
    Ok((take(0)?, take(1)?, take(2)?, [b, n, d]))
}

fn with_batch(x: &Tensor) -> Result<(Tensor, bool)> {
    match x.rank() {
        2 => Ok((x.reshape(&[1, x.shape()[0], x.shape()[1]])?, true)),
        3 => Ok((x.clone(), false)),
        _ => Err(Error::Config(format!("tokens must be [N, D] or [B, N, D], got {:?}", x.shape()))),
    }
}

/// Softmax attention weights `[B·H × N × N]` with scale `1/√(D/H)`.
pub fn attention_weights(p: &ParamSet, x: &Tensor, attn: &Attention) -> Result<Tensor> {
    let (x, _) = with_batch(x)?;
    let (q, k, _, [_, _, d]) = split_heads(p, &x, attn)?;
    let scale = 1.0 / ((d / attn.heads) as f64).sqrt();
    Ok(q.matmul(&k.transpose(1, 2)?)?.mul_scalar(scale).softmax(2)?)
}

/// Scaled dot-product attention per head, heads concatenated, then the
/// output projection. Accepts `[N×D]` or `[B×N×D]`.
pub fn multi_head_attention(p: &ParamSet, x: &Tensor, attn: &Attention) -> Result<Tensor> {
    let (xb, unbatched) = with_batch(x)?;
    let (q, k, v, [b, n, d]) = split_heads(p, &xb, attn)?;
    let h = attn.heads;
    let scale = 1.0 / ((d / h) as f64).sqrt();
    let weights = q.matmul(&k.transpose(1, 2)?)?.mul_scalar(scale).softmax(2)?;
    let ctx = weights
        .matmul(&v)?
        .reshape(&[b, h, n, d / h])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b, n, d])?;
    let out = attn.proj.forward(p, &ctx)?;
    if unbatched {
        Ok(out.reshape(&[n, d])?)
    } else {
        Ok(out)
    }
}

/// Pre-norm block: `x + MHA(LN(x))`, then `+ MLP(LN(·))` with GELU and a
/// hidden width of `MLP_RATIO·D`.
#[derive(Clone, Copy, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    pub fn new(b: &mut ParamBuilder, name: &str, dim: usize, heads: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(TransformerBlock {
            norm1: LayerNorm::new(&mut s, "norm1", dim)?,
            attn: Attention::new(&mut s, "attn", dim, heads)?,
            norm2: LayerNorm::new(&mut s, "norm2", dim)?,
            fc1: Linear::new(&mut s, "fc1", dim, MLP_RATIO * dim)?,
            fc2: Linear::new(&mut s, "fc2", MLP_RATIO * dim, dim)?,
        })
    }

    pub fn forward(&self, p: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let h = multi_head_attention(p, &self.norm1.forward(p, x)?, &self.attn)?;
        let x = x.add(&h)?;
        let m = self.fc2.forward(p, &self.fc1.forward(p, &self.norm2.forward(p, &x)?)?.gelu())?;
        Ok(x.add(&m)?)
    }
}

/// Token sequences produced by [`VitEncoder::encode`].
#[derive(Clone, Debug)]
pub struct Encoded {
    /// Output of the last block, `[B×n×D]`.
    pub last: Tensor,
    /// Outputs after each tap block, in tap order.
    pub taps: Vec<Tensor>,
    /// Patch grid `(rows, cols)` of the full image.
    pub grid: (usize, usize),
}

#[derive(Clone)]
pub struct VitEncoder {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub patch_embed: Linear,
    pub blocks: Vec<TransformerBlock>,
    /// Final norm applied before the MAE decoder; taps are pre-norm.
    pub norm: LayerNorm,
    pos: Tensor,
}

impl VitEncoder {
    pub fn new(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::default();
        let mut b = ParamBuilder::new(&mut params, rng);
        let mut s = b.scope("encoder");
        let patch_embed = Linear::new(&mut s, "patch_embed", config.patch_len(), config.embed_dim)?;
        let blocks = (0..config.encoder_blocks)
            .map(|i| TransformerBlock::new(&mut s, &format!("blocks.{i}"), config.embed_dim, config.encoder_heads))
            .collect::<Result<_>>()?;
        let norm = LayerNorm::new(&mut s, "norm", config.embed_dim)?;
        let g = config.grid();
        Ok(VitEncoder {
            config: config.clone(),
            params,
            patch_embed,
            blocks,
            norm,
            pos: sincos_pos_embed(g, g, config.embed_dim)?,
        })
    }

    pub fn pos_embed(&self) -> &Tensor {
        &self.pos
    }

    fn check_images(&self, images: &Tensor) -> Result<usize> {
        let c = &self.config;
        match *images.shape() {
            [b, ch, h, w] if ch == c.in_channels && h == c.image_size && w == c.image_size => Ok(b),
            _ => Err(Error::Config(format!(
                "images {:?} do not match [B, {}, {}, {}]",
                images.shape(),
                c.in_channels,
                c.image_size,
                c.image_size
            ))),
        }
    }

    /// Patch tokens before positions are added, `[B×N×D]`.
    pub fn embed_patches(&self, images: &Tensor) -> Result<Tensor> {
        self.check_images(images)?;
        let patches = patchify(images, self.config.patch_size)?;
        self.patch_embed.forward(&self.params, &patches)
    }

    /// Runs every block, capturing tap outputs when `capture` is set.
    pub fn run_blocks(&self, tokens: &Tensor, capture: bool) -> Result<(Tensor, Vec<Tensor>)> {
        let mut x = tokens.clone();
        let mut taps = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(&self.params, &x)?;
            if capture && self.config.tap_blocks.contains(&i) {
                taps.push(x.clone());
            }
        }
        Ok((x, taps))
    }

    /// patchify → embed → +positions → optional per-image token subset →
    /// blocks. `plans`, when given, holds one mask plan per image, all with
    /// the same keep count.
    pub fn encode(&self, images: &Tensor, plans: Option<&[MaskPlan]>) -> Result<Encoded> {
        self.encode_with(images, plans, true)
    }

    pub fn encode_with(&self, images: &Tensor, plans: Option<&[MaskPlan]>, capture: bool) -> Result<Encoded> {
        let batch = self.check_images(images)?;
        let x = self.embed_patches(images)?.add(&self.pos)?;
        let x = match plans {
            None => x,
            Some(plans) => select_tokens(&x, plans, batch, self.config.n_tokens())?,
        };
        let (last, taps) = self.run_blocks(&x, capture)?;
        let g = self.config.grid();
        Ok(Encoded { last, taps, grid: (g, g) })
    }
}

/// Keeps `plans[b].keep_ids` of image `b`.
pub(crate) fn select_tokens(x: &Tensor, plans: &[MaskPlan], batch: usize, n_tokens: usize) -> Result<Tensor> {
    if plans.len() != batch {
        return Err(Error::Config(format!("{} mask plans for a batch of {batch}", plans.len())));
    }
    let kept = plans[0].keep_ids.len();
    if let Some(bad) = plans.iter().find(|p| p.n_tokens != n_tokens || p.keep_ids.len() != kept) {
        return Err(Error::Config(format!(
            "mask plan keeps {} of {} tokens; expected {kept} of {n_tokens}",
            bad.keep_ids.len(),
            bad.n_tokens
        )));
    }
    let parts = plans
        .iter()
        .enumerate()
        .map(|(b, plan)| Ok(x.narrow(0, b, 1)?.index_select(1, &plan.keep_ids)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::concat(&parts, 0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn iota(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new((0..n).map(|i| i as f64).collect(), shape).unwrap()
    }

    #[test]
    fn patch_counts() {
        let t = patchify(&Tensor::zeros(&[1, 224, 224]), 16).unwrap();
        assert_eq!(t.shape(), &[196, 256]);
        let t = patchify(&Tensor::zeros(&[3, 32, 32]), 4).unwrap();
        assert_eq!(t.shape(), &[64, 48]);
        assert!(patchify(&Tensor::zeros(&[1, 30, 32]), 4).is_err());
    }

    #[test]
    fn patch_layout() {
        // 1 channel 4x4, patch 2: patch 1 is the top-right 2x2 block
        let t = patchify(&iota(&[1, 4, 4]), 2).unwrap();
        assert_eq!(&t.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn unpatchify_inverts() {
        let x = iota(&[2, 3, 8, 12]);
        let t = patchify(&x, 4).unwrap();
        assert_eq!(t.shape(), &[2, 6, 48]);
        let back = unpatchify(&t, 3, 8, 12, 4).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn zero_weight_embed_gives_bias() {
        let patches = iota(&[5, 8]);
        let bias = Tensor::new(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        let y = patch_embed(&patches, &Tensor::zeros(&[8, 3]), &bias).unwrap();
        for row in y.data().chunks(3) {
            assert_eq!(row, bias.data());
        }
    }

    #[test]
    fn identity_extended_embed_keeps_patch_prefix() {
        let patches = iota(&[4, 3]);
        let mut w = vec![0.0; 3 * 5];
        for i in 0..3 {
            w[i * 5 + i] = 1.0;
        }
        let y = patch_embed(&patches, &Tensor::new(w, &[3, 5]).unwrap(), &Tensor::zeros(&[5])).unwrap();
        for (row, patch) in y.data().chunks(5).zip(patches.data().chunks(3)) {
            assert_eq!(&row[..3], patch);
            assert_eq!(&row[3..], &[0.0, 0.0]);
        }
    }

    #[test]
    fn pos_embed_origin_and_determinism() {
        let t = sincos_pos_embed(3, 3, 16).unwrap();
        let origin = &t.data()[..16];
        for pair in origin.chunks(2) {
            assert_eq!(pair, &[0.0, 1.0]);
        }
        assert_eq!(t.data(), sincos_pos_embed(3, 3, 16).unwrap().data());
        assert!(sincos_pos_embed(3, 3, 18).is_err());
    }

    #[test]
    fn attention_rejects_bad_heads() {
        let mut set = ParamSet::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = ParamBuilder::new(&mut set, &mut rng);
        assert!(matches!(Attention::new(&mut b, "a", 10, 3), Err(Error::Config(_))));
    }

    #[test]
    fn encode_rejects_wrong_image_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = VitEncoder::new(&ModelConfig::tiny(), &mut rng).unwrap();
        assert!(enc.encode(&Tensor::zeros(&[1, 1, 16, 16]), None).is_err());
    }
}
