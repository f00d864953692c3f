//! Masked-autoencoder pre-training: random token masking, the lightweight
//! decoder, the masked-patch reconstruction loss and the training step.

use demmae_tensor::Tensor;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, ParamBuilder, ParamId, ParamSet};
use crate::optim::AdamW;
use crate::rng;
use crate::vit::{patchify, sincos_pos_embed, unpatchify, TransformerBlock, VitEncoder};

/// Which tokens the encoder sees.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub n_tokens: usize,
    /// Visible tokens, ascending.
    pub keep_ids: Vec<usize>,
    /// Hidden tokens, ascending.
    pub mask_ids: Vec<usize>,
    /// Position of original token `i` inside `keep_ids ++ mask_ids`.
    pub restore_perm: Vec<usize>,
}

impl MaskPlan {
    /// Plan from an explicit visible set.
    pub fn from_keep(n_tokens: usize, keep: &[usize]) -> Result<Self> {
        let mut visible = vec![false; n_tokens];
        for &k in keep {
            if k >= n_tokens || std::mem::replace(&mut visible[k], true) {
                return Err(Error::Config(format!("invalid keep id {k} for {n_tokens} tokens")));
            }
        }
        let keep_ids: Vec<usize> = (0..n_tokens).filter(|&i| visible[i]).collect();
        let mask_ids: Vec<usize> = (0..n_tokens).filter(|&i| !visible[i]).collect();
        let mut restore_perm = vec![0; n_tokens];
        for (pos, &id) in keep_ids.iter().chain(&mask_ids).enumerate() {
            restore_perm[id] = pos;
        }
        Ok(MaskPlan {
            n_tokens,
            keep_ids,
            mask_ids,
            restore_perm,
        })
    }

    /// Everything visible.
    pub fn keep_all(n_tokens: usize) -> Self {
        Self::from_keep(n_tokens, &(0..n_tokens).collect::<Vec<_>>()).expect("identity plan")
    }
}

/// Number of visible tokens: `floor(n·(1 − ratio))`.
pub fn keep_count(n_tokens: usize, mask_ratio: f64) -> usize {
    (n_tokens as f64 * (1.0 - mask_ratio)).floor() as usize
}

/// Uniformly random visible subset of size [`keep_count`] via a seeded
/// shuffle.
pub fn random_mask(n_tokens: usize, mask_ratio: f64, rng: &mut ChaCha8Rng) -> Result<MaskPlan> {
    if !(mask_ratio > 0.0 && mask_ratio < 1.0) {
        return Err(Error::Config(format!("mask_ratio {mask_ratio} outside (0, 1)")));
    }
    if n_tokens < 2 {
        return Err(Error::Config(format!("cannot mask {n_tokens} tokens")));
    }
    let keep = keep_count(n_tokens, mask_ratio);
    if keep == 0 || keep == n_tokens {
        return Err(Error::Config(format!(
            "mask_ratio {mask_ratio} on {n_tokens} tokens keeps {keep}"
        )));
    }
    let mut order: Vec<usize> = (0..n_tokens).collect();
    order.shuffle(rng);
    MaskPlan::from_keep(n_tokens, &order[..keep])
}

#[derive(Clone)]
pub struct MaeDecoder {
    pub params: ParamSet,
    pub embed: Linear,
    pub mask_token: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
    pub pred: Linear,
    pos: Tensor,
}

impl MaeDecoder {
    pub fn new(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut params = ParamSet::default();
        let mut b = ParamBuilder::new(&mut params, rng);
        let mut s = b.scope("decoder");
        let dd = config.decoder_dim;
        let embed = Linear::new(&mut s, "embed", config.embed_dim, dd)?;
        let mask_token = s.normal("mask_token", &[dd], 0.02)?;
        let blocks = (0..config.decoder_blocks)
            .map(|i| TransformerBlock::new(&mut s, &format!("blocks.{i}"), dd, config.decoder_heads))
            .collect::<Result<_>>()?;
        let norm = LayerNorm::new(&mut s, "norm", dd)?;
        let pred = Linear::new(&mut s, "pred", dd, config.patch_len())?;
        let g = config.grid();
        Ok(MaeDecoder {
            params,
            embed,
            mask_token,
            blocks,
            norm,
            pred,
            pos: sincos_pos_embed(g, g, dd)?,
        })
    }
}

/// Projects visible-token latents to the decoder width, fills every masked
/// slot with the shared mask token, restores the original order, adds
/// decoder positions, runs the decoder blocks and predicts patch pixels.
/// Returns `[B×N×(p²·C)]`.
pub fn mae_decode(latent: &Tensor, plans: &[MaskPlan], decoder: &MaeDecoder) -> Result<Tensor> {
    let [batch, kept, _] = *latent.shape() else {
        return Err(Error::Contract(format!("latent must be [B, n, D], got {:?}", latent.shape())));
    };
    if plans.len() != batch || plans.iter().any(|p| p.keep_ids.len() != kept) {
        return Err(Error::Contract(format!(
            "latent keeps {kept} tokens per image but the {} plans disagree",
            plans.len()
        )));
    }
    let p = &decoder.params;
    let x = decoder.embed.forward(p, latent)?;
    let dd = x.shape()[2];
    let n = plans[0].n_tokens;
    let token = p.get(decoder.mask_token).reshape(&[1, dd])?;
    let rows = plans
        .iter()
        .enumerate()
        .map(|(b, plan)| {
            let visible = x.narrow(0, b, 1)?.reshape(&[kept, dd])?;
            let full = if kept < n {
                let fill = token.index_select(0, &vec![0; n - kept])?;
                Tensor::concat(&[visible, fill], 0)?
            } else {
                visible
            };
            Ok(full.index_select(0, &plan.restore_perm)?.reshape(&[1, n, dd])?)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut x = Tensor::concat(&rows, 0)?.add(&decoder.pos)?;
    for block in &decoder.blocks {
        x = block.forward(p, &x)?;
    }
    decoder.pred.forward(p, &decoder.norm.forward(p, &x)?)
}

/// Mean squared error over the masked tokens of every image; visible
/// tokens do not enter the loss at all. With `norm_target`, each target
/// patch is standardized by its own mean and variance first.
pub fn reconstruction_loss(pred: &Tensor, target: &Tensor, plans: &[MaskPlan], norm_target: bool) -> Result<Tensor> {
    if pred.shape() != target.shape() || pred.rank() != 3 {
        return Err(Error::Contract(format!(
            "prediction {:?} and target {:?} differ",
            pred.shape(),
            target.shape()
        )));
    }
    if plans.len() != pred.shape()[0] {
        return Err(Error::Contract(format!("{} plans for batch {}", plans.len(), pred.shape()[0])));
    }
    if plans.iter().all(|p| p.mask_ids.is_empty()) {
        return Err(Error::Contract("reconstruction loss over an empty mask set".into()));
    }
    let target = if norm_target {
        normalize_patches(target)?
    } else {
        target.detach()
    };
    let mut pred_parts = Vec::new();
    let mut target_parts = Vec::new();
    for (b, plan) in plans.iter().enumerate() {
        if plan.mask_ids.is_empty() {
            continue;
        }
        pred_parts.push(pred.narrow(0, b, 1)?.index_select(1, &plan.mask_ids)?);
        target_parts.push(target.narrow(0, b, 1)?.index_select(1, &plan.mask_ids)?);
    }
    let diff = Tensor::concat(&pred_parts, 1)?.sub(&Tensor::concat(&target_parts, 1)?)?;
    Ok(diff.square().mean_all())
}

fn normalize_patches(target: &Tensor) -> Result<Tensor> {
    let l = *target.shape().last().unwrap();
    let mut data = target.to_vec();
    for row in data.chunks_mut(l) {
        let mean = row.iter().sum::<f64>() / l as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / l as f64;
        let s = (var + 1e-6).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) / s);
    }
    Ok(Tensor::new(data, target.shape())?)
}

/// Encoder plus reconstruction decoder.
#[derive(Clone)]
pub struct MaeModel {
    pub encoder: VitEncoder,
    pub decoder: MaeDecoder,
    pub norm_target: bool,
}

impl MaeModel {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, &[0x004d_4145]);
        Ok(MaeModel {
            encoder: VitEncoder::new(config, &mut rng)?,
            decoder: MaeDecoder::new(config, &mut rng)?,
            norm_target: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.encoder.config
    }

    /// One independent plan per image, drawn from the stream
    /// `(seed, iteration, image)`.
    pub fn plans(&self, batch: usize, seed: u64, iteration: u64) -> Result<Vec<MaskPlan>> {
        let c = self.config();
        (0..batch)
            .map(|b| random_mask(c.n_tokens(), c.mask_ratio, &mut rng::stream(seed, &[iteration, b as u64])))
            .collect()
    }

    /// Forward pass: returns (predicted patches, target patches).
    pub fn forward(&self, images: &Tensor, plans: &[MaskPlan]) -> Result<(Tensor, Tensor)> {
        let enc = self.encoder.encode_with(images, Some(plans), false)?;
        let latent = self.encoder.norm.forward(&self.encoder.params, &enc.last)?;
        let pred = mae_decode(&latent, plans, &self.decoder)?;
        let target = patchify(images, self.config().patch_size)?;
        Ok((pred, target))
    }

    pub fn loss(&self, images: &Tensor, plans: &[MaskPlan]) -> Result<Tensor> {
        let (pred, target) = self.forward(images, plans)?;
        reconstruction_loss(&pred, &target, plans, self.norm_target)
    }

    /// Input image with masked patches replaced by the prediction, plus the
    /// masked input (hidden patches zeroed). Both `[B×C×H×W]`.
    pub fn reconstruct(&self, images: &Tensor, plans: &[MaskPlan]) -> Result<(Tensor, Tensor)> {
        let (pred, target) = self.forward(images, plans)?;
        let c = self.config();
        let l = c.patch_len();
        let mut recon = target.to_vec();
        let mut masked = target.to_vec();
        let n = c.n_tokens();
        for (b, plan) in plans.iter().enumerate() {
            for &m in &plan.mask_ids {
                let off = (b * n + m) * l;
                recon[off..off + l].copy_from_slice(&pred.data()[off..off + l]);
                masked[off..off + l].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let shape = target.shape().to_vec();
        let to_img = |v: Vec<f64>| -> Result<Tensor> {
            unpatchify(&Tensor::new(v, &shape)?, c.in_channels, c.image_size, c.image_size, c.patch_size)
        };
        Ok((to_img(recon)?, to_img(masked)?))
    }
}

/// One optimization step on `images`: fresh per-image masks, forward,
/// backward, AdamW update at `lr`. Returns the loss before the update.
pub fn pretrain_step(
    model: &mut MaeModel,
    images: &Tensor,
    optimizer: &mut AdamW,
    lr: f64,
    seed: u64,
    iteration: u64,
) -> Result<f64> {
    let plans = model.plans(images.shape()[0], seed, iteration)?;
    let loss = model.loss(images, &plans)?;
    let value = loss.item();
    if !value.is_finite() {
        return Err(Error::Training(format!("non-finite reconstruction loss at iteration {iteration}")));
    }
    loss.backward()?;
    optimizer.step(&mut [&mut model.encoder.params, &mut model.decoder.params], lr)?;
    Ok(value)
}
