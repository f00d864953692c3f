//! Finite-difference checks of the composite blocks, shared by the crate
//! tests and the workspace acceptance run. Every instance draws fresh
//! uniform parameters so that no pre-activation sits exactly on a ReLU
//! kink (zero-initialized biases would).

use demmae_tensor::gradcheck::{check, GradCheck};
use demmae_tensor::gradsuite::{uniform, STEP};
use demmae_tensor::{with_precision, Precision, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::mae::{mae_decode, random_mask, reconstruction_loss, MaeDecoder};
use crate::nn::{ParamBuilder, ParamSet};
use crate::optim::weighted_cross_entropy;
use crate::seg::{UNet, UperNetHead};
use crate::vit::TransformerBlock;

pub const BLOCKS: [&str; 5] = [
    "transformer_block",
    "upernet_head",
    "unet",
    "weighted_cross_entropy",
    "mae_decoder_loss",
];

/// Leaves `t` bound into a copy of `base`, in iteration order.
fn rebind(base: &ParamSet, t: &[Tensor]) -> ParamSet {
    let mut p = base.clone();
    for ((_, slot), v) in p.iter_mut().zip(t) {
        *slot = v.clone();
    }
    p
}

/// Checks `f(params, extra)` against every parameter and extra input.
fn check_block<F>(seed: u64, set: &ParamSet, extra: Vec<Tensor>, max_elems: usize, f: F) -> Result<GradCheck>
where
    F: Fn(&ParamSet, &[Tensor]) -> Result<Tensor>,
{
    let n_extra = extra.len();
    let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut inputs = extra;
    inputs.extend(set.iter().map(|(_, t)| uniform(&mut prng, t.shape(), -0.5, 0.5)));
    let g = |t: &[Tensor]| f(&rebind(set, &t[n_extra..]), &t[..n_extra]).map_err(|e| TensorError::Contract(e.to_string()));
    Ok(check(g, &inputs, STEP, max_elems)?)
}

fn small_head_config() -> ModelConfig {
    let mut c = ModelConfig::tiny();
    c.image_size = 16;
    c.embed_dim = 6;
    c.head_channels = 4;
    c
}

fn decoder_config() -> ModelConfig {
    let mut c = ModelConfig::tiny();
    c.image_size = 8;
    c.patch_size = 2;
    c.embed_dim = 6;
    c.decoder_dim = 4;
    c.decoder_blocks = 1;
    c.decoder_heads = 2;
    c
}

/// Instance `seed` of block `name` (one of [`BLOCKS`]).
pub fn run_block(name: &str, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match name {
        "transformer_block" => {
            let mut set = ParamSet::default();
            let block = with_precision(Precision::F64, || {
                TransformerBlock::new(&mut ParamBuilder::new(&mut set, &mut rng), "blk", 8, 2)
            })?;
            let x = uniform(&mut rng, &[2, 5, 8], -1.0, 1.0);
            check_block(seed, &set, vec![x], 24, |p, t| block.forward(p, &t[0]))
        }
        "upernet_head" => {
            let cfg = small_head_config();
            let grid = (cfg.grid(), cfg.grid());
            let head = with_precision(Precision::F64, || UperNetHead::new(&cfg, &mut rng))?;
            let taps: Vec<Tensor> = (0..4)
                .map(|_| uniform(&mut rng, &[1, grid.0 * grid.1, cfg.embed_dim], -1.0, 1.0))
                .collect();
            check_block(seed, &head.params, taps, 6, |p, t| {
                let mut h = head.clone();
                h.params = p.clone();
                h.forward(t, grid)
            })
        }
        "unet" => {
            let net = with_precision(Precision::F64, || UNet::new(1, 2, 2, &mut rng))?;
            let x = uniform(&mut rng, &[1, 1, 16, 16], -1.0, 1.0);
            check_block(seed, &net.params, vec![x], 6, |p, t| {
                let mut n = net.clone();
                n.params = p.clone();
                n.forward(&t[0])
            })
        }
        "weighted_cross_entropy" => {
            let logits = uniform(&mut rng, &[2, 3, 4, 4], -2.0, 2.0);
            let labels: Vec<u8> = (0..32).map(|_| [0, 1, 2, 255][rng.gen_range(0..4)]).collect();
            let weights: Vec<f64> = (0..3).map(|_| rng.gen_range(0.2..3.0)).collect();
            check_block(seed, &ParamSet::default(), vec![logits], 64, |_, t| {
                weighted_cross_entropy(&t[0], &labels, &weights, 255)
            })
        }
        "mae_decoder_loss" => {
            let cfg = decoder_config();
            let n = cfg.n_tokens();
            let decoder = with_precision(Precision::F64, || MaeDecoder::new(&cfg, &mut rng))?;
            let plans = (0..2)
                .map(|_| random_mask(n, 0.75, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let kept = plans[0].keep_ids.len();
            let latent = uniform(&mut rng, &[2, kept, cfg.embed_dim], -1.0, 1.0);
            let target = uniform(&mut rng, &[2, n, cfg.patch_len()], -1.0, 1.0);
            check_block(seed, &decoder.params, vec![latent], 12, |p, t| {
                let mut d = decoder.clone();
                d.params = p.clone();
                let pred = mae_decode(&t[0], &plans, &d)?;
                reconstruction_loss(&pred, &target, &plans, false)
            })
        }
        other => Err(Error::Config(format!("unknown gradient block {other:?}"))),
    }
}
