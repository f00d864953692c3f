//! Finite-difference checks of the composite blocks in 64-bit mode, ten
//! random instances each.

use demmae_core::gradsuite::{run_block, BLOCKS};
use demmae_core::mae::{mae_decode, random_mask, reconstruction_loss, MaeDecoder};
use demmae_core::ModelConfig;
use demmae_tensor::gradsuite::{uniform, INSTANCES, TOL};
use demmae_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn assert_block(name: &str) {
    assert!(BLOCKS.contains(&name));
    for seed in 0..INSTANCES {
        let report = run_block(name, seed).unwrap();
        assert!(report.passes(TOL), "{name} seed {seed}: {report:?}");
    }
}

#[test]
fn transformer_block() {
    assert_block("transformer_block");
}

#[test]
fn upernet_head() {
    assert_block("upernet_head");
}

#[test]
fn unet_on_16x16() {
    assert_block("unet");
}

#[test]
fn weighted_cross_entropy_grads() {
    assert_block("weighted_cross_entropy");
}

#[test]
fn mae_decoder_and_loss() {
    assert_block("mae_decoder_loss");
}

#[test]
fn unknown_block_is_an_error() {
    assert!(run_block("lstm", 0).is_err());
}

#[test]
fn decoder_gradient_reaches_every_parameter() {
    let mut cfg = ModelConfig::tiny();
    cfg.image_size = 8;
    cfg.patch_size = 2;
    cfg.embed_dim = 6;
    cfg.decoder_dim = 4;
    cfg.decoder_blocks = 1;
    cfg.decoder_heads = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let decoder = MaeDecoder::new(&cfg, &mut rng).unwrap();
    let plans: Vec<_> = (0..2).map(|_| random_mask(cfg.n_tokens(), 0.75, &mut rng).unwrap()).collect();
    let latent: Tensor =
        uniform(&mut rng, &[2, plans[0].keep_ids.len(), cfg.embed_dim], -1.0, 1.0).with_requires_grad(true);
    let target = uniform(&mut rng, &[2, cfg.n_tokens(), cfg.patch_len()], -1.0, 1.0);
    let pred = mae_decode(&latent, &plans, &decoder).unwrap();
    reconstruction_loss(&pred, &target, &plans, false).unwrap().backward().unwrap();
    assert!(latent.grad().unwrap().iter().any(|g| *g != 0.0));
    for (name, t) in decoder.params.iter() {
        let g = t.grad().unwrap_or_else(|| panic!("{name} has no gradient"));
        assert!(g.iter().any(|v| *v != 0.0), "{name} gradient is zero");
    }
}
