//! Moving models and optimizer state in and out of [`Checkpoint`]s.

use std::collections::BTreeMap;

use demmae_tensor::Tensor;

use crate::config::ModelConfig;
use crate::data::Checkpoint;
use crate::error::{Error, Result};
use crate::mae::MaeModel;
use crate::nn::ParamSet;
use crate::optim::{AdamW, Moments};
use crate::seg::{HeadKind, Segmenter};

const PATCH_EMBED: &str = "encoder.patch_embed.weight";
/// Keys that must agree for a backbone to be loadable.
const BACKBONE_KEYS: [&str; 5] = ["image_size", "patch_size", "embed_dim", "encoder_blocks", "encoder_heads"];

fn push_set(ckpt: &mut Checkpoint, set: &ParamSet) {
    for (name, t) in set.iter() {
        ckpt.push(name, t.shape(), t.to_f32_vec());
    }
}

fn header(kind: &str, config: &ModelConfig, step: u64) -> Checkpoint {
    let mut c = Checkpoint {
        record: config.to_record(),
        tensors: Vec::new(),
    };
    c.record.insert("kind".into(), kind.into());
    c.record.insert("step".into(), step.to_string());
    c
}

pub fn checkpoint_kind(ckpt: &Checkpoint) -> Result<&str> {
    ckpt.record_value("kind")
}

pub fn checkpoint_step(ckpt: &Checkpoint) -> Result<u64> {
    let s = ckpt.record_value("step")?;
    s.parse().map_err(|_| Error::Format(format!("invalid step {s:?}")))
}

pub fn checkpoint_config(ckpt: &Checkpoint) -> Result<ModelConfig> {
    ModelConfig::from_record(&ckpt.record)
}

/// Rejects checkpoints whose backbone geometry differs from `model`. A
/// channel-count difference is allowed only when `adapt_channels` is set.
pub fn check_backbone_compat(ckpt: &Checkpoint, model: &ModelConfig, adapt_channels: bool) -> Result<()> {
    let want = model.to_record();
    let mut keys: Vec<&str> = BACKBONE_KEYS.to_vec();
    if !adapt_channels {
        keys.push("in_channels");
    }
    for key in keys {
        let have = ckpt.record_value(key)?;
        if have != want[key] {
            return Err(Error::Format(format!(
                "checkpoint {key}={have} does not match model {key}={}",
                want[key]
            )));
        }
    }
    Ok(())
}

/// Adapts a `[p²·C_src × D]` patch-embedding weight to `C_dst` channels:
/// many→1 averages over channels, 1→many tiles and divides by `C_dst`.
pub fn adapt_patch_embed(values: &[f32], src_channels: usize, dst_channels: usize, patch_area: usize) -> Result<Vec<f32>> {
    let dim = values.len() / (src_channels * patch_area);
    let row = |c: usize, ij: usize| &values[(c * patch_area + ij) * dim..(c * patch_area + ij + 1) * dim];
    let mut out = Vec::with_capacity(dst_channels * patch_area * dim);
    if dst_channels == 1 {
        for ij in 0..patch_area {
            for d in 0..dim {
                let s: f64 = (0..src_channels).map(|c| row(c, ij)[d] as f64).sum();
                out.push((s / src_channels as f64) as f32);
            }
        }
    } else if src_channels == 1 {
        for _ in 0..dst_channels {
            for ij in 0..patch_area {
                out.extend(row(0, ij).iter().map(|&v| (v as f64 / dst_channels as f64) as f32));
            }
        }
    } else {
        return Err(Error::Format(format!(
            "no channel adapter from {src_channels} to {dst_channels} channels"
        )));
    }
    Ok(out)
}

/// Replaces every parameter of `set` with its checkpoint counterpart. All
/// tensors are validated before any is written.
pub fn load_params(set: &mut ParamSet, ckpt: &Checkpoint, adapt: Option<(usize, usize, usize)>) -> Result<()> {
    let mut staged = Vec::with_capacity(set.len());
    for (name, t) in set.iter() {
        let src = ckpt
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
        let values = if src.shape == t.shape() {
            src.values.clone()
        } else if let (Some((sc, dc, area)), true) = (adapt, name == PATCH_EMBED) {
            if src.shape != [sc * area, t.shape()[1]] || t.shape() != [dc * area, t.shape()[1]] {
                return Err(Error::Format(format!(
                    "tensor {name}: checkpoint {:?} cannot adapt to {:?}",
                    src.shape,
                    t.shape()
                )));
            }
            adapt_patch_embed(&src.values, sc, dc, area)?
        } else {
            return Err(Error::Format(format!(
                "tensor {name}: checkpoint shape {:?}, model shape {:?}",
                src.shape,
                t.shape()
            )));
        };
        staged.push(Tensor::from_f32(&values, t.shape())?.with_requires_grad(t.requires_grad()));
    }
    for ((_, slot), t) in set.iter_mut().zip(staged) {
        *slot = t;
    }
    Ok(())
}

fn push_optimizer(ckpt: &mut Checkpoint, opt: &AdamW, sets: &[&ParamSet]) {
    ckpt.record.insert("optim.step".into(), opt.step_count().to_string());
    for set in sets {
        for (name, t) in set.iter() {
            if let Some(st) = opt.state().get(name) {
                let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect();
                ckpt.push(format!("optim.m.{name}"), t.shape(), f(&st.m));
                ckpt.push(format!("optim.v.{name}"), t.shape(), f(&st.v));
            }
        }
    }
}

/// Restores optimizer moments saved by [`mae_checkpoint`].
pub fn restore_optimizer(ckpt: &Checkpoint, opt: &mut AdamW) -> Result<()> {
    let step = match ckpt.record.get("optim.step") {
        Some(s) => s.parse().map_err(|_| Error::Format(format!("invalid optim.step {s:?}")))?,
        None => return Ok(()),
    };
    let mut state = BTreeMap::new();
    for t in &ckpt.tensors {
        let Some(name) = t.name.strip_prefix("optim.m.") else { continue };
        let v = ckpt
            .get(&format!("optim.v.{name}"))
            .ok_or_else(|| Error::Format(format!("checkpoint lacks second moment of {name}")))?;
        let f = |x: &[f32]| x.iter().map(|&y| y as f64).collect();
        state.insert(
            name.to_string(),
            Moments {
                m: f(&t.values),
                v: f(&v.values),
            },
        );
    }
    opt.restore(step, state);
    Ok(())
}

/// Encoder, decoder and (optionally) optimizer state of an MAE.
pub fn mae_checkpoint(model: &MaeModel, step: u64, opt: Option<&AdamW>) -> Checkpoint {
    let mut c = header("mae", model.config(), step);
    c.record.insert("norm_target".into(), model.norm_target.to_string());
    push_set(&mut c, &model.encoder.params);
    push_set(&mut c, &model.decoder.params);
    if let Some(opt) = opt {
        push_optimizer(&mut c, opt, &[&model.encoder.params, &model.decoder.params]);
    }
    c
}

pub fn mae_from_checkpoint(ckpt: &Checkpoint) -> Result<MaeModel> {
    if checkpoint_kind(ckpt)? != "mae" {
        return Err(Error::Format(format!("expected an mae checkpoint, got {}", checkpoint_kind(ckpt)?)));
    }
    let cfg = checkpoint_config(ckpt)?;
    let mut model = MaeModel::new(&cfg, 0)?;
    model.norm_target = ckpt.record.get("norm_target").is_some_and(|v| v == "true");
    load_params(&mut model.encoder.params, ckpt, None)?;
    load_params(&mut model.decoder.params, ckpt, None)?;
    Ok(model)
}

pub fn segmenter_checkpoint(model: &Segmenter, step: u64) -> Checkpoint {
    let mut c = header(model.kind().name(), model.config(), step);
    for set in model.param_sets() {
        push_set(&mut c, set);
    }
    c
}

pub fn segmenter_from_checkpoint(ckpt: &Checkpoint) -> Result<Segmenter> {
    let kind = HeadKind::parse(checkpoint_kind(ckpt)?).map_err(|e| Error::Format(e.to_string()))?;
    let cfg = checkpoint_config(ckpt)?;
    let mut model = Segmenter::new(kind, &cfg, 0)?;
    for set in model.param_sets_mut() {
        load_params(set, ckpt, None)?;
    }
    Ok(model)
}

/// Copies encoder weights from an MAE or UperNet checkpoint into the
/// segmenter's backbone.
pub fn load_backbone(model: &mut Segmenter, ckpt: &Checkpoint, adapt_channels: bool) -> Result<()> {
    let cfg = model.config().clone();
    check_backbone_compat(ckpt, &cfg, adapt_channels)?;
    let src_channels: usize = ckpt
        .record_value("in_channels")?
        .parse()
        .map_err(|_| Error::Format("invalid in_channels".into()))?;
    let adapt = adapt_channels.then_some((src_channels, cfg.in_channels, cfg.patch_size * cfg.patch_size));
    let backbone = model
        .backbone_mut()
        .ok_or_else(|| Error::Config("this head has no backbone to load".into()))?;
    load_params(&mut backbone.params, ckpt, adapt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_tile_adapters() {
        // 3 channels, patch area 2, dim 1
        let w = [1.0, 2.0, 3.0, 4.0, 5.0, 9.0];
        assert_eq!(adapt_patch_embed(&w, 3, 1, 2).unwrap(), vec![3.0, 5.0]);
        let t = adapt_patch_embed(&[3.0, 6.0], 1, 3, 2).unwrap();
        assert_eq!(t, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn mae_round_trip_bit_exact() {
        let model = MaeModel::new(&ModelConfig::tiny(), 4).unwrap();
        let ckpt = mae_checkpoint(&model, 12, None);
        let back = mae_from_checkpoint(&Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.encoder.params.to_bytes(), model.encoder.params.to_bytes());
        assert_eq!(back.decoder.params.to_bytes(), model.decoder.params.to_bytes());
        assert_eq!(checkpoint_step(&ckpt).unwrap(), 12);
    }

    #[test]
    fn channel_mismatch_needs_adapter() {
        let mut cfg3 = ModelConfig::tiny();
        cfg3.in_channels = 3;
        let ckpt = mae_checkpoint(&MaeModel::new(&cfg3, 1).unwrap(), 0, None);
        let mut seg = Segmenter::new(HeadKind::UperNet, &ModelConfig::tiny(), 0).unwrap();
        let before = seg.backbone().unwrap().params.to_bytes();
        let err = load_backbone(&mut seg, &ckpt, false).unwrap_err();
        assert!(matches!(err, Error::Format(_)) && err.to_string().contains("in_channels"));
        assert_eq!(seg.backbone().unwrap().params.to_bytes(), before);
        load_backbone(&mut seg, &ckpt, true).unwrap();
        let src = ckpt.get(PATCH_EMBED).unwrap();
        let dst = seg.backbone().unwrap().params.by_name(PATCH_EMBED).unwrap().to_f32_vec();
        let expect = adapt_patch_embed(&src.values, 3, 1, 16).unwrap();
        assert_eq!(dst, expect);
    }
}
