//! `demmae pretrain`: MAE pre-training into a run directory.

use std::io::Write;
use std::path::Path;

use demmae_core::data::{write_gray_pgm, Checkpoint, Dataset};
use demmae_core::experiment::Task;
use demmae_core::persist::{checkpoint_step, mae_checkpoint, mae_from_checkpoint, restore_optimizer};
use demmae_core::{pretrain_loop, AdamW, Error, MaeModel, Result};
use demmae_tensor::Tensor;

use crate::args::PretrainArgs;
use crate::settings::{check_fresh_dir, create_dir, require_file, write_file, Settings};

/// Stream used for preview masks, apart from the training masks.
const PREVIEW_SEED: u64 = 0x5052_4556;

fn plane(t: &Tensor, side: usize) -> Vec<f32> {
    t.data()[..side * side].iter().map(|&v| v as f32).collect()
}

fn write_previews(dir: &Path, step: usize, model: &MaeModel, data: &Dataset) -> Result<()> {
    let c = model.config();
    let (image, _) = data.batch(&[0], c.in_channels)?;
    let plans = model.plans(1, PREVIEW_SEED, step as u64)?;
    let (recon, masked) = model.reconstruct(&image, &plans)?;
    for (tag, t) in [("input", &image), ("masked", &masked), ("recon", &recon)] {
        let mut bytes = Vec::new();
        write_gray_pgm(c.image_size, c.image_size, &plane(t, c.image_size), &mut bytes)?;
        write_file(&dir.join(format!("step{step:06}_{tag}.pgm")), bytes)?;
    }
    Ok(())
}

pub fn run(args: &PretrainArgs, settings: &Settings) -> Result<()> {
    require_file(&args.manifest, "manifest")?;
    check_fresh_dir(&args.run_dir)?;
    let plan = settings.pretrain.clone();
    if plan.total_iters == 0 || plan.batch_size == 0 {
        return Err(Error::Config("pretrain.total_iters and pretrain.batch_size must be positive".into()));
    }

    let mut optimizer = AdamW::new(plan.weight_decay);
    let (mut model, start) = match &args.resume {
        Some(path) => {
            require_file(path, "checkpoint")?;
            let ckpt = Checkpoint::load_file(path)?;
            let model = mae_from_checkpoint(&ckpt)?;
            restore_optimizer(&ckpt, &mut optimizer)?;
            let step = checkpoint_step(&ckpt)? as usize;
            if step >= plan.total_iters {
                return Err(Error::Config(format!(
                    "checkpoint is at step {step}, pretrain.total_iters is {}",
                    plan.total_iters
                )));
            }
            (model, step)
        }
        None => (MaeModel::new(&settings.model, settings.seed)?, 0),
    };
    let cfg = model.config().clone();
    let data = Dataset::load(&args.manifest, cfg.image_size, &Task::Building.legend())?;
    let pool: Vec<usize> = (0..data.len()).collect();
    let preview_every = settings.preview_every.unwrap_or((plan.total_iters / 4).max(1));

    create_dir(&args.run_dir)?;
    let previews = args.run_dir.join("previews");
    create_dir(&previews)?;
    let mut extra = vec![("manifest", args.manifest.display().to_string())];
    if let Some(r) = &args.resume {
        extra.push(("resume", r.display().to_string()));
    }
    write_file(&args.run_dir.join("config.txt"), settings.record("pretrain", &extra))?;
    let trace_path = args.run_dir.join("trace.txt");
    let mut trace = std::fs::File::create(&trace_path).map_err(|e| Error::io(&trace_path, e))?;

    let schedule = plan.schedule();
    let mut best: Option<(f64, usize, MaeModel)> = None;
    pretrain_loop(&mut model, &mut optimizer, &data, &pool, &plan, start, |step, loss, m| {
        writeln!(trace, "iter {step} loss {loss:.6} lr {:.6e}", schedule.at(step - 1)?)
            .map_err(|e| Error::io(&trace_path, e))?;
        if best.as_ref().is_none_or(|(b, _, _)| loss < *b) {
            best = Some((loss, step, m.clone()));
        }
        if preview_every > 0 && (step % preview_every == 0 || step == plan.total_iters) {
            write_previews(&previews, step, m, &data)?;
        }
        Ok(())
    })?;

    let (best_loss, best_step, best_model) = best.expect("at least one step");
    mae_checkpoint(&best_model, best_step as u64, None).save_file(&args.run_dir.join("best.ckpt"))?;
    mae_checkpoint(&model, plan.total_iters as u64, Some(&optimizer)).save_file(&args.run_dir.join("last.ckpt"))?;
    println!(
        "pre-trained steps {}..={} on {} tiles; lowest loss {best_loss:.6} at step {best_step}",
        start + 1,
        plan.total_iters,
        data.len()
    );
    Ok(())
}
