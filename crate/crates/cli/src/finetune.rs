//! `demmae finetune`: head training into a run directory.

use std::io::Write;
use std::path::Path;

use demmae_core::data::{write_mask_pgm, Checkpoint, Dataset, LabelMask, IGNORE};
use demmae_core::experiment::Task;
use demmae_core::metrics::predict;
use demmae_core::persist::{load_backbone, segmenter_checkpoint};
use demmae_core::{compute_class_weights, finetune_loop, rng, sample_curve, Error, HeadKind, Result, Segmenter};

use crate::args::FinetuneArgs;
use crate::settings::{check_fresh_dir, create_dir, require_file, write_file, Settings};

const CORRUPT_STREAM: u64 = 0x4452_4f50;
/// Validation tiles written to `previews/`.
const PREVIEW_TILES: usize = 4;

/// Checkpoint record key naming the segmentation task.
pub const TASK_KEY: &str = "task";

fn save(model: &Segmenter, step: usize, task: Task, path: &Path) -> Result<()> {
    let mut ckpt = segmenter_checkpoint(model, step as u64);
    ckpt.record.insert(TASK_KEY.into(), task.name().into());
    ckpt.save_file(path)
}

fn write_mask(path: &Path, side: usize, classes: Vec<u8>, task: Task) -> Result<()> {
    let mask = LabelMask::new(side, side, classes, &task.legend())?;
    let mut bytes = Vec::new();
    write_mask_pgm(&mask, &mut bytes)?;
    write_file(path, bytes)
}

pub fn run(args: &FinetuneArgs, settings: &Settings) -> Result<()> {
    let kind = HeadKind::parse(&args.head)?;
    let task = Task::parse(&args.task)?;
    require_file(&args.manifest, "manifest")?;
    if let Some(b) = &args.backbone {
        require_file(b, "backbone checkpoint")?;
    }
    check_fresh_dir(&args.run_dir)?;
    let mut plan = settings.finetune.clone();
    match (kind, args.freeze_backbone) {
        (HeadKind::UNet, Some(_)) => {
            return Err(Error::Config("--freeze-backbone does not apply to the unet head".into()));
        }
        (HeadKind::UNet, None) => plan.freeze_backbone = false,
        (HeadKind::UperNet, Some(f)) => plan.freeze_backbone = f,
        (HeadKind::UperNet, None) => {}
    }
    if kind == HeadKind::UNet && args.backbone.is_some() {
        return Err(Error::Config("the unet head takes no backbone".into()));
    }
    if let Some(f) = args.drop_fraction {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::Config(format!("--drop-fraction {f} outside [0, 1]")));
        }
    }
    if args.samples == Some(0) {
        return Err(Error::Config("--samples must be at least 1".into()));
    }
    plan.validate()?;

    let cfg = settings.model.clone();
    if cfg.n_classes != task.legend().len() {
        return Err(Error::Config(format!(
            "model.n_classes is {}, the {} task has {} classes",
            cfg.n_classes,
            task.name(),
            task.legend().len()
        )));
    }
    let mut model = Segmenter::new(kind, &cfg, settings.seed)?;
    if let Some(path) = &args.backbone {
        load_backbone(&mut model, &Checkpoint::load_file(path)?, args.adapt_channels)?;
    }
    let mut data = Dataset::load(&args.manifest, cfg.image_size, &task.legend())?;
    let train = match args.samples {
        Some(n) => sample_curve(&data.train, &[n], 0, settings.seed)?.train.remove(0).1,
        None => data.train.clone(),
    };
    let val = data.val.clone();
    if let Some(f) = args.drop_fraction {
        let seed = settings.seed;
        data.corrupt(&train, f, |i| rng::stream(seed, &[CORRUPT_STREAM, i as u64]))?;
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(format!(
            "manifest gives {} training and {} validation tiles; both must be non-empty",
            train.len(),
            val.len()
        )));
    }
    if !settings.class_weights_given {
        plan.class_weights = compute_class_weights(&data.histogram(&train))?;
    }

    create_dir(&args.run_dir)?;
    let mut extra = vec![
        ("manifest", args.manifest.display().to_string()),
        ("head", kind.name().to_string()),
        ("task", task.name().to_string()),
        ("freeze_backbone", plan.freeze_backbone.to_string()),
        ("train_tiles", train.len().to_string()),
        ("val_tiles", val.len().to_string()),
        ("class_weights", format!("{:?}", plan.class_weights)),
    ];
    if let Some(b) = &args.backbone {
        extra.push(("backbone", b.display().to_string()));
    }
    if let Some(f) = args.drop_fraction {
        extra.push(("drop_fraction", f.to_string()));
    }
    write_file(&args.run_dir.join("config.txt"), settings.record("finetune", &extra))?;
    let trace_path = args.run_dir.join("trace.txt");
    let mut trace = std::fs::File::create(&trace_path).map_err(|e| Error::io(&trace_path, e))?;

    let outcome = finetune_loop(model, &data, &train, &val, &plan, |entry| {
        writeln!(trace, "{entry}").map_err(|e| Error::io(&trace_path, e))
    })?;

    save(&outcome.best, outcome.best_iter, task, &args.run_dir.join("best.ckpt"))?;
    save(&outcome.last, plan.total_iters, task, &args.run_dir.join("last.ckpt"))?;
    let previews = args.run_dir.join("previews");
    create_dir(&previews)?;
    let shown = &val[..val.len().min(PREVIEW_TILES)];
    let preds = predict(&outcome.best, &data, shown, plan.batch_size)?;
    for (k, (pred, &i)) in preds.into_iter().zip(shown).enumerate() {
        write_mask(&previews.join(format!("val{k}_pred.pgm")), data.side, pred, task)?;
        let label = data.samples[i].label.iter().map(|&c| if c == IGNORE { 0 } else { c }).collect();
        write_mask(&previews.join(format!("val{k}_label.pgm")), data.side, label, task)?;
    }
    println!(
        "best {} IoU {:.6} at iteration {} of {}",
        task.name(),
        outcome.best_iou,
        outcome.best_iter,
        plan.total_iters
    );
    Ok(())
}
