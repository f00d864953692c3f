//! `demmae eval` and `demmae predict`: read-only use of a checkpoint.

use std::io::BufReader;
use std::path::Path;

use demmae_core::data::{local_normalize, read_ascii_grid, write_mask_pgm, Checkpoint, Dataset, DemTile, LabelMask, Raster};
use demmae_core::experiment::Task;
use demmae_core::persist::segmenter_from_checkpoint;
use demmae_core::seg::argmax_classes;
use demmae_core::{evaluate, Error, Result, Segmenter};
use demmae_tensor::Tensor;

use crate::args::{EvalArgs, PredictArgs};
use crate::finetune::TASK_KEY;
use crate::settings::{require_file, write_file};

const EVAL_BATCH: usize = 8;

fn load_model(path: &Path) -> Result<(Segmenter, Task)> {
    require_file(path, "checkpoint")?;
    let ckpt = Checkpoint::load_file(path)?;
    let task = match ckpt.record.get(TASK_KEY) {
        Some(t) => Task::parse(t).map_err(|e| Error::Format(e.to_string()))?,
        None => Task::Building,
    };
    Ok((segmenter_from_checkpoint(&ckpt)?, task))
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    require_file(&args.manifest, "manifest")?;
    if !matches!(args.split.as_str(), "train" | "val" | "all") {
        return Err(Error::Config(format!("unknown split {:?} (expected train, val or all)", args.split)));
    }
    let (model, task) = load_model(&args.checkpoint)?;
    let data = Dataset::load(&args.manifest, model.config().image_size, &task.legend())?;
    let ids: Vec<usize> = match args.split.as_str() {
        "train" => data.train.clone(),
        "val" => data.val.clone(),
        _ => (0..data.len()).collect(),
    };
    let report = evaluate(&model, &data, &ids, EVAL_BATCH, args.common.seed)?;
    println!("{report}");
    print!("{}", report.records());
    Ok(())
}

/// Window origins covering `0..len` with windows of `side`; the last one
/// is pulled back to end exactly at `len`.
pub fn window_starts(len: usize, side: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..=len - side).step_by(side).collect();
    if starts.last() != Some(&(len - side)) {
        starts.push(len - side);
    }
    starts
}

/// Class map of a whole raster, segmented one normalized window at a time.
pub fn segment_raster(model: &Segmenter, raster: &Raster) -> Result<Vec<u8>> {
    let c = model.config();
    let side = c.image_size;
    if raster.rows < side || raster.cols < side {
        return Err(Error::Data(format!(
            "raster {}x{} is smaller than the {side}x{side} model input",
            raster.rows, raster.cols
        )));
    }
    let mut out = vec![0u8; raster.rows * raster.cols];
    for r0 in window_starts(raster.rows, side) {
        for c0 in window_starts(raster.cols, side) {
            let cut: Vec<f32> = (r0..r0 + side)
                .flat_map(|r| raster.values[r * raster.cols + c0..r * raster.cols + c0 + side].iter().copied())
                .collect();
            let tile = local_normalize(&DemTile {
                side,
                elevations: cut,
                nodata: raster.nodata,
                origin: (r0, c0),
                normalized: false,
            });
            let mut image = Vec::with_capacity(c.in_channels * side * side);
            for _ in 0..c.in_channels {
                image.extend(tile.elevations.iter().map(|&v| v as f64));
            }
            let image = Tensor::new(image, &[1, c.in_channels, side, side])?;
            let classes = argmax_classes(&model.logits(&image)?)?;
            for r in 0..side {
                let dst = (r0 + r) * raster.cols + c0;
                out[dst..dst + side].copy_from_slice(&classes[r * side..(r + 1) * side]);
            }
        }
    }
    Ok(out)
}

pub fn predict(args: &PredictArgs) -> Result<()> {
    require_file(&args.dem, "DEM")?;
    let (model, task) = load_model(&args.checkpoint)?;
    let file = std::fs::File::open(&args.dem).map_err(|e| Error::io(&args.dem, e))?;
    let raster = read_ascii_grid(BufReader::new(file))?;
    let classes = segment_raster(&model, &raster)?;
    let mask = LabelMask::new(raster.rows, raster.cols, classes, &task.legend())?;
    let mut bytes = Vec::new();
    write_mask_pgm(&mask, &mut bytes)?;
    write_file(&args.out, bytes)?;
    let fg = mask.classes.iter().filter(|&&c| c != 0).count();
    println!(
        "wrote {}x{} {} mask ({fg} foreground pixels) to {}",
        raster.cols,
        raster.rows,
        task.name(),
        args.out.display()
    );
    Ok(())
}
