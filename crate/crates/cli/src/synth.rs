//! `demmae synth`: synthetic scenes on disk.

use std::path::PathBuf;

use demmae_core::data::{format_manifest, write_ascii_grid, write_mask_pgm, ManifestEntry, Scene, Split};
use demmae_core::experiment::{synth_scenes, Task};
use demmae_core::{rng, Error, Result};
use rand::seq::SliceRandom;

use crate::args::SynthArgs;
use crate::settings::{check_fresh_dir, Settings};

const SPLIT_STREAM: u64 = 0x5350_4c54;

/// Training share of the split, in percent.
pub const TRAIN_PERCENT: usize = 85;

/// Scene ids `0..count` tagged train or val by a seeded shuffle.
pub fn split_scenes(count: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut rng::stream(seed, &[SPLIT_STREAM]));
    let n_train = count * TRAIN_PERCENT / 100;
    let mut split = vec![Split::Val; count];
    for &i in &order[..n_train] {
        split[i] = Split::Train;
    }
    split
}

pub fn manifest_name(task: Task) -> String {
    format!("{}.txt", task.name())
}

/// Files written so far; removed again if a later write fails.
struct Output {
    dir: PathBuf,
    created_dir: bool,
    files: Vec<PathBuf>,
}

impl Output {
    fn write(&mut self, name: &str, fill: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut bytes = Vec::new();
        fill(&mut bytes)?;
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.files.push(path);
        Ok(())
    }

    fn discard(self) {
        for f in &self.files {
            let _ = std::fs::remove_file(f);
        }
        if self.created_dir {
            let _ = std::fs::remove_dir(&self.dir);
        }
    }
}

fn write_scene(out: &mut Output, stem: &str, scene: &Scene) -> Result<()> {
    out.write(&format!("{stem}.asc"), |b| {
        write_ascii_grid(&scene.dem.to_raster(), b).map_err(|e| Error::io(stem, e))
    })?;
    for (task, mask) in [(Task::Building, &scene.buildings), (Task::Road, &scene.roads)] {
        out.write(&format!("{stem}_{}.pgm", task.name()), |b| write_mask_pgm(mask, b))?;
    }
    Ok(())
}

fn write_all(out: &mut Output, scenes: &[Scene], split: &[Split]) -> Result<()> {
    for (i, scene) in scenes.iter().enumerate() {
        write_scene(out, &format!("scene{i:04}"), scene)?;
    }
    for task in [Task::Building, Task::Road] {
        let entries: Vec<ManifestEntry> = split
            .iter()
            .enumerate()
            .map(|(i, &split)| ManifestEntry {
                dem: format!("scene{i:04}.asc").into(),
                mask: format!("scene{i:04}_{}.pgm", task.name()).into(),
                split,
            })
            .collect();
        out.write(&manifest_name(task), |b| {
            b.extend_from_slice(format_manifest(&entries).as_bytes());
            Ok(())
        })?;
    }
    Ok(())
}

pub fn run(args: &SynthArgs, settings: &Settings) -> Result<()> {
    let size = args.size.unwrap_or(settings.model.image_size);
    if args.count == 0 {
        return Err(Error::Config("--count must be at least 1".into()));
    }
    check_fresh_dir(&args.out)?;
    let scenes = synth_scenes(args.count, size, settings.seed)?;
    let split = split_scenes(args.count, settings.seed);

    let created_dir = !args.out.exists();
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let mut out = Output {
        dir: args.out.clone(),
        created_dir,
        files: Vec::new(),
    };
    if let Err(e) = write_all(&mut out, &scenes, &split) {
        out.discard();
        return Err(e);
    }
    let n_train = split.iter().filter(|s| **s == Split::Train).count();
    println!(
        "wrote {} scenes ({n_train} train / {} val) to {}",
        args.count,
        args.count - n_train,
        args.out.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_85_15_and_seeded() {
        let s = split_scenes(500, 9);
        assert_eq!(s.iter().filter(|v| **v == Split::Train).count(), 425);
        assert_eq!(s, split_scenes(500, 9));
        assert_ne!(s, split_scenes(500, 10));
    }
}
