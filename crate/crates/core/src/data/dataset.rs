//! Dataset manifests and in-memory tile datasets.

use std::fmt;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use demmae_tensor::Tensor;
use rand_chacha::ChaCha8Rng;

use super::pgm::read_mask_pgm;
use super::raster::{read_ascii_grid, tile_raster, LabelMask, IGNORE};
use super::synth::corrupt_labels;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Data(format!("unknown split {other:?}"))),
        }
    }
}

/// One `dem_path<TAB>mask_path<TAB>split` line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub dem: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    entries
        .iter()
        .map(|e| format!("{}\t{}\t{}\n", e.dem.display(), e.mask.display(), e.split))
        .collect()
}

/// Parses manifest text; blank lines and `#` comments are skipped.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        let [dem, mask, split] = parts[..] else {
            return Err(Error::Data(format!("manifest line {}: expected 3 tab-separated fields", i + 1)));
        };
        out.push(ManifestEntry {
            dem: dem.into(),
            mask: mask.into(),
            split: split
                .parse()
                .map_err(|e: Error| Error::Data(format!("manifest line {}: {e}", i + 1)))?,
        });
    }
    Ok(out)
}

/// Reads a manifest; relative paths resolve against its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(parse_manifest(&text)?
        .into_iter()
        .map(|e| ManifestEntry {
            dem: base.join(e.dem),
            mask: base.join(e.mask),
            split: e.split,
        })
        .collect())
}

/// A normalized tile and its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `side×side` values in `[0, 1]`.
    pub image: Vec<f32>,
    pub label: Vec<u8>,
    pub name: String,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub side: usize,
    pub legend: Vec<String>,
    pub samples: Vec<Sample>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl Dataset {
    /// Loads every manifest entry, cutting rasters into `side` tiles with
    /// stride `side`.
    pub fn load(manifest: &Path, side: usize, legend: &[&str]) -> Result<Self> {
        let entries = read_manifest(manifest)?;
        if entries.is_empty() {
            return Err(Error::Data(format!("manifest {} is empty", manifest.display())));
        }
        let mut ds = Dataset {
            side,
            legend: legend.iter().map(|s| s.to_string()).collect(),
            samples: Vec::new(),
            train: Vec::new(),
            val: Vec::new(),
        };
        for e in &entries {
            let open = |p: &Path| std::fs::File::open(p).map_err(|err| Error::io(p, err));
            let raster = read_ascii_grid(BufReader::new(open(&e.dem)?))?;
            let mask = read_mask_pgm(BufReader::new(open(&e.mask)?), legend)
                .map_err(|err| Error::Data(format!("{}: {err}", e.mask.display())))?;
            let tiles = tile_raster(&raster, Some(&mask), side, side)
                .map_err(|err| Error::Data(format!("{}: {err}", e.dem.display())))?;
            let stem = e.dem.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            for (tile, m) in tiles {
                let id = ds.samples.len();
                match e.split {
                    Split::Train => ds.train.push(id),
                    Split::Val => ds.val.push(id),
                }
                ds.samples.push(Sample {
                    image: tile.elevations,
                    label: m.expect("labels were supplied").classes,
                    name: format!("{stem}@{},{}", tile.origin.0, tile.origin.1),
                });
            }
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.legend.len()
    }

    /// `[B×C×side×side]` images (the single band repeated over `channels`)
    /// and the concatenated labels of `ids`.
    pub fn batch(&self, ids: &[usize], channels: usize) -> Result<(Tensor, Vec<u8>)> {
        let plane = self.side * self.side;
        let mut data = Vec::with_capacity(ids.len() * channels * plane);
        let mut labels = Vec::with_capacity(ids.len() * plane);
        for &i in ids {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| Error::Contract(format!("sample {i} out of range")))?;
            for _ in 0..channels {
                data.extend(s.image.iter().map(|&v| v as f64));
            }
            labels.extend_from_slice(&s.label);
        }
        let t = Tensor::new(data, &[ids.len(), channels, self.side, self.side])?;
        Ok((t, labels))
    }

    /// Pixel counts per class over `ids`.
    pub fn histogram(&self, ids: &[usize]) -> Vec<u64> {
        let mut h = vec![0; self.n_classes()];
        for &i in ids {
            for &c in &self.samples[i].label {
                if c != IGNORE && (c as usize) < h.len() {
                    h[c as usize] += 1;
                }
            }
        }
        h
    }

    /// Drops a `drop_fraction` share of foreground components from the
    /// labels of `ids`, each sample with its own stream from `rng_for`.
    pub fn corrupt(&mut self, ids: &[usize], drop_fraction: f64, mut rng_for: impl FnMut(usize) -> ChaCha8Rng) -> Result<()> {
        let legend: Vec<&str> = self.legend.iter().map(String::as_str).collect();
        for &i in ids {
            let s = &mut self.samples[i];
            let mask = LabelMask::new(self.side, self.side, std::mem::take(&mut s.label), &legend)?;
            s.label = corrupt_labels(&mask, drop_fraction, &mut rng_for(i))?.classes;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let entries = vec![
            ManifestEntry {
                dem: "a.asc".into(),
                mask: "a.pgm".into(),
                split: Split::Train,
            },
            ManifestEntry {
                dem: "b.asc".into(),
                mask: "b.pgm".into(),
                split: Split::Val,
            },
        ];
        assert_eq!(parse_manifest(&format_manifest(&entries)).unwrap(), entries);
    }

    #[test]
    fn manifest_errors_name_line() {
        let err = parse_manifest("a\tb\ttrain\nx\ty\n").unwrap_err();
        assert!(err.to_string().contains("line 2"));
        assert!(parse_manifest("a\tb\ttest\n").is_err());
    }
}
