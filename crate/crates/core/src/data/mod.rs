//! Rasters, masks, synthetic scenes and on-disk formats.

pub mod checkpoint;
pub mod dataset;
pub mod pgm;
pub mod raster;
pub mod synth;

pub use checkpoint::{Checkpoint, NamedTensor};
pub use dataset::{format_manifest, parse_manifest, read_manifest, Dataset, ManifestEntry, Sample, Split};
pub use pgm::{read_mask_pgm, read_pgm, write_gray_pgm, write_mask_pgm};
pub use raster::{local_normalize, read_ascii_grid, tile_raster, write_ascii_grid, DemTile, LabelMask, Raster, IGNORE};
pub use synth::{components, corrupt_labels, synth_scene, Scene, SceneParams};
