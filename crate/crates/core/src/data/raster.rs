//! Elevation rasters, label masks, ESRI ASCII grids, per-tile min–max
//! normalization and tiling.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};

/// A full elevation raster as read from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub rows: usize,
    pub cols: usize,
    pub cellsize: f64,
    pub xllcorner: f64,
    pub yllcorner: f64,
    pub nodata: Option<f32>,
    /// Row-major, top row first.
    pub values: Vec<f32>,
}

impl Raster {
    pub fn new(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != rows * cols || rows == 0 || cols == 0 {
            return Err(Error::Data(format!("{} values for a {rows}x{cols} raster", values.len())));
        }
        Ok(Raster {
            rows,
            cols,
            cellsize: 1.0,
            xllcorner: 0.0,
            yllcorner: 0.0,
            nodata: None,
            values,
        })
    }

    pub fn is_nodata(&self, v: f32) -> bool {
        self.nodata == Some(v)
    }
}

/// Square elevation window cut from a raster.
#[derive(Clone, Debug, PartialEq)]
pub struct DemTile {
    pub side: usize,
    pub elevations: Vec<f32>,
    pub nodata: Option<f32>,
    /// `(row, col)` of the top-left cell within the source raster.
    pub origin: (usize, usize),
    pub normalized: bool,
}

impl DemTile {
    pub fn new(side: usize, elevations: Vec<f32>) -> Result<Self> {
        if elevations.len() != side * side || side == 0 {
            return Err(Error::Data(format!("{} elevations for a {side}x{side} tile", elevations.len())));
        }
        Ok(DemTile {
            side,
            elevations,
            nodata: None,
            origin: (0, 0),
            normalized: false,
        })
    }

    pub fn to_raster(&self) -> Raster {
        Raster {
            nodata: self.nodata,
            ..Raster::new(self.side, self.side, self.elevations.clone()).expect("square tile")
        }
    }
}

/// Value written to mask pixels that are excluded from losses and scores.
pub const IGNORE: u8 = 255;

/// Per-pixel class ids with a name for each id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    pub rows: usize,
    pub cols: usize,
    pub classes: Vec<u8>,
    pub legend: Vec<String>,
}

impl LabelMask {
    pub fn new(rows: usize, cols: usize, classes: Vec<u8>, legend: &[&str]) -> Result<Self> {
        let mask = LabelMask {
            rows,
            cols,
            classes,
            legend: legend.iter().map(|s| s.to_string()).collect(),
        };
        mask.validate()?;
        Ok(mask)
    }

    /// Binary `background`/`name` legend.
    pub fn binary(rows: usize, cols: usize, classes: Vec<u8>, name: &str) -> Result<Self> {
        Self::new(rows, cols, classes, &["background", name])
    }

    pub fn n_classes(&self) -> usize {
        self.legend.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() != self.rows * self.cols {
            return Err(Error::Data(format!(
                "{} labels for a {}x{} mask",
                self.classes.len(),
                self.rows,
                self.cols
            )));
        }
        if let Some(i) = self
            .classes
            .iter()
            .position(|&c| c != IGNORE && c as usize >= self.legend.len())
        {
            return Err(Error::Data(format!(
                "label {} at row {} col {} is not in the legend",
                self.classes[i],
                i / self.cols,
                i % self.cols
            )));
        }
        Ok(())
    }

    /// Pixel count per class, ignoring [`IGNORE`].
    pub fn histogram(&self) -> Vec<u64> {
        let mut h = vec![0; self.legend.len()];
        for &c in &self.classes {
            if c != IGNORE {
                h[c as usize] += 1;
            }
        }
        h
    }
}

/// Parses an ESRI ASCII grid. Header keys are case-insensitive; `ncols`,
/// `nrows` and `cellsize` are required, corners default to 0 and
/// `NODATA_value` is optional.
pub fn read_ascii_grid(source: impl BufRead) -> Result<Raster> {
    let mut header: Vec<(String, String)> = Vec::new();
    let mut values: Vec<f32> = Vec::new();
    let mut expected = None;
    for (i, line) in source.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Format(format!("line {lineno}: {e}")))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let starts_alpha = trimmed.chars().next().is_some_and(|c| c.is_ascii_alphabetic());
        if expected.is_none() && starts_alpha {
            let mut parts = trimmed.split_whitespace();
            let (Some(k), Some(v), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Format(format!("line {lineno}: malformed header line {trimmed:?}")));
            };
            header.push((k.to_ascii_lowercase(), v.to_string()));
            continue;
        }
        if expected.is_none() {
            expected = Some(grid_header(&header, lineno)?);
        }
        for tok in trimmed.split_whitespace() {
            let v: f32 = tok
                .parse()
                .map_err(|_| Error::Format(format!("line {lineno}: invalid value {tok:?}")))?;
            values.push(v);
        }
    }
    let mut raster = match expected {
        Some(r) => r,
        None => grid_header(&header, header.len() + 1)?,
    };
    if values.len() != raster.rows * raster.cols {
        return Err(Error::Format(format!(
            "body has {} values, header declares {}x{}",
            values.len(),
            raster.rows,
            raster.cols
        )));
    }
    raster.values = values;
    Ok(raster)
}

fn grid_header(header: &[(String, String)], lineno: usize) -> Result<Raster> {
    let get = |key: &str| header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
    let num = |key: &str| -> Result<Option<f64>> {
        get(key)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::Format(format!("line {lineno}: invalid {key} {v:?}")))
            })
            .transpose()
    };
    let need = |key: &str| -> Result<f64> {
        num(key)?.ok_or_else(|| Error::Format(format!("line {lineno}: header lacks {key}")))
    };
    let (cols, rows) = (need("ncols")?, need("nrows")?);
    if cols < 1.0 || rows < 1.0 || cols.fract() != 0.0 || rows.fract() != 0.0 {
        return Err(Error::Format(format!("line {lineno}: bad extents {rows}x{cols}")));
    }
    let cellsize = need("cellsize")?;
    Ok(Raster {
        rows: rows as usize,
        cols: cols as usize,
        cellsize,
        xllcorner: num("xllcorner")?.or(num("xllcenter")?).unwrap_or(0.0),
        yllcorner: num("yllcorner")?.or(num("yllcenter")?).unwrap_or(0.0),
        nodata: num("nodata_value")?.map(|v| v as f32),
        values: Vec::new(),
    })
}

pub fn write_ascii_grid(raster: &Raster, mut sink: impl Write) -> std::io::Result<()> {
    writeln!(sink, "ncols {}", raster.cols)?;
    writeln!(sink, "nrows {}", raster.rows)?;
    writeln!(sink, "xllcorner {}", raster.xllcorner)?;
    writeln!(sink, "yllcorner {}", raster.yllcorner)?;
    writeln!(sink, "cellsize {}", raster.cellsize)?;
    if let Some(nd) = raster.nodata {
        writeln!(sink, "NODATA_value {nd}")?;
    }
    for row in raster.values.chunks(raster.cols) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(sink, "{}", line.join(" "))?;
    }
    Ok(())
}

/// `(v − min)/(max − min)` over valid cells; nodata cells become 0 and a
/// flat tile becomes all zeros.
pub fn local_normalize(tile: &DemTile) -> DemTile {
    let valid = |v: &f32| tile.nodata != Some(*v) && v.is_finite();
    let (min, max) = tile
        .elevations
        .iter()
        .filter(|v| valid(v))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v as f64), hi.max(v as f64))
        });
    let range = max - min;
    let elevations = tile
        .elevations
        .iter()
        .map(|v| {
            if !valid(v) || range.is_nan() || range <= 0.0 {
                0.0
            } else {
                ((*v as f64 - min) / range) as f32
            }
        })
        .collect();
    DemTile {
        elevations,
        nodata: None,
        normalized: true,
        ..tile.clone()
    }
}

/// Row-major `tile_size` windows at `stride`; windows that would cross the
/// raster edge are dropped. Each tile is normalized after cutting.
pub fn tile_raster(
    raster: &Raster,
    labels: Option<&LabelMask>,
    tile_size: usize,
    stride: usize,
) -> Result<Vec<(DemTile, Option<LabelMask>)>> {
    if tile_size == 0 || stride == 0 {
        return Err(Error::Config("tile size and stride must be positive".into()));
    }
    if tile_size > raster.rows || tile_size > raster.cols {
        return Err(Error::Config(format!(
            "tile {tile_size} larger than raster {}x{}",
            raster.rows, raster.cols
        )));
    }
    if let Some(l) = labels {
        if (l.rows, l.cols) != (raster.rows, raster.cols) {
            return Err(Error::Data(format!(
                "mask {}x{} does not match raster {}x{}",
                l.rows, l.cols, raster.rows, raster.cols
            )));
        }
    }
    let mut out = Vec::new();
    for r0 in (0..=raster.rows - tile_size).step_by(stride) {
        for c0 in (0..=raster.cols - tile_size).step_by(stride) {
            let cut = |src: &[f32]| -> Vec<f32> {
                (r0..r0 + tile_size)
                    .flat_map(|r| src[r * raster.cols + c0..r * raster.cols + c0 + tile_size].iter().copied())
                    .collect()
            };
            let raw = DemTile {
                side: tile_size,
                elevations: cut(&raster.values),
                nodata: raster.nodata,
                origin: (r0, c0),
                normalized: false,
            };
            let mask = labels.map(|l| LabelMask {
                rows: tile_size,
                cols: tile_size,
                classes: (r0..r0 + tile_size)
                    .flat_map(|r| l.classes[r * l.cols + c0..r * l.cols + c0 + tile_size].iter().copied())
                    .collect(),
                legend: l.legend.clone(),
            });
            out.push((local_normalize(&raw), mask));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_small_grid() {
        let text = "ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value -9999\n1 2\n3 -9999\n";
        let r = read_ascii_grid(text.as_bytes()).unwrap();
        assert_eq!((r.rows, r.cols), (2, 2));
        assert_eq!(r.values, vec![1.0, 2.0, 3.0, -9999.0]);
        assert!(r.is_nodata(r.values[3]));
    }

    #[test]
    fn malformed_grid_reports_line() {
        let text = "ncols 2\nnrows 2\ncellsize 1\n1 2\n3 x\n";
        let err = read_ascii_grid(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 5"), "{err}");
        let err = read_ascii_grid("ncols 2\nnrows 2\ncellsize 1\n1 2 3\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        let err = read_ascii_grid("ncols 2\ncellsize 1\n1 2\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("nrows"));
    }

    #[test]
    fn normalize_examples() {
        let t = DemTile::new(2, vec![10.0, 20.0, 30.0, 40.0]).unwrap();
        let n = local_normalize(&t);
        assert_eq!(n.elevations, vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
        assert!(n.normalized);
        let flat = DemTile::new(2, vec![5.0; 4]).unwrap();
        assert_eq!(local_normalize(&flat).elevations, vec![0.0; 4]);
    }

    #[test]
    fn normalize_maps_nodata_to_zero() {
        let mut t = DemTile::new(2, vec![-9999.0, 2.0, 4.0, 3.0]).unwrap();
        t.nodata = Some(-9999.0);
        assert_eq!(local_normalize(&t).elevations, vec![0.0, 0.0, 1.0, 0.5]);
    }

    #[test]
    fn tiling_drops_remainder() {
        let r = Raster::new(450, 450, vec![0.0; 450 * 450]).unwrap();
        assert_eq!(tile_raster(&r, None, 224, 224).unwrap().len(), 4);
        let r = Raster::new(448, 448, vec![0.0; 448 * 448]).unwrap();
        let tiles = tile_raster(&r, None, 224, 224).unwrap();
        assert_eq!(tiles.len(), 4);
        assert_eq!(tiles[1].0.origin, (0, 224));
        assert!(matches!(tile_raster(&r, None, 500, 1), Err(Error::Config(_))));
    }

    #[test]
    fn mask_validation_names_pixel() {
        let err = LabelMask::binary(2, 2, vec![0, 1, 0, 4], "road").unwrap_err();
        assert!(err.to_string().contains("row 1 col 1"));
        assert!(LabelMask::binary(2, 2, vec![0, 1, 255, 0], "road").is_ok());
    }
}
