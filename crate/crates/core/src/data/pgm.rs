//! Binary greymap (P5) output for masks and previews.

use std::io::{Read, Write};

use super::raster::{LabelMask, IGNORE};
use crate::error::{Error, Result};

fn scale(n_classes: usize) -> f64 {
    255.0 / (n_classes.max(2) - 1) as f64
}

/// Writes `mask` as P5 with class ids spread over `0..=255`. Ignore pixels
/// cannot be represented and are rejected.
pub fn write_mask_pgm(mask: &LabelMask, mut sink: impl Write) -> Result<()> {
    let k = mask.n_classes();
    if k > 256 {
        return Err(Error::Data(format!("{k} classes do not fit in a greymap")));
    }
    if let Some(i) = mask.classes.iter().position(|&c| c == IGNORE || c as usize >= k) {
        return Err(Error::Data(format!(
            "label {} at row {} col {} cannot be written as a class greymap",
            mask.classes[i],
            i / mask.cols,
            i % mask.cols
        )));
    }
    let s = scale(k);
    let pixels: Vec<u8> = mask.classes.iter().map(|&c| (c as f64 * s).round() as u8).collect();
    write_pgm(mask.cols, mask.rows, &pixels, &mut sink)
}

/// Reads a mask written by [`write_mask_pgm`] for a `legend.len()`-class
/// legend.
pub fn read_mask_pgm(source: impl Read, legend: &[&str]) -> Result<LabelMask> {
    let (w, h, pixels) = read_pgm(source)?;
    let s = scale(legend.len());
    let classes = pixels.iter().map(|&v| (v as f64 / s).round() as u8).collect();
    LabelMask::new(h, w, classes, legend)
}

/// Greyscale preview of values in `[0, 1]` (clamped).
pub fn write_gray_pgm(cols: usize, rows: usize, values: &[f32], sink: impl Write) -> Result<()> {
    let pixels: Vec<u8> = values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    write_pgm(cols, rows, &pixels, sink)
}

fn write_pgm(cols: usize, rows: usize, pixels: &[u8], mut sink: impl Write) -> Result<()> {
    let io = |e| Error::io("<pgm sink>", e);
    writeln!(sink, "P5 {cols} {rows} 255").map_err(io)?;
    sink.write_all(pixels).map_err(io)?;
    sink.flush().map_err(io)
}

/// Parses a P5 greymap with maxval ≤ 255; returns `(width, height, pixels)`.
pub fn read_pgm(mut source: impl Read) -> Result<(usize, usize, Vec<u8>)> {
    let mut bytes = Vec::new();
    source
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("<pgm source>", e))?;
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(Error::Format(format!("not a binary PGM (magic {:?})", fields[0])));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("invalid PGM header field {s:?}")))
    };
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported PGM maxval {maxval}")));
    }
    pos += 1;
    let body = bytes.get(pos..pos + w * h).ok_or_else(|| {
        Error::Format(format!("PGM body shorter than {w}x{h}"))
    })?;
    Ok((w, h, body.to_vec()))
}
