//! Binary PGM/PPM export of images and mask bitmaps.

use std::fs;
use std::path::{Path, PathBuf};

use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::masks::FourierMask;

/// Pixel mapping for display. Stored tensors are never modified.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DisplayScale {
    /// Values are taken as 0..255 intensities, clipped and rounded.
    Clip,
    /// `lo -> 0`, `hi -> 255`, then clipped and rounded.
    Range { lo: f64, hi: f64 },
}

impl DisplayScale {
    fn byte(self, v: f64) -> u8 {
        let v = match self {
            DisplayScale::Clip => v,
            DisplayScale::Range { lo, hi } => (v - lo) / (hi - lo) * 255.0,
        };
        if v.is_nan() {
            0
        } else {
            v.round().clamp(0.0, 255.0) as u8
        }
    }
}

/// Encodes a binary PGM (1 channel) or PPM (3 channels) from interleaved bytes.
pub fn encode_pnm(width: usize, height: usize, channels: usize, bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = match channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Dimension(format!("cannot encode {c}-channel image as PGM/PPM"))),
    };
    if bytes.len() != width * height * channels {
        return Err(Error::ShapeMismatch {
            expected: format!("{} bytes", width * height * channels),
            actual: format!("{} bytes", bytes.len()),
        });
    }
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    Ok(out)
}

/// Decodes a binary PGM/PPM into `(width, height, channels, interleaved bytes)`.
pub fn decode_pnm(data: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bad = |m: &str| Error::Format {
        path: PathBuf::new(),
        message: format!("pnm: {m}"),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&data[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    let channels = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        m => return Err(bad(&format!("unsupported magic {m}"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (width, height, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad("only 8-bit images are supported"));
    }
    let body = &data[pos + 1..];
    if body.len() != width * height * channels {
        return Err(bad("pixel data length mismatch"));
    }
    Ok((width, height, channels, body.to_vec()))
}

/// Interleaved display bytes of planar data with `channels` planes.
fn interleave(planar: &[f64], channels: usize, scale: DisplayScale) -> Vec<u8> {
    let plane = planar.len() / channels;
    (0..plane)
        .flat_map(|p| (0..channels).map(move |c| scale.byte(planar[c * plane + p])))
        .collect()
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `<dir>/<prefix>_<index>.ppm` (or `.pgm` for 1-channel data) for
/// each requested image.
pub fn export_images(
    dataset: &LabeledDataset,
    indices: &[usize],
    dir: &Path,
    prefix: &str,
    scale: DisplayScale,
) -> Result<Vec<PathBuf>> {
    let shape = dataset.shape();
    if shape.channels != 1 && shape.channels != 3 {
        return Err(Error::Dimension(format!("cannot export {}-channel images", shape.channels)));
    }
    if let Some(&i) = indices.iter().find(|&&i| i >= dataset.len()) {
        return Err(Error::InvalidParameter(format!(
            "image index {i} out of range for {} images",
            dataset.len()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ext = if shape.channels == 1 { "pgm" } else { "ppm" };
    let mut paths = Vec::with_capacity(indices.len());
    for &i in indices {
        let bytes = interleave(dataset.image(i), shape.channels, scale);
        let path = dir.join(format!("{prefix}_{i}.{ext}"));
        write(&path, &encode_pnm(shape.width, shape.height, shape.channels, &bytes)?)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Writes a mask bitmap, white where a mode is kept. Masks whose channels
/// agree become one PGM; three differing channels become a PPM with one
/// color per channel; any other channel count becomes one PGM per channel.
pub fn export_mask(mask: &FourierMask, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    let shape = mask.shape();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let white = |bits: &[u8]| -> Vec<u8> { bits.iter().map(|&b| if b != 0 { 255 } else { 0 }).collect() };
    let uniform = (1..shape.channels).all(|c| mask.plane(c) == mask.plane(0));
    let (w, h) = (shape.width, shape.height);
    if uniform {
        let path = dir.join(format!("{stem}.pgm"));
        write(&path, &encode_pnm(w, h, 1, &white(mask.plane(0)))?)?;
        return Ok(vec![path]);
    }
    if shape.channels == 3 {
        let planar: Vec<f64> = white(mask.bits()).into_iter().map(f64::from).collect();
        let path = dir.join(format!("{stem}.ppm"));
        write(&path, &encode_pnm(w, h, 3, &interleave(&planar, 3, DisplayScale::Clip))?)?;
        return Ok(vec![path]);
    }
    (0..shape.channels)
        .map(|c| {
            let path = dir.join(format!("{stem}_c{c}.pgm"));
            write(&path, &encode_pnm(w, h, 1, &white(mask.plane(c)))?)?;
            Ok(path)
        })
        .collect()
}
