//! Binary array files and PNG helpers.
//!
//! Raw float files carry a 16-byte little-endian header followed by
//! `K·H·W` `f32` values in row-major order:
//!
//! | bytes | content            |
//! |-------|--------------------|
//! | 0..4  | magic `b"TVSF"`    |
//! | 4..8  | `K` (`u32`)        |
//! | 8..12 | `H` (`u32`)        |
//! | 12..16| `W` (`u32`)        |
//!
//! Heatmaps use `K` = number of sources; spectrograms use `K = 1`,
//! `H` = frequency bins and `W` = time frames.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use crate::{Result, Scalar, TvslError};

pub const RAW_MAGIC: [u8; 4] = *b"TVSF";
pub const RAW_HEADER_LEN: usize = 16;

pub fn encode_raw<T: Scalar>(array: ArrayView3<T>) -> Vec<u8> {
    let (k, h, w) = array.dim();
    let mut out = Vec::with_capacity(RAW_HEADER_LEN + 4 * array.len());
    out.extend_from_slice(&RAW_MAGIC);
    for d in [k, h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in array.iter() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out
}

pub fn decode_raw<T: Scalar>(bytes: &[u8]) -> Result<Array3<T>> {
    if bytes.len() < RAW_HEADER_LEN {
        return Err(TvslError::Format("raw array shorter than its header".into()));
    }
    if bytes[..4] != RAW_MAGIC {
        return Err(TvslError::Format("bad raw array magic".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (k, h, w) = (dim(4), dim(8), dim(12));
    let expected = RAW_HEADER_LEN + 4 * k * h * w;
    if bytes.len() != expected {
        return Err(TvslError::Format(format!(
            "raw array of shape {k}x{h}x{w} needs {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let data: Vec<T> = bytes[RAW_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    Ok(Array3::from_shape_vec((k, h, w), data).expect("length checked above"))
}

pub fn write_raw<T: Scalar>(path: impl AsRef<Path>, array: ArrayView3<T>) -> Result<()> {
    fs::write(path, encode_raw(array))?;
    Ok(())
}

pub fn read_raw<T: Scalar>(path: impl AsRef<Path>) -> Result<Array3<T>> {
    decode_raw(&fs::read(path)?)
}

/// Maps a value in `[lo, hi]` to an 8-bit level, clamping outside values.
pub fn quantize_u8<T: Scalar>(v: T, lo: f64, hi: f64) -> u8 {
    let t = ((v.as_f64() - lo) / (hi - lo)).clamp(0.0, 1.0);
    (t * 255.0).round() as u8
}

/// Writes a single-channel map as 8-bit grayscale, mapping `[lo, hi]` to `0..=255`.
pub fn write_gray_png<T: Scalar>(
    path: impl AsRef<Path>,
    map: ArrayView2<T>,
    lo: f64,
    hi: f64,
) -> Result<()> {
    let (h, w) = map.dim();
    let buf: Vec<u8> = map.iter().map(|&v| quantize_u8(v, lo, hi)).collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| TvslError::Format("png buffer size".into()))?;
    img.save(path)?;
    Ok(())
}

pub fn read_gray_png(path: impl AsRef<Path>) -> Result<Array2<u8>> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_vec((h as usize, w as usize), img.into_raw()).unwrap())
}

/// Writes a `C×H×W` image with values in `[0, 1]` as an 8-bit PNG (C ∈ {1, 3}).
pub fn write_image_png<T: Scalar>(path: impl AsRef<Path>, pixels: ArrayView3<T>) -> Result<()> {
    let (c, h, w) = pixels.dim();
    let mut buf = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                buf.push(quantize_u8(pixels[[ch, y, x]], 0.0, 1.0));
            }
        }
    }
    match c {
        1 => image::GrayImage::from_raw(w as u32, h as u32, buf)
            .ok_or_else(|| TvslError::Format("png buffer size".into()))?
            .save(path)?,
        3 => image::RgbImage::from_raw(w as u32, h as u32, buf)
            .ok_or_else(|| TvslError::Format("png buffer size".into()))?
            .save(path)?,
        _ => return Err(TvslError::Input(format!("cannot write {c}-channel image"))),
    }
    Ok(())
}

/// Reads a PNG as a `3×H×W` array in `[0, 1]`.
pub fn read_image_png<T: Scalar>(path: impl AsRef<Path>) -> Result<Array3<T>> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let raw = img.into_raw();
    let mut out = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                out[[ch, y, x]] = T::of(raw[(y * w + x) * 3 + ch] as f64 / 255.0);
            }
        }
    }
    Ok(out)
}
