//! PNG and raw tensor files.
//!
//! Image tensors hold values in `[-1, 1]`. An 8-bit sample is
//! `(x + 1) * 127.5` rounded half to even and clamped to `0..=255`.
//!
//! Raw tensors are `"LPTN"`, four little-endian `u32` dims `n c h w`, then
//! little-endian `f32` data.

use std::fs;
use std::path::Path;

use image::{GrayImage, ImageBuffer, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const RAW_MAGIC: [u8; 4] = *b"LPTN";

pub fn to_u8(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round_ties_even().clamp(0.0, 255.0) as u8
}

pub fn from_u8(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

fn check_rgb(t: &Tensor) -> Result<Shape> {
    let s = t.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::shape(format!("expected a 1x3xHxW image, got {s}")));
    }
    Ok(s)
}

/// Interleaved row-major RGB8 bytes.
pub fn to_rgb8(t: &Tensor) -> Result<Vec<u8>> {
    let s = check_rgb(t)?;
    let mut out = Vec::with_capacity(s.h * s.w * 3);
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                out.push(to_u8(t.at(0, c, y, x)));
            }
        }
    }
    Ok(out)
}

pub fn from_rgb8(bytes: &[u8], width: usize, height: usize) -> Result<Tensor> {
    if bytes.len() != width * height * 3 {
        return Err(Error::shape(format!("{} bytes is not {width}x{height} RGB", bytes.len())));
    }
    Ok(Tensor::from_fn(Shape::new(1, 3, height, width), |_, c, y, x| from_u8(bytes[(y * width + x) * 3 + c])))
}

pub fn encode_png(t: &Tensor) -> Result<Vec<u8>> {
    let s = check_rgb(t)?;
    let img: RgbImage = ImageBuffer::from_raw(s.w as u32, s.h as u32, to_rgb8(t)?)
        .ok_or_else(|| Error::shape("image buffer size"))?;
    let mut out = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)?;
    Ok(out)
}

pub fn write_png(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_png(t)?)?;
    Ok(())
}

pub fn read_png(path: impl AsRef<Path>) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    from_rgb8(img.as_raw(), w as usize, h as usize)
}

/// Grayscale PNG of a single-channel map, scaled so `max` maps to 255.
pub fn encode_gray_png(map: &[f32], width: usize, height: usize, max: f32) -> Result<Vec<u8>> {
    if map.len() != width * height {
        return Err(Error::shape("map size"));
    }
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let px: Vec<u8> = map.iter().map(|v| (v * scale).round_ties_even().clamp(0.0, 255.0) as u8).collect();
    let img: GrayImage = ImageBuffer::from_raw(width as u32, height as u32, px).ok_or_else(|| Error::shape("map size"))?;
    let mut out = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)?;
    Ok(out)
}

pub fn encode_raw(t: &Tensor) -> Vec<u8> {
    let s = t.shape();
    let mut out = Vec::with_capacity(20 + 4 * s.len());
    out.extend_from_slice(&RAW_MAGIC);
    for d in s.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_raw(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 20 || bytes[..4] != RAW_MAGIC {
        return Err(Error::Format("not an LPTN tensor file".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let shape = Shape::new(dim(0), dim(1), dim(2), dim(3));
    let body = &bytes[20..];
    if body.len() != shape.len() * 4 {
        return Err(Error::Format(format!("{} data bytes for shape {shape}", body.len())));
    }
    let data = body.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Tensor::from_vec(shape, data)
}

pub fn read_raw(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_raw(&fs::read(path)?)
}

pub fn write_raw(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_raw(t))?;
    Ok(())
}

/// Reads a `.png` or an `LPTN` file, chosen by content.
pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = fs::read(path.as_ref())?;
    if bytes.starts_with(&RAW_MAGIC) {
        return decode_raw(&bytes);
    }
    let img = image::load_from_memory(&bytes)?.to_rgb8();
    let (w, h) = img.dimensions();
    from_rgb8(img.as_raw(), w as usize, h as usize)
}
