//! Latent export: a raw tensor file and an 8-bit greyscale PGM preview.
//!
//! Raw layout (little-endian): `"TDLT" | u8 dtype (1 = f32) | u32 ndim |
//! u32 dims... | data`.

use std::path::Path;

use transdiff_core::Tensor;

use crate::error::{HarnessError, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"TDLT";
const DTYPE_F32: u8 = 1;

pub fn tensor_bytes(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + 4 * (t.shape().len() + t.len()));
    out.extend(TENSOR_MAGIC);
    out.push(DTYPE_F32);
    out.extend((t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend((d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend(v.to_le_bytes());
    }
    out
}

pub fn tensor_from_bytes(buf: &[u8]) -> Result<Tensor<f32>> {
    let bad = |m: &str| HarnessError::Checkpoint(format!("tensor file: {m}"));
    if buf.len() < 9 || &buf[..4] != TENSOR_MAGIC {
        return Err(bad("bad magic"));
    }
    if buf[4] != DTYPE_F32 {
        return Err(bad("unsupported dtype"));
    }
    let word = |i: usize| -> Result<u32> {
        buf.get(i..i + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| bad("truncated"))
    };
    let ndim = word(5)? as usize;
    let shape: Vec<usize> = (0..ndim).map(|i| word(9 + 4 * i).map(|d| d as usize)).collect::<Result<_>>()?;
    let start = 9 + 4 * ndim;
    let n: usize = shape.iter().product();
    if buf.len() != start + 4 * n {
        return Err(bad("size does not match shape"));
    }
    let data = buf[start..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Tensor::from_vec(&shape, data)?)
}

pub fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, tensor_bytes(t)).map_err(|e| HarnessError::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    let buf = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    tensor_from_bytes(&buf)
}

/// Binary PGM of a `[h * w, d]` latent: channel mean, min-max scaled to 0..255.
pub fn render_pgm(latent: &Tensor<f32>, h: usize, w: usize) -> Result<Vec<u8>> {
    let (rows, d) = latent.expect_2d("render_pgm")?;
    if rows != h * w {
        return Err(transdiff_core::Error::Shape {
            op: "render_pgm",
            detail: format!("{rows} tokens for a {h}x{w} grid"),
        }
        .into());
    }
    let grey: Vec<f32> = (0..rows).map(|i| latent.row(i).iter().sum::<f32>() / d as f32).collect();
    let lo = grey.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = grey.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(grey.iter().map(|g| (((g - lo) / span) * 255.0).round() as u8));
    Ok(out)
}
