//! Middlebury `.flo` optical flow files.
//!
//! Layout: magic `202021.25` as little-endian f32, width and height as
//! little-endian i32, then `height * width` interleaved (u, v) f32 pairs in
//! row-major order.

use std::fs;
use std::path::Path;

use ndarray::Array3;

use crate::{Error, Result};

pub const FLO_MAGIC: f32 = 202021.25;

pub fn encode_flow(flow: &Array3<f32>) -> Result<Vec<u8>> {
    let (h, w, c) = flow.dim();
    if c != 2 {
        return Err(Error::InvalidInput(format!("flow must have 2 channels, got {c}")));
    }
    let mut out = Vec::with_capacity(12 + h * w * 8);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    for v in flow.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_flow(bytes: &[u8]) -> Result<Array3<f32>> {
    if bytes.len() < 12 {
        return Err(Error::CorruptData(format!("flo header truncated ({} bytes)", bytes.len())));
    }
    let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
    let magic = f32::from_le_bytes(word(0));
    if magic != FLO_MAGIC {
        return Err(Error::FormatError(format!("bad flo magic {magic}")));
    }
    let w = i32::from_le_bytes(word(4));
    let h = i32::from_le_bytes(word(8));
    if w <= 0 || h <= 0 {
        return Err(Error::FormatError(format!("bad flo dimensions {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let need = 12 + w * h * 8;
    if bytes.len() < need {
        return Err(Error::CorruptData(format!(
            "flo payload truncated: {} of {need} bytes",
            bytes.len()
        )));
    }
    let data: Vec<f32> = bytes[12..need]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(Array3::from_shape_vec((h, w, 2), data).expect("length checked"))
}

pub fn read_flow_file(path: impl AsRef<Path>) -> Result<Array3<f32>> {
    decode_flow(&fs::read(path)?)
}

pub fn write_flow_file(path: impl AsRef<Path>, flow: &Array3<f32>) -> Result<()> {
    fs::write(path, encode_flow(flow)?)?;
    Ok(())
}
