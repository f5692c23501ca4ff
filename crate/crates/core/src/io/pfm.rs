//! Grayscale Portable Float Map (`Pf`) files.
//!
//! Header is `Pf\n<width> <height>\n<scale>\n`; a negative scale means
//! little-endian samples. Rows are stored bottom-up.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::{Error, Result};

pub fn encode_pfm(map: &Array2<f32>) -> Vec<u8> {
    let (h, w) = map.dim();
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(h * w * 4);
    for y in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&map[[y, x]].to_le_bytes());
        }
    }
    out
}

/// Splits off the next whitespace-delimited header token, returning it and
/// the offset just past the single whitespace byte that terminates it.
fn next_token(bytes: &[u8], mut pos: usize) -> Result<(&str, usize)> {
    while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
        pos += 1;
    }
    let start = pos;
    while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
        pos += 1;
    }
    if start == pos || pos >= bytes.len() {
        return Err(Error::FormatError("truncated PFM header".into()));
    }
    let tok = std::str::from_utf8(&bytes[start..pos])
        .map_err(|_| Error::FormatError("non-ascii PFM header".into()))?;
    Ok((tok, pos + 1))
}

pub fn decode_pfm(bytes: &[u8]) -> Result<Array2<f32>> {
    let (kind, pos) = next_token(bytes, 0)?;
    match kind {
        "Pf" => {}
        "PF" => return Err(Error::UnsupportedFormat("color PFM (PF) is not supported".into())),
        other => return Err(Error::FormatError(format!("bad PFM magic {other:?}"))),
    }
    let (w, pos) = next_token(bytes, pos)?;
    let (h, pos) = next_token(bytes, pos)?;
    let parse_dim = |s: &str| {
        s.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::FormatError(format!("bad PFM dimension {s:?}")))
    };
    let (w, h) = (parse_dim(w)?, parse_dim(h)?);
    let (scale, pos) = next_token(bytes, pos)?;
    let scale: f32 = scale
        .parse()
        .ok()
        .filter(|s: &f32| s.is_finite() && *s != 0.0)
        .ok_or_else(|| Error::FormatError(format!("bad PFM scale {scale:?}")))?;
    let little = scale < 0.0;
    let payload = &bytes[pos..];
    if payload.len() < w * h * 4 {
        return Err(Error::CorruptData(format!(
            "PFM payload truncated: {} of {} bytes",
            payload.len(),
            w * h * 4
        )));
    }
    let mut map = Array2::zeros((h, w));
    for (i, b) in payload.chunks_exact(4).take(w * h).enumerate() {
        let b = [b[0], b[1], b[2], b[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row, x) = (i / w, i % w);
        map[[h - 1 - row, x]] = v;
    }
    Ok(map)
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<Array2<f32>> {
    decode_pfm(&fs::read(path)?)
}

pub fn write_pfm(path: impl AsRef<Path>, map: &Array2<f32>) -> Result<()> {
    fs::write(path, encode_pfm(map))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_value() {
        let m = Array2::from_elem((1, 1), 3.0f32);
        assert_eq!(decode_pfm(&encode_pfm(&m)).unwrap(), m);
    }

    #[test]
    fn ramp_matches_hand_written_file() {
        // 4 wide, 3 tall ramp: value = 10*row + col
        let m = Array2::from_shape_fn((3, 4), |(y, x)| (10 * y + x) as f32);
        let mut reference = b"Pf\n4 3\n-1.0\n".to_vec();
        for row in [2usize, 1, 0] {
            for col in 0..4 {
                reference.extend_from_slice(&((10 * row + col) as f32).to_le_bytes());
            }
        }
        assert_eq!(encode_pfm(&m), reference);
        assert_eq!(decode_pfm(&reference).unwrap(), m);
    }

    #[test]
    fn big_endian_accepted() {
        let mut bytes = b"Pf\n2 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&1.5f32.to_be_bytes());
        bytes.extend_from_slice(&(-4.0f32).to_be_bytes());
        let m = decode_pfm(&bytes).unwrap();
        assert_eq!(m[[0, 0]], 1.5);
        assert_eq!(m[[0, 1]], -4.0);
    }

    #[test]
    fn color_header_rejected() {
        let bytes = b"PF\n1 1\n-1.0\n\0\0\0\0\0\0\0\0\0\0\0\0".to_vec();
        assert!(matches!(decode_pfm(&bytes), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn bad_scale() {
        let bytes = b"Pf\n1 1\nabc\n\0\0\0\0".to_vec();
        assert!(matches!(decode_pfm(&bytes), Err(Error::FormatError(_))));
        let bytes = b"Pf\n1 1\n0.0\n\0\0\0\0".to_vec();
        assert!(matches!(decode_pfm(&bytes), Err(Error::FormatError(_))));
    }

    #[test]
    fn truncated_payload() {
        let mut bytes = encode_pfm(&Array2::zeros((2, 2)));
        bytes.truncate(bytes.len() - 1);
        assert!(matches!(decode_pfm(&bytes), Err(Error::CorruptData(_))));
    }
}
