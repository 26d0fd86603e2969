//! Binary greyscale PGM ("P5", maxval 255) reading and writing.

use std::path::Path;

use crate::data::{dequantize, quantize};
use crate::error::{Error, PgmError, Result};
use crate::tensor::Tensor;

/// Parses a P5 image into `[1, H, W]` pixels scaled to `[0, 1]` by `byte / 255`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor, PgmError> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos)?;
    if magic != b"P5" {
        return Err(PgmError::BadMagic(String::from_utf8_lossy(magic).into_owned()));
    }
    let width = parse_number(bytes, &mut pos, "width")?;
    let height = parse_number(bytes, &mut pos, "height")?;
    let maxval = parse_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(PgmError::BadMaxval(maxval));
    }
    if width == 0 || height == 0 {
        return Err(PgmError::Header(format!("zero extent {width}×{height}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(PgmError::Header("missing whitespace before raster".into())),
    }
    let (w, h) = (width as usize, height as usize);
    let payload = &bytes[pos..];
    if payload.len() < w * h {
        return Err(PgmError::Truncated {
            expected: w * h,
            found: payload.len(),
        });
    }
    let data = payload[..w * h].iter().map(|&b| dequantize(b)).collect();
    Ok(Tensor::new(vec![1, h, w], data).expect("extent checked"))
}

fn skip_whitespace_and_comments(bytes: &[u8], pos: &mut usize) {
    while let Some(&b) = bytes.get(*pos) {
        if b == b'#' {
            while let Some(&c) = bytes.get(*pos) {
                *pos += 1;
                if c == b'\n' {
                    break;
                }
            }
        } else if b.is_ascii_whitespace() {
            *pos += 1;
        } else {
            break;
        }
    }
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8], PgmError> {
    skip_whitespace_and_comments(bytes, pos);
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    if start == *pos {
        return Err(PgmError::Header("unexpected end of header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn parse_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<u32, PgmError> {
    let tok = next_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| PgmError::Header(format!("bad {what} {:?}", String::from_utf8_lossy(tok))))
}

/// Encodes `[1, H, W]` (or `[H, W]`) pixels in `[0, 1]`, quantizing with
/// round-half-up.
pub fn encode_pgm(pixels: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match pixels.shape() {
        [1, h, w] | [h, w] => (*h, *w),
        s => return Err(Error::Shape(format!("PGM needs a single-channel image, got {s:?}"))),
    };
    if let Some(p) = pixels.data().iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidArgument(format!("pixel {p} outside [0, 1]")));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(pixels.data().iter().map(|&p| quantize(p)));
    Ok(out)
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    Ok(decode_pgm(&bytes)?)
}

pub fn save_pgm(pixels: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_pgm(pixels)?;
    std::fs::write(path, bytes).map_err(|e| Error::file(path, e))
}
