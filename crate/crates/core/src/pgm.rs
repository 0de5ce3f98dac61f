//! Binary 8-bit PGM (P5, maxval 255). Pixels load as `value / 255`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parses a P5 image into a `[1, H, W]` tensor in `[0, 1]`.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let magic = header_token(bytes, &mut pos)?;
    if magic != b"P5" {
        return Err(Error::Pgm(format!(
            "expected magic P5, found `{}`",
            String::from_utf8_lossy(magic)
        )));
    }
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::Pgm(format!("maxval must be 255, found {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Pgm(format!("empty image {width}x{height}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Pgm("missing whitespace after maxval".into()));
    }
    let raster = &bytes[pos + 1..];
    let n = width * height;
    if raster.len() < n {
        return Err(Error::Pgm(format!("raster has {} bytes, expected {n}", raster.len())));
    }
    if raster.len() > n {
        return Err(Error::Pgm(format!("{} trailing bytes after raster", raster.len() - n)));
    }
    let data = raster.iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(vec![1, height, width], data)
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while bytes.get(*pos).is_some_and(u8::is_ascii_whitespace) {
            *pos += 1;
        }
        if bytes.get(*pos) == Some(&b'#') {
            while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Pgm("truncated header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = header_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Pgm(format!("bad {what} `{}`", String::from_utf8_lossy(tok))))
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    decode(&fs::read(path)?).map_err(|e| match e {
        Error::Pgm(msg) => Error::Pgm(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Quantises `[H, W]` or `[1, H, W]` values in `[0, 1]` to bytes (rounded, clamped).
pub fn encode(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match image.shape() {
        [h, w] | [1, h, w] => (*h, *w),
        other => return Err(Error::Shape(format!("PGM needs [H,W] or [1,H,W], got {other:?}"))),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

fn to_byte(v: f32) -> u8 {
    if v.is_nan() {
        0
    } else {
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    }
}

pub fn write(image: &Tensor, mut w: impl Write) -> Result<()> {
    w.write_all(&encode(image)?)?;
    Ok(())
}
