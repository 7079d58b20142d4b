use std::io::Write;
use std::path::Path;

use atok_autodiff::{Float, Tensor};

use super::atomic_write;
use crate::error::{Error, Result};

/// Clamp to `[0, 1]`, scale by 255 and round half away from zero.
pub fn quantize_pixel(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary P6 encoding of an `[h, w, 3]` image.
pub fn encode_ppm<T: Float>(image: &Tensor<T>) -> Result<Vec<u8>> {
    let &[h, w, 3] = image.shape() else {
        return Err(Error::InvalidArgument(format!("expected an [h, w, 3] image, got {:?}", image.shape())));
    };
    if let Some(i) = image.first_non_finite() {
        return Err(Error::InvalidArgument(format!("pixel {i} is not finite")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|v| quantize_pixel(v.as_f64())));
    Ok(out)
}

pub fn write_ppm<T: Float>(image: &Tensor<T>, path: &Path) -> Result<()> {
    let bytes = encode_ppm(image)?;
    atomic_write(path, |w| w.write_all(&bytes))
}

/// Decode a P6 file with max value 255 into an `[h, w, 3]` image of `byte / 255`.
pub fn decode_ppm<T: Float>(bytes: &[u8], origin: &Path) -> Result<Tensor<T>> {
    let corrupt = |msg: &str| Error::Corrupt { path: origin.into(), msg: msg.into() };
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(corrupt("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| corrupt("non-ascii header"))?);
    }
    if fields[0] != "P6" {
        return Err(corrupt("not a binary PPM"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| corrupt("bad header number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 || w == 0 || h == 0 {
        return Err(corrupt("only non-empty 8-bit images are supported"));
    }
    let payload = &bytes[pos + 1..];
    if payload.len() != h * w * 3 {
        return Err(corrupt("pixel payload has the wrong length"));
    }
    Ok(Tensor::new(vec![h, w, 3], payload.iter().map(|&b| T::from_f64(f64::from(b) / 255.0)).collect())?)
}

pub fn read_ppm<T: Float>(path: &Path) -> Result<Tensor<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, path)
}
