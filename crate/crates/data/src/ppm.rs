//! Binary PPM (P6, maxval 255) encoding of `[3,H,W]` images in `[0,1]` and
//! of `[1,H,W]` binary masks (stored as gray P6).

use std::path::Path;

use diat_core::{Scalar, Tensor};

use crate::error::{io_err, Error, Result};

/// Nearest 8-bit level; out-of-range and NaN values saturate.
pub fn quantize(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn header(width: usize, height: usize) -> Vec<u8> {
    format!("P6\n{width} {height}\n255\n").into_bytes()
}

pub fn encode_image<S: Scalar>(image: &Tensor<S>) -> Result<Vec<u8>> {
    let (c, h, w) = chw(image)?;
    if c != 3 {
        return Err(Error::InvalidArgument(format!("expected 3 channels, got {c}")));
    }
    let plane = h * w;
    let image = image.cast::<f64>();
    let data = image.data();
    let mut out = header(w, h);
    out.reserve(3 * plane);
    for p in 0..plane {
        for ch in 0..3 {
            out.push(quantize(data[ch * plane + p]));
        }
    }
    Ok(out)
}

/// Masks are written as gray pixels: 0 or 255 in every channel.
pub fn encode_mask<S: Scalar>(mask: &Tensor<S>) -> Result<Vec<u8>> {
    let (c, h, w) = chw(mask)?;
    if c != 1 {
        return Err(Error::InvalidArgument(format!("expected 1 mask channel, got {c}")));
    }
    let mut out = header(w, h);
    for &v in mask.cast::<f64>().data() {
        let b = if v > 0.5 { 255 } else { 0 };
        out.extend_from_slice(&[b, b, b]);
    }
    Ok(out)
}

fn chw<S: Scalar>(t: &Tensor<S>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::InvalidArgument(format!("expected [C,H,W] image, got {s:?}"))),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos || self.pos - start > 9 {
            return Err(Error::Format(format!("bad {what}")));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        Ok(text.parse().expect("at most 9 digits"))
    }
}

/// Returns `(width, height, rgb bytes)`.
fn decode_raw(bytes: &[u8]) -> Result<(usize, usize, &[u8])> {
    if !bytes.starts_with(b"P6") {
        return Err(Error::Format("missing P6 magic".into()));
    }
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Format(format!("empty image {width}x{height}")));
    }
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(Error::Format("missing separator before raster".into())),
    }
    let raster = &bytes[cur.pos..];
    let need = 3 * width * height;
    if raster.len() != need {
        return Err(Error::Format(format!("raster has {} bytes, expected {need}", raster.len())));
    }
    Ok((width, height, raster))
}

pub fn decode_image<S: Scalar>(bytes: &[u8]) -> Result<Tensor<S>> {
    let (w, h, raster) = decode_raw(bytes)?;
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for (p, px) in raster.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            data[ch * plane + p] = px[ch] as f64 / 255.0;
        }
    }
    Ok(Tensor::<f64>::new(&[3, h, w], data)?.cast())
}

pub fn decode_mask<S: Scalar>(bytes: &[u8]) -> Result<Tensor<S>> {
    let (w, h, raster) = decode_raw(bytes)?;
    let mut data = Vec::with_capacity(w * h);
    for px in raster.chunks_exact(3) {
        let v = match px {
            [0, 0, 0] => 0.0,
            [255, 255, 255] => 1.0,
            _ => return Err(Error::Format(format!("mask pixel {px:?} is not 0 or 255 gray"))),
        };
        data.push(v);
    }
    Ok(Tensor::<f64>::new(&[1, h, w], data)?.cast())
}

fn check_size<S: Scalar>(t: &Tensor<S>, size: Option<usize>, path: &Path) -> Result<()> {
    if let Some(s) = size {
        if t.shape()[1] != s || t.shape()[2] != s {
            return Err(Error::Format(format!(
                "{} is {}x{}, expected {s}x{s}",
                path.display(),
                t.shape()[2],
                t.shape()[1]
            )));
        }
    }
    Ok(())
}

pub fn write_image<S: Scalar>(path: &Path, image: &Tensor<S>) -> Result<()> {
    std::fs::write(path, encode_image(image)?).map_err(io_err(path))
}

pub fn write_mask<S: Scalar>(path: &Path, mask: &Tensor<S>) -> Result<()> {
    std::fs::write(path, encode_mask(mask)?).map_err(io_err(path))
}

/// Reads an image, optionally requiring a `size`x`size` raster.
pub fn read_image<S: Scalar>(path: &Path, size: Option<usize>) -> Result<Tensor<S>> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let t = decode_image(&bytes)?;
    check_size(&t, size, path)?;
    Ok(t)
}

pub fn read_mask<S: Scalar>(path: &Path, size: Option<usize>) -> Result<Tensor<S>> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let t = decode_mask(&bytes)?;
    check_size(&t, size, path)?;
    Ok(t)
}
