//! Binary PGM ("P5") and PPM ("P6") images with maxval 255.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a `[.., H, W]` grayscale image in `[0, 1]` (first plane only).
pub fn encode_pgm(img: &Tensor) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.len() < 2 {
        return Err(Error::shape("pgm", s, &[0, 0]));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data()[..h * w].iter().map(|&v| to_byte(v)));
    Ok(out)
}

/// Encodes three `[H, W]` planes in `[0, 1]` as RGB.
pub fn encode_ppm(r: &Tensor, g: &Tensor, b: &Tensor) -> Result<Vec<u8>> {
    if r.shape() != g.shape() || r.shape() != b.shape() || r.rank() != 2 {
        return Err(Error::shape("ppm", r.shape(), g.shape()));
    }
    let (h, w) = (r.shape()[0], r.shape()[1]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for i in 0..h * w {
        out.extend([to_byte(r.data()[i]), to_byte(g.data()[i]), to_byte(b.data()[i])]);
    }
    Ok(out)
}

/// Decodes a binary PGM written by [`encode_pgm`] to `[1, H, W]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let bad = || Error::Format("not a binary PGM".into());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_string());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let data = bytes.get(pos + 1..pos + 1 + w * h).ok_or_else(bad)?;
    Tensor::new(vec![1, h, w], data.iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn write_pgm(path: &Path, img: &Tensor) -> Result<()> {
    Ok(std::fs::write(path, encode_pgm(img)?)?)
}
