//! 8-bit binary PGM (P5) bridge for viewing images.
//!
//! Export maps `v` to `round(255·v)`, so 1.0 becomes 255. Import divides by
//! the header's maxval, which must not exceed 255.

use std::path::Path;

use super::{read_file, write_file};
use crate::error::{CarError, Result};
use crate::image::Image2D;

pub fn encode(img: &Image2D) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.pixels().iter().map(|&v| (v * 255.0).round() as u8));
    out
}

fn fmt_err(offset: usize, detail: impl Into<String>) -> CarError {
    CarError::Format {
        what: "PGM file".into(),
        offset: offset as u64,
        detail: detail.into(),
    }
}

pub fn decode(bytes: &[u8]) -> Result<Image2D> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(fmt_err(0, "expected binary PGM magic P5"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (k, name) in ["width", "height", "maxval"].iter().enumerate() {
        // whitespace and comments between header tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).map_or(false, |&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).map_or(false, u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(fmt_err(start, format!("expected {}", name)));
        }
        fields[k] = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| fmt_err(start, format!("{} out of range", name)))?;
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(fmt_err(3, "empty image"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(fmt_err(pos, format!("maxval {} unsupported (1..=255)", maxval)));
    }
    if !bytes.get(pos).map_or(false, u8::is_ascii_whitespace) {
        return Err(fmt_err(pos, "expected whitespace after maxval"));
    }
    pos += 1;
    let body = &bytes[pos..];
    if body.len() != w * h {
        return Err(fmt_err(
            pos,
            format!("expected {} pixel bytes, found {}", w * h, body.len()),
        ));
    }
    Image2D::new(h, w, body.iter().map(|&b| (b as f64 / maxval as f64).min(1.0)).collect())
}

pub fn write_pgm(path: &Path, img: &Image2D) -> Result<()> {
    write_file(path, &encode(img))
}

pub fn read_pgm(path: &Path) -> Result<Image2D> {
    decode(&read_file(path)?)
}
