//! CARF: a tiny container for images, displacement fields and label masks.
//!
//! Layout, all little-endian: magic `CARF`, `u16` version (1), `u16` kind
//! (1 image, 2 field, 3 mask), `u32` C, H, W, then `C·H·W` row-major values,
//! channel-major. Images and fields store `f32`, masks `u32`.

use std::path::Path;

use super::{read_file, write_file, ByteReader};
use crate::error::{CarError, Result};
use crate::image::{Image2D, LabelMask};
use crate::warp::DeformationField;

pub const MAGIC: &[u8; 4] = b"CARF";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CarfKind {
    Image = 1,
    Field = 2,
    Mask = 3,
}

impl CarfKind {
    fn from_u16(v: u16) -> Option<Self> {
        match v {
            1 => Some(CarfKind::Image),
            2 => Some(CarfKind::Field),
            3 => Some(CarfKind::Mask),
            _ => None,
        }
    }

    fn channels(self) -> Option<u32> {
        match self {
            CarfKind::Image | CarfKind::Mask => Some(1),
            CarfKind::Field => Some(2),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    U32(Vec<u32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CarfArray {
    pub kind: CarfKind,
    pub channels: u32,
    pub height: u32,
    pub width: u32,
    pub payload: Payload,
}

impl CarfArray {
    pub fn encode(&self) -> Vec<u8> {
        let n = (self.channels * self.height * self.width) as usize;
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind as u16).to_le_bytes());
        for d in [self.channels, self.height, self.width] {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new("CARF file", bytes);
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(r.error(0, format!("bad magic {:?}, expected \"CARF\"", magic)));
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(r.error(4, format!("unsupported version {}", version)));
        }
        let kind_raw = r.u16("kind")?;
        let kind = CarfKind::from_u16(kind_raw).ok_or_else(|| r.error(6, format!("unknown kind {}", kind_raw)))?;
        let channels = r.u32("channel count")?;
        let height = r.u32("height")?;
        let width = r.u32("width")?;
        if Some(channels) != kind.channels() {
            return Err(r.error(8, format!("{:?} requires C={}, got {}", kind, kind.channels().unwrap(), channels)));
        }
        if height == 0 || width == 0 {
            return Err(r.error(12, format!("empty extent {}x{}", height, width)));
        }
        let n = (channels as u64) * (height as u64) * (width as u64);
        let expected = n * 4;
        if r.remaining() as u64 != expected {
            return Err(r.error(
                HEADER_LEN,
                format!(
                    "payload length mismatch: expected {} bytes for {}x{}x{}, found {}",
                    expected,
                    channels,
                    height,
                    width,
                    r.remaining()
                ),
            ));
        }
        let raw = r.take(expected as usize, "payload")?;
        let words = raw.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
        let payload = match kind {
            CarfKind::Mask => Payload::U32(words.map(u32::from_le_bytes).collect()),
            _ => Payload::F32(words.map(f32::from_le_bytes).collect()),
        };
        Ok(CarfArray {
            kind,
            channels,
            height,
            width,
            payload,
        })
    }

    fn expect(&self, kind: CarfKind) -> Result<()> {
        if self.kind != kind {
            return Err(CarError::Format {
                what: "CARF file".into(),
                offset: 6,
                detail: format!("expected {:?}, found {:?}", kind, self.kind),
            });
        }
        Ok(())
    }

    fn floats(&self) -> Vec<f64> {
        match &self.payload {
            Payload::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Payload::U32(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

fn dims(h: usize, w: usize) -> Result<(u32, u32)> {
    let c = |x: usize| u32::try_from(x).map_err(|_| CarError::invalid(format!("extent {} too large", x)));
    Ok((c(h)?, c(w)?))
}

/// Values are stored as `f32`; reading back yields the rounded values.
pub fn image_to_carf(img: &Image2D) -> Result<CarfArray> {
    let (height, width) = dims(img.height(), img.width())?;
    Ok(CarfArray {
        kind: CarfKind::Image,
        channels: 1,
        height,
        width,
        payload: Payload::F32(img.pixels().iter().map(|&v| v as f32).collect()),
    })
}

pub fn image_from_carf(a: &CarfArray) -> Result<Image2D> {
    a.expect(CarfKind::Image)?;
    Image2D::new(a.height as usize, a.width as usize, a.floats()).map_err(|e| CarError::Format {
        what: "CARF image".into(),
        offset: HEADER_LEN as u64,
        detail: e.to_string(),
    })
}

pub fn field_to_carf(f: &DeformationField) -> Result<CarfArray> {
    let (height, width) = dims(f.height(), f.width())?;
    Ok(CarfArray {
        kind: CarfKind::Field,
        channels: 2,
        height,
        width,
        payload: Payload::F32(f.tensor().data().iter().map(|&v| v as f32).collect()),
    })
}

pub fn field_from_carf(a: &CarfArray) -> Result<DeformationField> {
    a.expect(CarfKind::Field)?;
    DeformationField::new(a.height as usize, a.width as usize, a.floats()).map_err(|e| CarError::Format {
        what: "CARF field".into(),
        offset: HEADER_LEN as u64,
        detail: e.to_string(),
    })
}

pub fn mask_to_carf(m: &LabelMask) -> Result<CarfArray> {
    let (height, width) = dims(m.height(), m.width())?;
    Ok(CarfArray {
        kind: CarfKind::Mask,
        channels: 1,
        height,
        width,
        payload: Payload::U32(m.labels().to_vec()),
    })
}

pub fn mask_from_carf(a: &CarfArray) -> Result<LabelMask> {
    a.expect(CarfKind::Mask)?;
    match &a.payload {
        Payload::U32(v) => LabelMask::new(a.height as usize, a.width as usize, v.clone()),
        Payload::F32(_) => unreachable!("mask payloads decode as u32"),
    }
}

pub fn read_carf(path: &Path) -> Result<CarfArray> {
    CarfArray::decode(&read_file(path)?).map_err(|e| with_path(e, path))
}

fn with_path(e: CarError, path: &Path) -> CarError {
    match e {
        CarError::Format { what, offset, detail } => CarError::Format {
            what: format!("{} {}", what, path.display()),
            offset,
            detail,
        },
        other => other,
    }
}

pub fn write_carf(path: &Path, a: &CarfArray) -> Result<()> {
    write_file(path, &a.encode())
}

pub fn read_image(path: &Path) -> Result<Image2D> {
    image_from_carf(&read_carf(path)?).map_err(|e| with_path(e, path))
}

pub fn write_image(path: &Path, img: &Image2D) -> Result<()> {
    write_carf(path, &image_to_carf(img)?)
}

pub fn read_field(path: &Path) -> Result<DeformationField> {
    field_from_carf(&read_carf(path)?).map_err(|e| with_path(e, path))
}

pub fn write_field(path: &Path, f: &DeformationField) -> Result<()> {
    write_carf(path, &field_to_carf(f)?)
}

pub fn read_mask(path: &Path) -> Result<LabelMask> {
    mask_from_carf(&read_carf(path)?).map_err(|e| with_path(e, path))
}

pub fn write_mask(path: &Path, m: &LabelMask) -> Result<()> {
    write_carf(path, &mask_to_carf(m)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let m = LabelMask::new(2, 3, vec![0, 1, 2, 3, 4, 5]).unwrap();
        let b = mask_to_carf(&m).unwrap().encode();
        assert_eq!(&b[..4], b"CARF");
        assert_eq!(&b[4..8], &[1, 0, 3, 0]);
        assert_eq!(&b[8..20], &[1, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(b.len(), 20 + 24);
        assert_eq!(mask_from_carf(&CarfArray::decode(&b).unwrap()).unwrap(), m);
    }

    #[test]
    fn truncated_reports_lengths() {
        let img = Image2D::from_fn(4, 4, |r, c| (r + c) as f64 / 8.0).unwrap();
        let mut b = image_to_carf(&img).unwrap().encode();
        b.truncate(b.len() - 3);
        let msg = CarfArray::decode(&b).unwrap_err().to_string();
        assert!(msg.contains("offset 20") && msg.contains("expected 64") && msg.contains("61"), "{}", msg);
    }

    #[test]
    fn bad_headers() {
        let img = Image2D::from_fn(2, 2, |_, _| 0.5).unwrap();
        let good = image_to_carf(&img).unwrap().encode();
        let mut b = good.clone();
        b[0] = b'X';
        assert!(CarfArray::decode(&b).unwrap_err().to_string().contains("offset 0"));
        let mut b = good.clone();
        b[4] = 9;
        assert!(CarfArray::decode(&b).unwrap_err().to_string().contains("offset 4"));
        let mut b = good.clone();
        b[8] = 2;
        assert!(CarfArray::decode(&b).is_err());
        let field = CarfArray::decode(&good).unwrap();
        assert!(field_from_carf(&field).is_err());
    }

    #[test]
    fn out_of_range_image_rejected() {
        let a = CarfArray {
            kind: CarfKind::Image,
            channels: 1,
            height: 1,
            width: 2,
            payload: Payload::F32(vec![0.5, 1.5]),
        };
        assert!(image_from_carf(&a).is_err());
    }
}
