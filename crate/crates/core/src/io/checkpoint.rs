//! CARC checkpoints.
//!
//! Layout, all little-endian: magic `CARC`, `u16` version (1); the
//! architecture (`u32` levels, enc, dec, proj widths, `f64` slope, `u8`
//! shared-encoder flag); the 32-byte config digest; the RNG state (`u64`
//! master seed); `u32` completed epochs; `u32` parameter count, then per
//! parameter a `u16`-length UTF-8 name, `u8` rank, `u32` dims and the `f64`
//! values.

use std::path::Path;

use super::{read_file, write_file, ByteReader};
use crate::error::{CarError, Result};
use crate::simnet::{ArchSpec, CarModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CARC";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: CarModel,
    pub config_digest: [u8; 32],
    /// Every random stream in a run is derived from this seed.
    pub rng_seed: u64,
    pub epoch: u32,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let a = self.model.arch();
        for d in [a.levels, a.enc_channels, a.dec_channels, a.proj_channels] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&a.slope.to_le_bytes());
        out.push(a.share_encoders as u8);
        out.extend_from_slice(&self.config_digest);
        out.extend_from_slice(&self.rng_seed.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&(self.model.params().len() as u32).to_le_bytes());
        for (name, t) in self.model.names().iter().zip(self.model.params()) {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new("CARC checkpoint", bytes);
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(r.error(0, format!("bad magic {:?}, expected \"CARC\"", magic)));
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(r.error(4, format!("unsupported version {}", version)));
        }
        let arch_at = r.offset();
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            *d = r.u32("architecture")? as usize;
        }
        let slope = r.f64("slope")?;
        let share = match r.u8("shared-encoder flag")? {
            0 => false,
            1 => true,
            v => return Err(r.error(r.offset() - 1, format!("flag byte must be 0 or 1, got {}", v))),
        };
        let arch = ArchSpec {
            levels: dims[0],
            enc_channels: dims[1],
            dec_channels: dims[2],
            proj_channels: dims[3],
            slope,
            share_encoders: share,
        };
        arch.validate().map_err(|e| r.error(arch_at, e.to_string()))?;
        let config_digest: [u8; 32] = r.take(32, "config digest")?.try_into().unwrap();
        let rng_seed = r.u64("rng state")?;
        let epoch = r.u32("epoch")?;
        let count = r.u32("parameter count")? as usize;
        let table_at = r.offset();
        let mut table = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let at = r.offset();
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| r.error(at + 2, "parameter name is not UTF-8"))?
                .to_string();
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let n: usize = shape.iter().product();
            if n.checked_mul(8).map_or(true, |b| b > r.remaining()) {
                return Err(r.error(
                    r.offset(),
                    format!(
                        "truncated values of {}: expected {} bytes, {} available",
                        name,
                        n.saturating_mul(8),
                        r.remaining()
                    ),
                ));
            }
            let data = (0..n).map(|_| r.f64("value")).collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(shape, data).map_err(|e| r.error(at, e.to_string()))?;
            table.push((name, t));
        }
        r.finish()?;
        let model = CarModel::from_params(arch, table).map_err(|e| match e {
            CarError::NonFinite(d) => CarError::NonFinite(d),
            other => r.error(table_at, other.to_string()),
        })?;
        Ok(Checkpoint {
            model,
            config_digest,
            rng_seed,
            epoch,
        })
    }
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_file(path, &ckpt.encode())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    Checkpoint::decode(&read_file(path)?).map_err(|e| match e {
        CarError::Format { what, offset, detail } => CarError::Format {
            what: format!("{} {}", what, path.display()),
            offset,
            detail,
        },
        other => other,
    })
}
