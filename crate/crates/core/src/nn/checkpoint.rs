//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "OESCNCKP"
//! version      u32      1
//! manifest     u64 length + UTF-8 JSON bytes
//! grid count   u32
//! grid*        name (u32 length + UTF-8), rank u32, extents u64 × rank,
//!              values f64 × product(extents)
//! adam flag    u8       0 = absent, 1 = present
//! adam         step u64, lr/beta1/beta2/eps f64, count u32,
//!              then `count` m grids followed by `count` v grids
//!              (same grid encoding, names "m" / "v")
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so save/load is bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use super::adam::{AdamConfig, AdamState};
use super::Grid;
use crate::error::{FormatError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"OESCNCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// JSON description of the model the grids belong to.
    pub manifest: String,
    pub grids: Vec<(String, Grid)>,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn grid(&self, name: &str) -> Option<&Grid> {
        self.grids.iter().find(|(n, _)| n == name).map(|(_, g)| g)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(self.manifest.as_bytes());
        out.extend_from_slice(&(self.grids.len() as u32).to_le_bytes());
        for (name, g) in &self.grids {
            write_grid(&mut out, name, g);
        }
        match &self.adam {
            None => out.push(0),
            Some(st) => {
                out.push(1);
                out.extend_from_slice(&st.step.to_le_bytes());
                for v in [st.config.lr, st.config.beta1, st.config.beta2, st.config.eps] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.extend_from_slice(&(st.m.len() as u32).to_le_bytes());
                for g in &st.m {
                    write_grid(&mut out, "m", g);
                }
                for g in &st.v {
                    write_grid(&mut out, "v", g);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r.take(8)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
                found: String::from_utf8_lossy(magic).into_owned(),
            }
            .into());
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(FormatError::UnsupportedVersion(version).into());
        }
        let manifest = r.string_u64()?;
        let n = r.u32()? as usize;
        let mut grids = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            grids.push(read_grid(&mut r)?);
        }
        let adam = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let config = AdamConfig {
                    lr: r.f64()?,
                    beta1: r.f64()?,
                    beta2: r.f64()?,
                    eps: r.f64()?,
                };
                let count = r.u32()? as usize;
                let mut m = Vec::with_capacity(count.min(1024));
                for _ in 0..count {
                    m.push(read_grid(&mut r)?.1);
                }
                let mut v = Vec::with_capacity(count.min(1024));
                for _ in 0..count {
                    v.push(read_grid(&mut r)?.1);
                }
                Some(AdamState { config, step, m, v })
            }
            flag => {
                return Err(FormatError::Validation {
                    offset: r.pos as u64 - 1,
                    message: format!("optimizer flag must be 0 or 1, got {flag}"),
                }
                .into())
            }
        };
        if r.pos != bytes.len() {
            return Err(FormatError::Validation {
                offset: r.pos as u64,
                message: format!("{} trailing bytes", bytes.len() - r.pos),
            }
            .into());
        }
        Ok(Checkpoint { manifest, grids, adam })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn write_grid(out: &mut Vec<u8>, name: &str, g: &Grid) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(g.shape().len() as u32).to_le_bytes());
    for &d in g.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in g.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_grid(r: &mut ByteReader<'_>) -> Result<(String, Grid)> {
    let name = r.string_u32()?;
    let rank_at = r.pos;
    let rank = r.u32()? as usize;
    if rank > 4 {
        return Err(FormatError::Validation {
            offset: rank_at as u64,
            message: format!("grid {name:?} has rank {rank} > 4"),
        }
        .into());
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u64()? as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| FormatError::Validation {
            offset: rank_at as u64,
            message: format!("grid {name:?} extent overflow"),
        })?;
    let raw = r.take(n.saturating_mul(8))?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((name, Grid::from_vec(&shape, data)?))
}

/// Cursor over a byte slice that reports truncation with offsets.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(FormatError::Truncated {
                offset: self.pos as u64,
                needed: (n - remaining) as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn utf8(&mut self, len: usize) -> Result<String, FormatError> {
        let at = self.pos;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| FormatError::Validation {
            offset: at as u64,
            message: "string is not valid UTF-8".into(),
        })
    }

    pub(crate) fn string_u32(&mut self) -> Result<String, FormatError> {
        let len = self.u32()? as usize;
        self.utf8(len)
    }

    pub(crate) fn string_u64(&mut self) -> Result<String, FormatError> {
        let len = self.u64()? as usize;
        self.utf8(len)
    }
}
