//! `BLSV` volume files: a stack of `count` lattice volumes of one dtype.
//!
//! Layout (little-endian): magic `BLSV`, version u32, ndim u32 (2 or 3),
//! ndim × u32 dims, count u32, dtype u8 (0 = u8, 1 = f64), then the payload
//! with the first axis fastest and volumes consecutive.

use std::path::Path;

use crate::error::{BlessError, Result};
use crate::lattice::LatticeMask;

use super::{read_bytes, write_atomic, Reader};

pub const MAGIC: &[u8; 4] = b"BLSV";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum VolumeData {
    U8(Vec<u8>),
    F64(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: Vec<usize>,
    pub count: usize,
    pub data: VolumeData,
}

impl Volume {
    fn check(dims: &[usize], count: usize, len: usize) -> Result<()> {
        if !(dims.len() == 2 || dims.len() == 3) || dims.iter().any(|&d| d == 0) {
            return Err(BlessError::Dimension(format!("volume dims {dims:?} must be 2 or 3 positive sizes")));
        }
        let sites: usize = dims.iter().product();
        if len != sites * count {
            return Err(BlessError::Dimension(format!(
                "volume payload has {len} values, expected {count} × {sites}"
            )));
        }
        Ok(())
    }

    pub fn new_u8(dims: &[usize], count: usize, data: Vec<u8>) -> Result<Self> {
        Self::check(dims, count, data.len())?;
        Ok(Volume { dims: dims.to_vec(), count, data: VolumeData::U8(data) })
    }

    pub fn new_f64(dims: &[usize], count: usize, data: Vec<f64>) -> Result<Self> {
        Self::check(dims, count, data.len())?;
        Ok(Volume { dims: dims.to_vec(), count, data: VolumeData::F64(data) })
    }

    /// Dense in-mask maps scattered onto the lattice, NaN outside the mask.
    pub fn from_maps(mask: &LatticeMask, maps: &[Vec<f64>]) -> Result<Self> {
        let mut data = Vec::with_capacity(maps.len() * mask.n_sites());
        for m in maps {
            if m.len() != mask.n_voxels() {
                return Err(BlessError::Dimension(format!(
                    "map has {} values for {} in-mask voxels",
                    m.len(),
                    mask.n_voxels()
                )));
            }
            data.extend(mask.scatter(m, f64::NAN));
        }
        Self::new_f64(mask.dims(), maps.len(), data)
    }

    pub fn from_binary_maps(mask: &LatticeMask, maps: &[Vec<bool>]) -> Result<Self> {
        let mut data = Vec::with_capacity(maps.len() * mask.n_sites());
        for m in maps {
            let as_u8: Vec<u8> = m.iter().map(|&b| b as u8).collect();
            if as_u8.len() != mask.n_voxels() {
                return Err(BlessError::Dimension("binary map does not match the mask".into()));
            }
            data.extend(mask.scatter(&as_u8, 0));
        }
        Self::new_u8(mask.dims(), maps.len(), data)
    }

    pub fn sites(&self) -> usize {
        self.dims.iter().product()
    }

    /// Volume `i` as f64 regardless of the stored dtype.
    pub fn volume_f64(&self, i: usize) -> Vec<f64> {
        let s = self.sites();
        match &self.data {
            VolumeData::U8(v) => v[i * s..(i + 1) * s].iter().map(|&b| b as f64).collect(),
            VolumeData::F64(v) => v[i * s..(i + 1) * s].to_vec(),
        }
    }

    pub fn volume_u8(&self, i: usize) -> Result<Vec<u8>> {
        let s = self.sites();
        match &self.data {
            VolumeData::U8(v) => Ok(v[i * s..(i + 1) * s].to_vec()),
            VolumeData::F64(_) => Err(BlessError::Invalid("expected a binary (u8) volume".into())),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.count as u32).to_le_bytes());
        match &self.data {
            VolumeData::U8(v) => {
                out.push(0);
                out.extend_from_slice(v);
            }
            VolumeData::F64(v) => {
                out.push(1);
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        if r.take(4)? != MAGIC {
            return Err(r.err("not a BLSV volume (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(format!("unsupported BLSV version {version}")));
        }
        let ndim = r.u32()? as usize;
        if !(ndim == 2 || ndim == 3) {
            return Err(r.err(format!("ndim must be 2 or 3, found {ndim}")));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32()? as usize);
        }
        let count = r.u32()? as usize;
        let dtype = r.u8()?;
        let n = dims.iter().product::<usize>() * count;
        let vol = match dtype {
            0 => {
                if r.remaining() != n {
                    return Err(r.err(format!("payload has {} bytes, expected {n}", r.remaining())));
                }
                Volume::new_u8(&dims, count, r.take(n)?.to_vec())
            }
            1 => {
                if r.remaining() != n * 8 {
                    return Err(r.err(format!("payload has {} bytes, expected {}", r.remaining(), n * 8)));
                }
                let raw = r.take(n * 8)?;
                let v = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                Volume::new_f64(&dims, count, v)
            }
            t => return Err(r.err(format!("unknown dtype tag {t}"))),
        };
        vol.map_err(|e| BlessError::format(path, e.to_string()))
    }
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    write_atomic(path, &v.encode())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    Volume::decode(&read_bytes(path)?, path)
}
