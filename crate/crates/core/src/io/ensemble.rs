//! `BLSB` ensemble files: B replicate coefficient maps with a checksum.
//!
//! Layout (little-endian): magic `BLSB`, version u32, B u32, M u32, P u32,
//! B·M·P f64 values in (b, j, p) order, then the 64-bit FNV-1a hash of every
//! preceding byte.

use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;

use crate::error::Result;

use super::{read_bytes, write_atomic, Reader};

pub const MAGIC: &[u8; 4] = b"BLSB";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleFile {
    pub b: usize,
    pub m: usize,
    pub p: usize,
    pub values: Vec<f64>,
}

fn checksum(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

impl EnsembleFile {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.values.len() * 8 + 8);
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.b as u32, self.m as u32, self.p as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for x in &self.values {
            out.extend_from_slice(&x.to_le_bytes());
        }
        let c = checksum(&out);
        out.extend_from_slice(&c.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        if r.take(4)? != MAGIC {
            return Err(r.err("not a BLSB ensemble (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(format!("unsupported BLSB version {version}")));
        }
        let (b, m, p) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let n = b * m * p;
        if r.remaining() != n * 8 + 8 {
            return Err(r.err(format!(
                "expected {} payload bytes for B = {b}, M = {m}, P = {p}, found {}",
                n * 8 + 8,
                r.remaining()
            )));
        }
        let raw = r.take(n * 8)?;
        let body_end = r.position();
        let stored = r.u64()?;
        if stored != checksum(&bytes[..body_end]) {
            return Err(r.err("checksum mismatch (file is corrupted)"));
        }
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(EnsembleFile { b, m, p, values })
    }
}

pub fn write_ensemble(path: &Path, e: &EnsembleFile) -> Result<()> {
    write_atomic(path, &e.encode())
}

pub fn read_ensemble(path: &Path) -> Result<EnsembleFile> {
    EnsembleFile::decode(&read_bytes(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fnv_reference_values() {
        // Published FNV-1a 64 test vectors.
        assert_eq!(checksum(b""), 0xcbf29ce484222325);
        assert_eq!(checksum(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(checksum(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn any_flipped_bit_is_detected() {
        let e = EnsembleFile { b: 2, m: 3, p: 1, values: vec![0.5, -1.0, 2.0, 3.0, 1e-300, f64::MAX] };
        let bytes = e.encode();
        let path = Path::new("e.blsb");
        assert_eq!(EnsembleFile::decode(&bytes, path).unwrap(), e);
        for i in 0..bytes.len() {
            let mut c = bytes.clone();
            c[i] ^= 0x10;
            assert!(EnsembleFile::decode(&c, path).is_err(), "byte {i}");
        }
        assert!(EnsembleFile::decode(&bytes[..bytes.len() - 3], path).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(b in 1usize..4, m in 1usize..6, p in 1usize..3, seed in any::<u64>()) {
            let mut s = seed;
            let values: Vec<f64> = (0..b * m * p)
                .map(|_| { s = s.wrapping_mul(6364136223846793005).wrapping_add(1); f64::from_bits(s) })
                .collect();
            let e = EnsembleFile { b, m, p, values };
            let back = EnsembleFile::decode(&e.encode(), Path::new("p")).unwrap();
            prop_assert_eq!(back.encode(), e.encode());
        }
    }
}
