//! Minimal single-file NIfTI-1 reader (`.nii`, optionally gzipped). Only the
//! dimensions, datatype, scaling and voxel payload are interpreted.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{BlessError, Result};

use super::read_bytes;
use super::volume::Volume;

const HEADER_SIZE: usize = 348;

struct Header {
    big_endian: bool,
    dims: Vec<usize>,
    count: usize,
    datatype: i16,
    vox_offset: usize,
    slope: f64,
    inter: f64,
}

fn i16_at(b: &[u8], off: usize, be: bool) -> i16 {
    let a = [b[off], b[off + 1]];
    if be { i16::from_be_bytes(a) } else { i16::from_le_bytes(a) }
}

fn i32_at(b: &[u8], off: usize, be: bool) -> i32 {
    let a: [u8; 4] = b[off..off + 4].try_into().expect("4 bytes");
    if be { i32::from_be_bytes(a) } else { i32::from_le_bytes(a) }
}

fn f32_at(b: &[u8], off: usize, be: bool) -> f32 {
    let a: [u8; 4] = b[off..off + 4].try_into().expect("4 bytes");
    if be { f32::from_be_bytes(a) } else { f32::from_le_bytes(a) }
}

fn parse_header(b: &[u8], path: &Path) -> Result<Header> {
    let fail = |msg: String| BlessError::format(path, msg);
    if b.len() < HEADER_SIZE {
        return Err(fail("shorter than a NIfTI-1 header".into()));
    }
    let big_endian = match (i32_at(b, 0, false), i32_at(b, 0, true)) {
        (348, _) => false,
        (_, 348) => true,
        _ => return Err(fail("sizeof_hdr is not 348; not a NIfTI-1 file".into())),
    };
    if &b[344..347] != b"n+1" {
        return Err(fail("only single-file NIfTI-1 (magic n+1) is supported".into()));
    }
    let be = big_endian;
    let ndim = i16_at(b, 40, be);
    if !(1..=7).contains(&ndim) {
        return Err(fail(format!("dim[0] = {ndim} out of range")));
    }
    let d: Vec<usize> = (1..=ndim as usize)
        .map(|i| i16_at(b, 40 + 2 * i, be).max(1) as usize)
        .collect();
    // A singleton third axis makes the image 2-D; axes past the third are
    // stacked as separate volumes.
    let axis = |i: usize| d.get(i).copied().unwrap_or(1);
    let dims = if axis(2) > 1 { vec![axis(0), axis(1), axis(2)] } else { vec![axis(0), axis(1)] };
    let count = d.iter().skip(3).product::<usize>();
    let slope = f32_at(b, 112, be) as f64;
    let inter = f32_at(b, 116, be) as f64;
    Ok(Header {
        big_endian,
        dims,
        count,
        datatype: i16_at(b, 70, be),
        vox_offset: f32_at(b, 108, be) as usize,
        slope,
        inter,
    })
}

fn decode_values(h: &Header, raw: &[u8], n: usize, path: &Path) -> Result<Vec<f64>> {
    let be = h.big_endian;
    macro_rules! read_as {
        ($t:ty, $size:expr) => {{
            if raw.len() < n * $size {
                return Err(BlessError::format(path, "voxel payload is truncated"));
            }
            raw[..n * $size]
                .chunks_exact($size)
                .map(|c| {
                    let a: [u8; $size] = c.try_into().expect("chunk");
                    (if be { <$t>::from_be_bytes(a) } else { <$t>::from_le_bytes(a) }) as f64
                })
                .collect::<Vec<f64>>()
        }};
    }
    let v = match h.datatype {
        2 => read_as!(u8, 1),
        4 => read_as!(i16, 2),
        8 => read_as!(i32, 4),
        16 => read_as!(f32, 4),
        64 => read_as!(f64, 8),
        256 => read_as!(i8, 1),
        512 => read_as!(u16, 2),
        768 => read_as!(u32, 4),
        t => return Err(BlessError::format(path, format!("unsupported NIfTI datatype {t}"))),
    };
    if h.slope != 0.0 && h.slope.is_finite() && !(h.slope == 1.0 && h.inter == 0.0) {
        Ok(v.into_iter().map(|x| x * h.slope + h.inter).collect())
    } else {
        Ok(v)
    }
}

pub fn decode_nifti(bytes: &[u8], path: &Path, binarize: bool) -> Result<Volume> {
    let plain;
    let b: &[u8] = if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(bytes)
            .read_to_end(&mut out)
            .map_err(|e| BlessError::format(path, format!("gzip: {e}")))?;
        plain = out;
        &plain
    } else {
        bytes
    };
    let h = parse_header(b, path)?;
    let n = h.dims.iter().product::<usize>() * h.count;
    let off = h.vox_offset.max(HEADER_SIZE);
    if b.len() < off {
        return Err(BlessError::format(path, "vox_offset beyond end of file"));
    }
    let values = decode_values(&h, &b[off..], n, path)?;
    if binarize {
        Volume::new_u8(&h.dims, h.count, values.iter().map(|&v| (v > 0.5) as u8).collect())
    } else {
        Volume::new_f64(&h.dims, h.count, values)
    }
}

pub fn read_nifti(path: &Path, binarize: bool) -> Result<Volume> {
    decode_nifti(&read_bytes(path)?, path, binarize)
}

/// A little-endian uncompressed NIfTI-1 image; used by tests and examples.
pub fn encode_nifti_f32(dims: &[usize], values: &[f32]) -> Vec<u8> {
    let mut h = vec![0u8; HEADER_SIZE + 4];
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    h[40..42].copy_from_slice(&(dims.len() as i16).to_le_bytes());
    for (i, &d) in dims.iter().enumerate() {
        h[42 + 2 * i..44 + 2 * i].copy_from_slice(&(d as i16).to_le_bytes());
    }
    h[70..72].copy_from_slice(&16i16.to_le_bytes());
    h[72..74].copy_from_slice(&32i16.to_le_bytes());
    h[108..112].copy_from_slice(&352f32.to_le_bytes());
    h[112..116].copy_from_slice(&1f32.to_le_bytes());
    h[344..348].copy_from_slice(b"n+1\0");
    for v in values {
        h.extend_from_slice(&v.to_le_bytes());
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use flate2::write::GzEncoder;
    use flate2::Compression;
    use std::io::Write;

    #[test]
    fn reads_plain_and_gzipped() {
        let vals: Vec<f32> = (0..24).map(|i| (i % 3) as f32 * 0.5).collect();
        let raw = encode_nifti_f32(&[2, 3, 4], &vals);
        let p = Path::new("t.nii");
        let v = decode_nifti(&raw, p, false).unwrap();
        assert_eq!(v.dims, vec![2, 3, 4]);
        assert_eq!(v.count, 1);
        assert_eq!(v.volume_f64(0), vals.iter().map(|&x| x as f64).collect::<Vec<_>>());
        let mut gz = GzEncoder::new(Vec::new(), Compression::default());
        gz.write_all(&raw).unwrap();
        let zipped = gz.finish().unwrap();
        assert_eq!(decode_nifti(&zipped, p, false).unwrap(), v);
        let bin = decode_nifti(&raw, p, true).unwrap();
        assert_eq!(bin.volume_u8(0).unwrap(), vals.iter().map(|&x| (x > 0.5) as u8).collect::<Vec<_>>());
    }

    #[test]
    fn two_d_and_stacked_volumes() {
        let raw = encode_nifti_f32(&[3, 2, 1], &[0.0; 6]);
        let v = decode_nifti(&raw, Path::new("a"), false).unwrap();
        assert_eq!((v.dims.clone(), v.count), (vec![3, 2], 1));
        let raw = encode_nifti_f32(&[2, 2, 2, 3], &[1.0; 24]);
        let v = decode_nifti(&raw, Path::new("b"), false).unwrap();
        assert_eq!((v.dims.clone(), v.count), (vec![2, 2, 2], 3));
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode_nifti(&[0u8; 400], Path::new("z"), false).is_err());
        let mut raw = encode_nifti_f32(&[2, 2], &[1.0; 4]);
        raw.truncate(raw.len() - 2);
        assert!(decode_nifti(&raw, Path::new("z"), false).is_err());
    }
}
