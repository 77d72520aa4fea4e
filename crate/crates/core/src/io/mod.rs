//! On-disk formats: volumes, ensembles, run configuration, tables and
//! dataset directories.

pub mod config;
pub mod dataset;
pub mod ensemble;
pub mod nifti;
pub mod tables;
pub mod volume;

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{BlessError, Result};

pub use config::RunConfig;
pub use dataset::{read_dataset, write_dataset, DatasetDir, TruthMaps};
pub use ensemble::{read_ensemble, write_ensemble, EnsembleFile};
pub use volume::{read_volume, write_volume, Volume, VolumeData};

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| BlessError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| BlessError::io(&tmp, e))?;
    f.sync_all().map_err(|e| BlessError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| BlessError::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| BlessError::io(path, e))
}

/// Little-endian cursor over a byte slice with format errors tagged by path.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Reader { bytes, pos: 0, path }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(BlessError::format(self.path, "file is truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn position(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn err(&self, msg: impl Into<String>) -> BlessError {
        BlessError::format(self.path, msg)
    }
}
