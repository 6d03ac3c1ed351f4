//! Binary grid container.
//!
//! Layout (little-endian):
//!
//! | field              | type            |
//! |--------------------|-----------------|
//! | magic `CHRMGRID`   | 8 bytes         |
//! | version (1)        | u32             |
//! | resolution         | 3 × u32         |
//! | bbox min, max      | 6 × f32         |
//! | channels, basis    | 2 × u32         |
//! | density_frozen     | u8              |
//! | density            | N × f32         |
//! | sh                 | N·C·B × f32     |
//! | occupancy          | N × u8 (0 / 1)  |

use std::fs;
use std::path::Path;

use super::{Aabb, SparseVoxelGrid};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CHRMGRID";
const VERSION: u32 = 1;

pub fn write_checkpoint(grid: &SparseVoxelGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + grid.voxel_count() * (5 + 4 * grid.sh_stride()));
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for n in grid.resolution() {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for v in grid.bbox().min.iter().chain(&grid.bbox().max) {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out.extend_from_slice(&(grid.channels() as u32).to_le_bytes());
    out.extend_from_slice(&(grid.basis() as u32).to_le_bytes());
    out.push(grid.is_density_frozen() as u8);
    for v in grid.density().iter().chain(grid.sh()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend(grid.occupancy().iter().map(|&o| o as u8));
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Malformed {
                kind: "checkpoint",
                offset: self.pos as u64,
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(n * 4, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<SparseVoxelGrid> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Malformed {
            kind: "checkpoint",
            offset: 0,
            message: "bad magic".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Malformed {
            kind: "checkpoint",
            offset: 8,
            message: format!("unsupported version {version}"),
        });
    }
    let resolution = [r.u32("resolution")? as usize, r.u32("resolution")? as usize, r.u32("resolution")? as usize];
    let b = r.f32s(6, "bbox")?;
    let bbox = Aabb::new(
        [b[0] as f64, b[1] as f64, b[2] as f64],
        [b[3] as f64, b[4] as f64, b[5] as f64],
    )?;
    let channels = r.u32("channels")? as usize;
    let basis = r.u32("basis")? as usize;
    let frozen = r.take(1, "frozen flag")?[0] != 0;
    let n: usize = resolution.iter().product();
    let density = r.f32s(n, "density")?;
    let sh = r.f32s(n * channels * basis, "sh")?;
    let occupancy = r.take(n, "occupancy")?.iter().map(|&b| b != 0).collect();
    if r.pos != bytes.len() {
        return Err(Error::Malformed {
            kind: "checkpoint",
            offset: r.pos as u64,
            message: "trailing bytes".into(),
        });
    }
    SparseVoxelGrid::from_parts(resolution, bbox, channels, basis, density, sh, occupancy, frozen)
}

pub fn save_checkpoint(grid: &SparseVoxelGrid, path: &Path) -> Result<()> {
    fs::write(path, write_checkpoint(grid)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<SparseVoxelGrid> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::super::tests::random_grid;
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let mut g = random_grid(3, 3, 1, 31);
        g.occupancy_mut()[4] = false;
        g.freeze_density();
        let bytes = write_checkpoint(&g);
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        assert_eq!(read_checkpoint(&bytes).unwrap(), g);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = write_checkpoint(&random_grid(2, 1, 0, 32));
        let err = read_checkpoint(&bytes[..50]).unwrap_err();
        assert!(matches!(err, Error::Malformed { offset: 48, .. }), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&bad).is_err());
    }
}
