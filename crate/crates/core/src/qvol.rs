//! QVOL: a minimal little-endian volume container.
//!
//! ```text
//! magic        4 bytes  "QVL1"
//! dims         3 × u32
//! spacing      3 × f32  (mm)
//! origin       3 × f32  (mm)
//! orientation  9 × f32  row-major
//! dtype        u8       0 = f32
//! semantics    u8       0 intensity, 1 t2, 2 m0, 3 label
//! payload      dims.x·dims.y·dims.z × f32, x-fastest
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Grid, Mat3, Semantics, Volume};

pub const MAGIC: &[u8; 4] = b"QVL1";
pub const HEADER_LEN: usize = 4 + 3 * 4 + 3 * 4 + 3 * 4 + 9 * 4 + 2;
const DTYPE_F32: u8 = 0;

pub fn encode(vol: &Volume) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * vol.data.len());
    buf.extend_from_slice(MAGIC);
    for d in vol.grid.dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in vol.grid.spacing {
        buf.extend_from_slice(&(s as f32).to_le_bytes());
    }
    for o in vol.grid.origin {
        buf.extend_from_slice(&(o as f32).to_le_bytes());
    }
    for r in 0..3 {
        for c in 0..3 {
            buf.extend_from_slice(&(vol.grid.orientation[(r, c)] as f32).to_le_bytes());
        }
    }
    buf.push(DTYPE_F32);
    buf.push(vol.semantics.code());
    for v in &vol.data {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Format("QVOL header truncated".into()))?;
        self.pos = end;
        Ok(chunk.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take()?))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }
}

pub fn decode(bytes: &[u8]) -> Result<Volume> {
    let mut r = Reader { bytes, pos: 0 };
    if &r.take::<4>()? != MAGIC {
        return Err(Error::Format("bad QVOL magic".into()));
    }
    let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let spacing = [r.f32()? as f64, r.f32()? as f64, r.f32()? as f64];
    let origin = [r.f32()? as f64, r.f32()? as f64, r.f32()? as f64];
    let mut orientation = Mat3::zeros();
    for row in 0..3 {
        for col in 0..3 {
            orientation[(row, col)] = r.f32()? as f64;
        }
    }
    let dtype = r.u8()?;
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported QVOL dtype {dtype}")));
    }
    let code = r.u8()?;
    let semantics =
        Semantics::from_code(code).ok_or_else(|| Error::Format(format!("unknown QVOL semantics code {code}")))?;
    // f32 storage of the orientation cannot meet the 1e-10 orthonormality
    // bound, so re-orthonormalize before validating.
    let orientation = nalgebra::Rotation3::from_matrix_eps(&orientation, 1e-12, 100, nalgebra::Rotation3::identity())
        .into_inner();
    let grid = Grid::new(dims, spacing, origin, orientation).map_err(|e| Error::Format(e.to_string()))?;
    let n = grid.len();
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != 4 * n {
        return Err(Error::Format(format!(
            "QVOL payload has {} bytes, expected {}",
            payload.len(),
            4 * n
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
        .collect();
    Volume::new(grid, data, semantics).map_err(|e| Error::Format(e.to_string()))
}

pub fn write(path: impl AsRef<Path>, vol: &Volume) -> Result<()> {
    let mut f = fs::File::create(path.as_ref())?;
    f.write_all(&encode(vol))?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    decode(&fs::read(path)?)
}
