//! PNPV volume files: `"PNPV"`, version, dims, spacing, `f32` image and
//! `u8` labels, all little-endian and row-major.

use std::path::Path;

use pnp_core::synth::VolumeSample;

use crate::error::{PnpError, Result};

pub const MAGIC: &[u8; 4] = b"PNPV";
pub const VERSION: u32 = 1;
const HEADER: usize = 4 + 4 + 12 + 12;

pub fn encode(sample: &VolumeSample) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + sample.image.len() * 5);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in sample.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in sample.spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for v in &sample.image {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&sample.labels);
    out
}

/// Little-endian reader that remembers its offset for error messages.
pub(crate) struct Cursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], (u64, String)> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err((
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {} remain", self.bytes.len() - self.pos),
            )),
        }
    }

    pub fn u32(&mut self, what: &str) -> Result<u32, (u64, String)> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn f32(&mut self, what: &str) -> Result<f32, (u64, String)> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<VolumeSample, (u64, String)> {
    let mut c = Cursor::new(bytes);
    let magic = c.take(4, "magic")?;
    if magic != MAGIC {
        return Err((0, format!("expected magic \"PNPV\", found {:?}", String::from_utf8_lossy(magic))));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err((4, format!("unsupported version {version} (expected {VERSION})")));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = c.u32("dims")? as usize;
    }
    let mut spacing = [0f32; 3];
    for s in &mut spacing {
        *s = c.f32("spacing")?;
    }
    let n = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or((8, format!("dims {dims:?} overflow")))?;
    let raw = c.take(n.checked_mul(4).ok_or((8, "image size overflow".to_string()))?, "image")?;
    let image = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    let labels = c.take(n, "labels")?.to_vec();
    if c.pos != bytes.len() {
        return Err((c.pos as u64, format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(VolumeSample {
        dims,
        spacing,
        image,
        labels,
    })
}

pub fn write_volume(path: &Path, sample: &VolumeSample) -> Result<()> {
    std::fs::write(path, encode(sample)).map_err(|e| PnpError::io(path, e))
}

pub fn read_volume(path: &Path) -> Result<VolumeSample> {
    let bytes = std::fs::read(path).map_err(|e| PnpError::io(path, e))?;
    decode(&bytes).map_err(|(offset, detail)| PnpError::Format {
        path: path.to_path_buf(),
        offset,
        detail,
    })
}
