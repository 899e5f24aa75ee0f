//! TNS1 tensor files: `"TNS1"`, u32 LE rank, rank x u32 LE dims, row-major f64 LE payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const TNS_MAGIC: &[u8; 4] = b"TNS1";

pub fn write_tns_to(w: &mut impl Write, t: &Tensor) -> std::io::Result<()> {
    w.write_all(TNS_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_tns(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_tns_to(&mut w, t).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Parses a TNS1 stream. `origin` only labels errors.
pub fn read_tns_from(r: &mut impl Read, origin: &Path) -> Result<Tensor> {
    let bad = |detail: &str| Error::Format { path: origin.to_path_buf(), detail: detail.to_string() };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != TNS_MAGIC {
        return Err(bad("bad magic, expected TNS1"));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(|_| bad("truncated header"))?;
    let rank = u32::from_le_bytes(word) as usize;
    if rank == 0 || rank > 16 {
        return Err(bad(&format!("unsupported rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut word).map_err(|_| bad("truncated header"))?;
        shape.push(u32::from_le_bytes(word) as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n > 0)
        .ok_or_else(|| bad(&format!("invalid dims {shape:?}")))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| bad(&e.to_string()))?;
    if payload.len() < n * 8 {
        return Err(bad(&format!("truncated payload: {} of {} bytes", payload.len(), n * 8)));
    }
    if payload.len() > n * 8 {
        return Err(bad("trailing bytes after payload"));
    }
    let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    Tensor::new(&shape, data)
}

pub fn read_tns(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tns_from(&mut BufReader::new(file), path)
}
