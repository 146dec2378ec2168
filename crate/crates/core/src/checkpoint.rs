//! CACP parameter checkpoints: magic `CACP`, `u16` version, then a sequence
//! of named tensors (`u16` name length, UTF-8 name, `u8` rank, `u32` extents,
//! little-endian `f64` values) until end of file.

use std::io::{Read, Write};

use crate::error::{CacError, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CACP";
pub const CHECKPOINT_VERSION: u16 = 1;

fn io_err(e: std::io::Error) -> CacError {
    CacError::Io {
        path: "<stream>".into(),
        message: e.to_string(),
    }
}

pub fn write_checkpoint<W: Write>(mut out: W, tensors: &[(String, &Tensor)]) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io_err)?;
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| CacError::Format(format!("tensor name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| CacError::Format(format!("rank of {name} exceeds 255")))?;
        let mut buf = Vec::with_capacity(3 + name.len() + 4 * t.rank() + 8 * t.len());
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(rank);
        for &e in t.shape() {
            let e = u32::try_from(e).map_err(|_| CacError::Format(format!("extent of {name} exceeds u32")))?;
            buf.extend_from_slice(&e.to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf).map_err(io_err)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes).map_err(io_err)?;
    let mut cur = bytes.as_slice();
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(CacError::Format(format!("truncated checkpoint reading {what}")));
        }
        let (head, rest) = cur.split_at(n);
        cur = rest;
        Ok(head)
    };
    if take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(CacError::Format("bad magic, expected CACP".into()));
    }
    let version = u16::from_le_bytes(take(2, "version")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(CacError::Format(format!("unsupported CACP version {version}")));
    }
    let mut out = Vec::new();
    loop {
        let Ok(len) = take(2, "name length") else { break };
        let len = u16::from_le_bytes(len.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(len, "name")?.to_vec())
            .map_err(|_| CacError::Format("tensor name is not UTF-8".into()))?;
        let rank = take(1, "rank")?[0] as usize;
        let shape: Vec<usize> = take(4 * rank, "extents")?
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
            .collect();
        let n: usize = shape.iter().product();
        let data = take(8 * n, &name)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

/// Copies checkpoint values into `targets` by name; every target must be
/// present with a matching shape.
pub fn load_into(entries: &[(String, Tensor)], targets: Vec<(String, &mut Tensor)>) -> Result<()> {
    for (name, t) in targets {
        let (_, src) = entries
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| CacError::Format(format!("checkpoint lacks tensor {name}")))?;
        if src.shape() != t.shape() {
            return Err(CacError::Format(format!(
                "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                src.shape(),
                t.shape()
            )));
        }
        t.data_mut().copy_from_slice(src.data());
    }
    Ok(())
}
