//! `SLRM` model checkpoints.
//!
//! Little-endian: magic `b"SLRM"`, version u32, kind tag u8, then `F`, `D`,
//! `C`, `H` as u32, followed by every parameter block of
//! [`HeadModel::blocks`] as row-major f64.

use std::io::{Read, Write};

use super::{HeadKind, HeadModel};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"SLRM";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(model: &HeadModel, mut sink: W) -> Result<W> {
    sink.write_all(&MAGIC)?;
    sink.write_all(&VERSION.to_le_bytes())?;
    sink.write_all(&[model.kind().tag()])?;
    for v in [model.frames(), model.dim(), model.classes(), model.hidden()] {
        let v = u32::try_from(v).map_err(|_| Error::invalid("model dimension exceeds u32"))?;
        sink.write_all(&v.to_le_bytes())?;
    }
    for block in model.blocks() {
        let mut buf = Vec::with_capacity(block.len() * 8);
        for v in block {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        sink.write_all(&buf)?;
    }
    sink.flush()?;
    Ok(sink)
}

pub fn read_checkpoint<R: Read>(mut source: R) -> Result<HeadModel> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    let fail = |offset: usize, message: String| Error::Format {
        offset: offset as u64,
        message,
    };
    if bytes.len() < 25 {
        return Err(fail(bytes.len(), "truncated checkpoint header".into()));
    }
    if bytes[..4] != MAGIC {
        return Err(fail(0, "bad magic, expected \"SLRM\"".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let version = u32_at(4);
    if version != VERSION as usize {
        return Err(fail(4, format!("unsupported checkpoint version {version}")));
    }
    let kind = HeadKind::from_tag(bytes[8]).ok_or_else(|| fail(8, format!("unknown kind tag {}", bytes[8])))?;
    let (frames, dim, classes, hidden) = (u32_at(9), u32_at(13), u32_at(17), u32_at(21));
    if frames == 0 || dim == 0 || classes == 0 || hidden != classes {
        return Err(fail(
            9,
            format!("invalid dimensions F={frames} D={dim} C={classes} H={hidden}"),
        ));
    }

    let mut model = HeadModel::zeros(kind, frames, dim, classes);
    let mut offset = 25;
    for block in model.blocks_mut() {
        let end = offset + block.len() * 8;
        if end > bytes.len() {
            return Err(fail(bytes.len(), "truncated parameter block".into()));
        }
        for (v, raw) in block.iter_mut().zip(bytes[offset..end].chunks_exact(8)) {
            *v = f64::from_le_bytes(raw.try_into().unwrap());
        }
        offset = end;
    }
    if offset != bytes.len() {
        return Err(fail(offset, "trailing bytes after parameters".into()));
    }
    if !model.is_finite() {
        return Err(fail(25, "non-finite parameter".into()));
    }
    Ok(model)
}
