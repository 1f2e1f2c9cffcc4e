use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"NRMCKPT1";

/// Named arrays: name -> (shape, row-major values).
pub type ArrayMap = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

#[derive(Serialize, Deserialize)]
struct ArrayDesc {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    meta: serde_json::Value,
    arrays: Vec<ArrayDesc>,
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes a checkpoint: magic, JSON header (version, caller metadata, array
/// table), then the raw little-endian f64 payloads in header order.
pub fn save_arrays(path: &Path, meta: serde_json::Value, arrays: &ArrayMap) -> Result<()> {
    let header = Header {
        version: CHECKPOINT_VERSION,
        meta,
        arrays: arrays
            .iter()
            .map(|(name, (shape, values))| {
                if shape.iter().product::<usize>() != values.len() {
                    return Err(Error::ShapeMismatch {
                        op: "checkpoint save",
                        lhs: shape.clone(),
                        rhs: vec![values.len()],
                    });
                }
                Ok(ArrayDesc {
                    name: name.clone(),
                    shape: shape.clone(),
                    dtype: "f64".into(),
                })
            })
            .collect::<Result<_>>()?,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header encode: {}", e)))?;

    let mut file = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| io_err(path, e))?,
    );
    file.write_all(MAGIC).map_err(|e| io_err(path, e))?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())
        .map_err(|e| io_err(path, e))?;
    file.write_all(&header_bytes).map_err(|e| io_err(path, e))?;
    for (_, (_, values)) in arrays.iter() {
        let mut buf = Vec::with_capacity(values.len() * 8);
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&buf).map_err(|e| io_err(path, e))?;
    }
    file.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Reads a checkpoint back as (caller metadata, arrays). Rejects bad magic,
/// unsupported versions, and truncated payloads.
pub fn load_arrays(path: &Path) -> Result<(serde_json::Value, ArrayMap)> {
    let mut file = std::io::BufReader::new(
        std::fs::File::open(path).map_err(|e| io_err(path, e))?,
    );
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint(format!("{}: truncated magic", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)
        .map_err(|_| Error::Checkpoint(format!("{}: truncated header length", path.display())))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)
        .map_err(|_| Error::Checkpoint(format!("{}: truncated header", path.display())))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: header decode: {}", path.display(), e)))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {} (expected {})",
            path.display(),
            header.version,
            CHECKPOINT_VERSION
        )));
    }
    let mut arrays = ArrayMap::new();
    for desc in &header.arrays {
        if desc.dtype != "f64" {
            return Err(Error::Checkpoint(format!(
                "{}: array {} has unsupported dtype {}",
                path.display(),
                desc.name,
                desc.dtype
            )));
        }
        let n: usize = desc.shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        file.read_exact(&mut buf).map_err(|_| {
            Error::Checkpoint(format!(
                "{}: truncated payload for array {}",
                path.display(),
                desc.name
            ))
        })?;
        let values: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if arrays
            .insert(desc.name.clone(), (desc.shape.clone(), values))
            .is_some()
        {
            return Err(Error::Checkpoint(format!(
                "{}: duplicate array name {}",
                path.display(),
                desc.name
            )));
        }
    }
    let mut rest = [0u8; 1];
    if file.read(&mut rest).map_err(|e| io_err(path, e))? != 0 {
        return Err(Error::Checkpoint(format!(
            "{}: trailing bytes after last array",
            path.display()
        )));
    }
    Ok((header.meta, arrays))
}
