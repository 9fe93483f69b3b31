//! Parameter checkpoint file: magic "RMWT", version u32, then per-parameter
//! records of (name length u32, name bytes, rank u32, dims u32 each,
//! little-endian float32 payload). Round-trips bit-exactly.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RMWT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<F: Scalar>(
    path: &Path,
    tensors: &BTreeMap<String, Tensor<F>>,
) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(tensors))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<BTreeMap<String, Tensor<f32>>> {
    let bytes = std::fs::read(path)?;
    let mut reader = &bytes[..];

    let mut magic = [0u8; 4];
    reader
        .read_exact(&mut magic)
        .map_err(|_| Error::Config("checkpoint truncated before magic".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Config(format!(
            "bad checkpoint magic {magic:?}, expected RMWT"
        )));
    }
    let version = read_u32(&mut reader, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!(
            "unsupported checkpoint version {version}"
        )));
    }

    let mut tensors = BTreeMap::new();
    while !reader.is_empty() {
        let name_len = read_u32(&mut reader, "name length")? as usize;
        let mut name_bytes = vec![0u8; name_len];
        reader
            .read_exact(&mut name_bytes)
            .map_err(|_| Error::Config("checkpoint truncated in name".into()))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Config("checkpoint name is not UTF-8".into()))?;
        let rank = read_u32(&mut reader, "rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(&mut reader, "dim")? as usize);
        }
        let count: usize = dims.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let mut buf = [0u8; 4];
            reader
                .read_exact(&mut buf)
                .map_err(|_| Error::Config(format!("checkpoint truncated in {name:?} payload")))?;
            data.push(f32::from_le_bytes(buf));
        }
        if tensors.insert(name.clone(), Tensor::new(dims, data)?).is_some() {
            return Err(Error::Config(format!("duplicate checkpoint entry {name:?}")));
        }
    }
    Ok(tensors)
}

fn read_u32(reader: &mut &[u8], what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    reader
        .read_exact(&mut buf)
        .map_err(|_| Error::Config(format!("checkpoint truncated in {what}")))?;
    Ok(u32::from_le_bytes(buf))
}

/// Serialized checkpoint contents. Payloads are stored as float32
/// regardless of the in-memory scalar type.
pub fn checkpoint_bytes<F: Scalar>(tensors: &BTreeMap<String, Tensor<F>>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (name, tensor) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &d in tensor.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "conv1.weight".to_string(),
            Tensor::<f32>::from_fn(&[2, 3], |i| (i as f32 * 0.37).sin()),
        );
        tensors.insert("head.bias".to_string(), Tensor::<f32>::scalar(-1.5e-8));
        write_checkpoint(&path, &tensors).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back, tensors);

        // Writing the read-back map reproduces the file byte for byte.
        let path2 = dir.path().join("model2.ckpt");
        write_checkpoint(&path2, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(read_checkpoint(&path).is_err());
    }
}
