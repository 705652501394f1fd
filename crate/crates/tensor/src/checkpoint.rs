//! Binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LARA" | version u32 | count u32 |
//!   count × ( name_len u16 | name utf-8 | rank u8 | dims u64×rank | f32×numel )
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LARA";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_tensors<W: Write>(mut w: W, tensors: &[(&str, &Tensor<f32>)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let count = u32::try_from(tensors.len())
        .map_err(|_| TensorError::Checkpoint("too many tensors".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| TensorError::Checkpoint(format!("name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(bytes)?;
        let rank = u8::try_from(t.dims().len())
            .map_err(|_| TensorError::Checkpoint(format!("rank too large: {name}")))?;
        w.write_all(&[rank])?;
        for d in t.dims() {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&payload)?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == ErrorKind::UnexpectedEof {
            TensorError::Checkpoint(format!("truncated file while reading {what}"))
        } else {
            TensorError::Io(e)
        }
    })
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(TensorError::Checkpoint(format!("bad magic {magic:?}")));
    }
    let mut u32buf = [0u8; 4];
    read_exact(&mut r, &mut u32buf, "version")?;
    let version = u32::from_le_bytes(u32buf);
    if version != FORMAT_VERSION {
        return Err(TensorError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    read_exact(&mut r, &mut u32buf, "tensor count")?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let mut lenbuf = [0u8; 2];
        read_exact(&mut r, &mut lenbuf, &format!("name length of tensor {i}"))?;
        let mut name = vec![0u8; u16::from_le_bytes(lenbuf) as usize];
        read_exact(&mut r, &mut name, &format!("name of tensor {i}"))?;
        let name = String::from_utf8(name)
            .map_err(|_| TensorError::Checkpoint(format!("tensor {i}: name is not UTF-8")))?;
        let mut rank = [0u8; 1];
        read_exact(&mut r, &mut rank, &format!("rank of `{name}`"))?;
        let mut dims = Vec::with_capacity(rank[0] as usize);
        let mut u64buf = [0u8; 8];
        for _ in 0..rank[0] {
            read_exact(&mut r, &mut u64buf, &format!("dims of `{name}`"))?;
            dims.push(u64::from_le_bytes(u64buf) as usize);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, d| acc.checked_mul(*d))
            .filter(|n| *n > 0 && *n < (1 << 34))
            .ok_or_else(|| TensorError::Checkpoint(format!("`{name}`: invalid dims {dims:?}")))?;
        let mut payload = vec![0u8; numel * 4];
        read_exact(&mut r, &mut payload, &format!("payload of `{name}`"))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::new(dims, data)?));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(TensorError::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

pub fn save_tensors(path: &Path, tensors: &[(&str, &Tensor<f32>)]) -> Result<()> {
    write_tensors(BufWriter::new(File::create(path)?), tensors)
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    read_tensors(BufReader::new(File::open(path)?))
}
