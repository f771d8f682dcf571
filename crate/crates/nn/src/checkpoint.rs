//! Parameter checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "V2VP"
//! version  u32      1
//! count    u32      number of entries
//! entry*   name_len u32, name (UTF-8), kind u8 (1 = trainable, 0 = buffer),
//!          ndim u32, dims u32 * ndim, values f32 * prod(dims)
//! ```
//!
//! Values are stored as 32-bit floats; loading widens them back to `f64`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"V2VP";
const VERSION: u32 = 1;

/// One decoded checkpoint entry.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub trainable: bool,
    pub value: Tensor,
}

pub fn write_checkpoint<W: Write>(store: &ParamStore, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, value, trainable) in store.entries_for_checkpoint() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[trainable as u8])?;
        w.write_all(&(value.shape().len() as u32).to_le_bytes())?;
        for &d in value.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in value.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<CheckpointEntry>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| NnError::Checkpoint("entry name is not UTF-8".into()))?;
        let mut kind = [0u8; 1];
        r.read_exact(&mut kind)?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        out.push(CheckpointEntry {
            name,
            trainable: kind[0] == 1,
            value: Tensor::new(&shape, data)?,
        });
    }
    Ok(out)
}

/// Overwrites the values of `store` with a checkpoint. Every store entry must
/// be present with an identical shape; extra checkpoint entries are an error.
pub fn load_into<R: Read>(store: &mut ParamStore, r: R) -> Result<()> {
    let entries = read_checkpoint(r)?;
    if entries.len() != store.len() {
        return Err(NnError::Checkpoint(format!(
            "checkpoint has {} entries, model expects {}",
            entries.len(),
            store.len()
        )));
    }
    for e in entries {
        let id = store.id_of(&e.name)?;
        if store.value(id).shape() != e.value.shape() {
            return Err(NnError::mismatch(
                "checkpoint",
                store.value(id).shape(),
                e.value.shape(),
            ));
        }
        *store.value_mut(id) = e.value;
    }
    Ok(())
}

pub fn save_file(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(store, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_file(store: &mut ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::open(path)?;
    load_into(store, std::io::BufReader::new(file))
}
