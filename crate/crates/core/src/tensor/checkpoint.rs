//! Flat binary container of named parameter arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! header  : b"MOLMIXCK" | u32 version | u32 scalar width in bytes (4 or 8)
//! record* : u32 name length | UTF-8 name | u64 element count | scalars
//! ```
//!
//! Shapes are not stored; the model configuration determines them.

use super::{ParamStore, Scalar, Tensor};
use crate::error::{bail, Result};
use std::io::{Read, Write};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MOLMIXCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<T: Scalar, W: Write>(
    mut w: W,
    arrays: &[(&str, &[T])],
) -> Result<()> {
    let mut buf = Vec::with_capacity(16);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(T::PRECISION.width() as u32).to_le_bytes());
    for (name, data) in arrays {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(data.len() as u64).to_le_bytes());
        for &v in data.iter() {
            v.write_le(&mut buf);
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads every record into a store of flat (1D) tensors, in file order.
pub fn read_checkpoint<T: Scalar, R: Read>(mut r: R) -> Result<ParamStore<T>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        bail!(Checkpoint, "bad magic header");
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        bail!(Checkpoint, "unsupported checkpoint version {version}");
    }
    let width = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if width != T::PRECISION.width() {
        bail!(
            Checkpoint,
            "checkpoint holds {width}-byte scalars but {:?} was requested",
            T::PRECISION
        );
    }
    let mut store = ParamStore::new();
    let mut pos = 16;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            bail!(Checkpoint, "truncated checkpoint at byte {}", *pos);
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    while pos < bytes.len() {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|e| crate::error::Error::Checkpoint(format!("parameter name: {e}")))?
            .to_string();
        let count = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let raw = take(&mut pos, count * width)?;
        let data = raw.chunks(width).map(T::read_le).collect();
        store.insert(name, Tensor::new(vec![count], data)?)?;
    }
    Ok(store)
}
