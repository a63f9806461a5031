//! Binary checkpoint: named `f64` arrays plus the run configuration text.
//!
//! Layout (little endian): magic `MONFAPCK`, `u32` version, `u64` length and
//! UTF-8 bytes of the config text, `u64` array count, then per array a `u32`
//! name length, name bytes, `u8` trainable flag, `u32` rank, `u64` dims and
//! the raw values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MONFAPCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub trainable: bool,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, config: impl Into<String>) -> Checkpoint {
        Checkpoint {
            config: config.into(),
            arrays: store
                .iter()
                .map(|(_, p)| NamedArray {
                    name: p.name.clone(),
                    trainable: p.trainable,
                    value: p.value.clone(),
                })
                .collect(),
        }
    }

    /// Copies every array into `store`. Names, count and shapes must match
    /// exactly.
    pub fn apply(&self, store: &mut ParamStore) -> Result<()> {
        if self.arrays.len() != store.len() {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint has {} arrays, model has {} parameters",
                self.arrays.len(),
                store.len()
            )));
        }
        for (a, id) in self.arrays.iter().zip(store.ids().collect::<Vec<_>>()) {
            let p = store.param(id);
            if p.name != a.name {
                return Err(Error::CheckpointMismatch(format!("expected parameter {}, found {}", p.name, a.name)));
            }
            if p.value.shape() != a.value.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "{}: checkpoint shape {:?}, model shape {:?}",
                    a.name,
                    a.value.shape(),
                    p.value.shape()
                )));
            }
        }
        for (a, id) in self.arrays.iter().zip(store.ids().collect::<Vec<_>>()) {
            *store.get_mut(id) = a.value.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        b.extend_from_slice(self.config.as_bytes());
        b.extend_from_slice(&(self.arrays.len() as u64).to_le_bytes());
        for a in &self.arrays {
            b.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            b.extend_from_slice(a.name.as_bytes());
            b.push(u8::from(a.trainable));
            b.extend_from_slice(&(a.value.ndim() as u32).to_le_bytes());
            for &d in a.value.shape() {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in a.value.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(take(&mut r)?);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(take(&mut r)?) as usize;
        let config = read_string(&mut r, len)?;
        let count = u64::from_le_bytes(take(&mut r)?) as usize;
        let mut arrays = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = u32::from_le_bytes(take(&mut r)?) as usize;
            let name = read_string(&mut r, len)?;
            let [flag] = take::<1>(&mut r)?;
            let rank = u32::from_le_bytes(take(&mut r)?) as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(take(&mut r)?) as usize);
            }
            let n: usize = shape.iter().product();
            if n.checked_mul(8).is_none_or(|b| b > r.len()) {
                return Err(Error::Format(format!("truncated data for {name}")));
            }
            let data = (0..n).map(|_| take(&mut r).map(f64::from_le_bytes)).collect::<Result<Vec<_>>>()?;
            arrays.push(NamedArray {
                name,
                trainable: flag != 0,
                value: Tensor::from_vec(&shape, data)?,
            });
        }
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", r.len())));
        }
        Ok(Checkpoint { config, arrays })
    }

    /// Writes to a temporary sibling, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    if r.len() < buf.len() {
        return Err(Error::Format("truncated checkpoint".into()));
    }
    let (head, tail) = r.split_at(buf.len());
    buf.copy_from_slice(head);
    *r = tail;
    Ok(())
}

fn take<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_exact(r, &mut b)?;
    Ok(b)
}

fn read_string(r: &mut &[u8], len: usize) -> Result<String> {
    if r.len() < len {
        return Err(Error::Format("truncated checkpoint".into()));
    }
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("invalid UTF-8 in checkpoint".into()))
}
