//! Binary checkpoint manifest: a versioned header, the config snapshot,
//! a tensor table (name, dtype, shape, offset) and a raw little-endian
//! payload. Loading then saving is byte-identical.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Elem;

pub const MAGIC: &[u8; 8] = b"LDSRCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: u8,
    pub dims: Vec<usize>,
    pub offset: u64,
    pub byte_len: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub format_version: u32,
    pub stage: u32,
    pub config_text: String,
    pub tensors: Vec<TensorEntry>,
    pub payload: Vec<u8>,
}

fn dtype_size(dtype: u8) -> Result<usize> {
    match dtype {
        0 => Ok(4),
        1 => Ok(8),
        other => Err(Error::Checkpoint(format!("unknown dtype tag {other}"))),
    }
}

impl Manifest {
    /// Snapshot the given stores (in order) into a manifest.
    pub fn from_stores<E: Elem>(
        stage: u32,
        config_text: String,
        stores: &[&ParamStore<E>],
    ) -> Manifest {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        for store in stores {
            for p in store.params() {
                let offset = payload.len() as u64;
                for v in p.data() {
                    v.write_le(&mut payload);
                }
                tensors.push(TensorEntry {
                    name: p.name.clone(),
                    dtype: E::DTYPE,
                    dims: p.dims().to_vec(),
                    offset,
                    byte_len: (p.data().len() * E::BYTE_SIZE) as u64,
                });
            }
        }
        Manifest {
            format_version: FORMAT_VERSION,
            stage,
            config_text,
            tensors,
            payload,
        }
    }

    /// Copy tensors into the stores by name. Every parameter of every
    /// store must be present with matching dtype and shape; missing names
    /// are reported together.
    pub fn load_into_stores<E: Elem>(&self, stores: &mut [&mut ParamStore<E>]) -> Result<()> {
        let by_name: std::collections::HashMap<&str, &TensorEntry> = self
            .tensors
            .iter()
            .map(|t| (t.name.as_str(), t))
            .collect();
        let mut missing = Vec::new();
        for store in stores.iter() {
            for p in store.params() {
                match by_name.get(p.name.as_str()) {
                    None => missing.push(p.name.clone()),
                    Some(t) => {
                        if t.dtype != E::DTYPE {
                            return Err(Error::Checkpoint(format!(
                                "tensor {} dtype {} does not match expected {}",
                                t.name,
                                t.dtype,
                                E::DTYPE
                            )));
                        }
                        if t.dims != p.dims() {
                            return Err(Error::Checkpoint(format!(
                                "tensor {} shape {:?} does not match expected {:?}",
                                t.name,
                                t.dims,
                                p.dims()
                            )));
                        }
                    }
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingTensors(missing));
        }
        // All validated; now copy.
        for store in stores.iter_mut() {
            for idx in 0..store.len() {
                let pid = crate::nn::PId(idx);
                let name = store.get(pid).name.clone();
                let t = by_name[name.as_str()];
                let start = t.offset as usize;
                let data: Vec<E> = (0..(t.byte_len as usize / E::BYTE_SIZE))
                    .map(|i| E::read_le(&self.payload[start + i * E::BYTE_SIZE..]))
                    .collect();
                store.get_mut(pid).set_data(data);
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        out.extend_from_slice(&self.stage.to_le_bytes());
        let cfg = self.config_text.as_bytes();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name);
            out.push(t.dtype);
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for d in &t.dims {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            out.extend_from_slice(&t.offset.to_le_bytes());
            out.extend_from_slice(&t.byte_len.to_le_bytes());
        }
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Manifest> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(8)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let format_version = cur.u32()?;
        if format_version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: format_version,
                expected: FORMAT_VERSION,
            });
        }
        let stage = cur.u32()?;
        let cfg_len = cur.u32()? as usize;
        let config_text = String::from_utf8(cur.take(cfg_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?;
        let n_tensors = cur.u32()? as usize;
        if n_tensors > 1_000_000 {
            return Err(Error::Checkpoint("implausible tensor count".into()));
        }
        let mut tensors = Vec::with_capacity(n_tensors);
        let mut names = std::collections::HashSet::new();
        for _ in 0..n_tensors {
            let name_len = cur.u32()? as usize;
            if name_len > 4096 {
                return Err(Error::Checkpoint("implausible tensor name length".into()));
            }
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            if !names.insert(name.clone()) {
                return Err(Error::Checkpoint(format!("duplicate tensor name {name}")));
            }
            let dtype = cur.take(1)?[0];
            let esize = dtype_size(dtype)?;
            let ndim = cur.u32()? as usize;
            if ndim > 8 {
                return Err(Error::Checkpoint("implausible tensor rank".into()));
            }
            let mut dims = Vec::with_capacity(ndim);
            let mut numel: u128 = 1;
            for _ in 0..ndim {
                let d = cur.u64()? as usize;
                numel = numel.saturating_mul(d as u128);
                dims.push(d);
            }
            let offset = cur.u64()?;
            let byte_len = cur.u64()?;
            if numel.saturating_mul(esize as u128) != byte_len as u128 {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: byte length {byte_len} does not match shape {dims:?}"
                )));
            }
            tensors.push(TensorEntry {
                name,
                dtype,
                dims,
                offset,
                byte_len,
            });
        }
        let payload_len = cur.u64()? as usize;
        let payload = cur.take(payload_len)?.to_vec();
        if cur.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after payload",
                bytes.len() - cur.pos
            )));
        }
        for t in &tensors {
            let end = t
                .offset
                .checked_add(t.byte_len)
                .ok_or_else(|| Error::Checkpoint("tensor range overflow".into()))?;
            if end as usize > payload.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} extends past the payload",
                    t.name
                )));
            }
        }
        Ok(Manifest {
            format_version,
            stage,
            config_text,
            tensors,
            payload,
        })
    }

    /// Atomic save: write to a temp file, then rename into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Manifest> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file: need {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
