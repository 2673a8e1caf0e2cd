//! VCKP checkpoint container.
//!
//! Layout (all integers little-endian):
//! `"VCKP"` | version `u16` = 1 | metadata length `u32` | metadata (UTF-8
//! JSON object) | entry count `u32` | entries. Each entry is name length
//! `u32` | name (UTF-8) | rank `u32` | dims `u32` × rank | payload `f32` ×
//! product(dims).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{numel, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

pub const VCKP_MAGIC: &[u8; 4] = b"VCKP";
pub const VCKP_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub metadata: serde_json::Map<String, serde_json::Value>,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn from_store<T: Real>(store: &ParamStore<T>, metadata: serde_json::Map<String, serde_json::Value>) -> Self {
        let tensors = store
            .iter()
            .map(|(_, p)| {
                let data = p.value.data().iter().map(|v| v.to_f32().unwrap()).collect();
                (p.name.clone(), p.value.shape().to_vec(), data)
            })
            .collect();
        Self { metadata, tensors }
    }

    /// Only the tensors whose names start with one of `prefixes`.
    pub fn subset(&self, prefixes: &[&str]) -> Self {
        Self {
            metadata: self.metadata.clone(),
            tensors: self
                .tensors
                .iter()
                .filter(|(n, _, _)| prefixes.iter().any(|p| n.starts_with(p)))
                .cloned()
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
    }

    /// Copies every stored tensor into `store`, validating names and shapes
    /// against the model definition. Tensors whose name starts with one of
    /// `optional` may be absent from the checkpoint.
    pub fn load_into<T: Real>(&self, store: &mut ParamStore<T>, optional: &[&str]) -> Result<()> {
        let by_name: BTreeMap<&str, (&Vec<usize>, &Vec<f32>)> =
            self.tensors.iter().map(|(n, s, d)| (n.as_str(), (s, d))).collect();
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone(), p.value.shape().to_vec())).collect();
        for (id, name, shape) in ids {
            match by_name.get(name.as_str()) {
                Some((s, d)) => {
                    if **s != shape {
                        return Err(Error::Checkpoint(format!(
                            "tensor {name}: checkpoint shape {s:?}, model expects {shape:?}"
                        )));
                    }
                    let t = Tensor::new(shape, d.iter().map(|&v| T::from_f32(v).unwrap()).collect())?;
                    store.get_mut(id).value = t;
                }
                None if optional.iter().any(|p| name.starts_with(p)) => {}
                None => return Err(Error::Checkpoint(format!("tensor {name} missing from checkpoint"))),
            }
        }
        for name in by_name.keys() {
            if store.id(name).is_none() {
                return Err(Error::Checkpoint(format!("checkpoint tensor {name} not in model")));
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(VCKP_MAGIC);
        out.write_u16::<LittleEndian>(VCKP_VERSION).unwrap();
        let meta = serde_json::to_vec(&self.metadata).expect("metadata serializes");
        out.write_u32::<LittleEndian>(meta.len() as u32).unwrap();
        out.extend_from_slice(&meta);
        out.write_u32::<LittleEndian>(self.tensors.len() as u32).unwrap();
        for (name, shape, data) in &self.tensors {
            out.write_u32::<LittleEndian>(name.len() as u32).unwrap();
            out.extend_from_slice(name.as_bytes());
            out.write_u32::<LittleEndian>(shape.len() as u32).unwrap();
            for &d in shape {
                out.write_u32::<LittleEndian>(d as u32).unwrap();
            }
            for &v in data {
                out.write_f32::<LittleEndian>(v).unwrap();
            }
        }
        out
    }

    pub fn decode(mut bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        let trunc = |_| Error::Checkpoint("truncated checkpoint".into());
        let mut magic = [0u8; 4];
        bytes.read_exact(&mut magic).map_err(trunc)?;
        if &magic != VCKP_MAGIC {
            return Err(bad(format!("bad magic {magic:?}, expected \"VCKP\"")));
        }
        let version = bytes.read_u16::<LittleEndian>().map_err(trunc)?;
        if version != VCKP_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = bytes.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        if bytes.len() < meta_len {
            return Err(bad("truncated metadata".into()));
        }
        let metadata: serde_json::Map<String, serde_json::Value> =
            serde_json::from_slice(&bytes[..meta_len]).map_err(|e| bad(format!("metadata: {e}")))?;
        bytes = &bytes[meta_len..];
        let count = bytes.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = bytes.read_u32::<LittleEndian>().map_err(trunc)? as usize;
            if bytes.len() < len {
                return Err(bad("truncated tensor name".into()));
            }
            let name = std::str::from_utf8(&bytes[..len]).map_err(|e| bad(format!("tensor name: {e}")))?.to_string();
            bytes = &bytes[len..];
            let rank = bytes.read_u32::<LittleEndian>().map_err(trunc)? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(bytes.read_u32::<LittleEndian>().map_err(trunc)? as usize);
            }
            let n = numel(&shape);
            if bytes.len() < n * 4 {
                return Err(bad(format!("truncated payload for {name}")));
            }
            let mut data = vec![0f32; n];
            bytes.read_f32_into::<LittleEndian>(&mut data).map_err(trunc)?;
            tensors.push((name, shape, data));
        }
        if !bytes.is_empty() {
            return Err(bad(format!("{} trailing bytes", bytes.len())));
        }
        Ok(Self { metadata, tensors })
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    w.write_all(&ckpt.encode()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    Checkpoint::decode(&bytes)
}

pub fn save_checkpoint<T: Real>(
    store: &ParamStore<T>,
    metadata: serde_json::Map<String, serde_json::Value>,
    path: impl AsRef<Path>,
) -> Result<()> {
    write_checkpoint(&Checkpoint::from_store(store, metadata), path)
}

pub fn load_checkpoint<T: Real>(store: &mut ParamStore<T>, path: impl AsRef<Path>) -> Result<Checkpoint> {
    let ckpt = read_checkpoint(path)?;
    ckpt.load_into(store, &[])?;
    Ok(ckpt)
}
