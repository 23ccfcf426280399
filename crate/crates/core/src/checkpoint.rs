//! Versioned binary container for named matrices plus JSON metadata.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header listing tensor names and shapes in storage order, then every
//! tensor as little-endian `f64` in row-major order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use gradtape::{Adam, ParamStore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Matrix;

const MAGIC: &[u8; 8] = b"STYLEVC\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Matrix>,
}

impl Checkpoint {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.to_string(),
            meta,
            tensors: BTreeMap::new(),
        }
    }

    /// Add every parameter as `<prefix><name>`.
    pub fn insert_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, value) in store.iter() {
            self.tensors.insert(format!("{prefix}{name}"), value.clone());
        }
    }

    /// Overwrite every parameter from `<prefix><name>`; names and shapes
    /// must match exactly.
    pub fn restore_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let key = format!("{prefix}{}", store.name(id));
            let saved = self
                .tensors
                .get(&key)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks tensor {key}")))?;
            let slot = store.value_mut(id);
            if saved.dim() != slot.dim() {
                return Err(Error::Data(format!(
                    "tensor {key} has shape {:?}, model expects {:?}",
                    saved.dim(),
                    slot.dim()
                )));
            }
            slot.assign(saved);
        }
        Ok(())
    }

    /// Optimizer moments stored per parameter name.
    pub fn insert_adam(&mut self, prefix: &str, store: &ParamStore, opt: &Adam) {
        let (m, v) = opt.moments();
        for ((name, _), (mi, vi)) in store.iter().zip(m.iter().zip(v)) {
            self.tensors.insert(format!("{prefix}m/{name}"), mi.clone());
            self.tensors.insert(format!("{prefix}v/{name}"), vi.clone());
        }
    }

    pub fn restore_adam(&self, prefix: &str, store: &ParamStore, opt: &mut Adam, step: u64) -> Result<()> {
        let mut m = Vec::with_capacity(store.len());
        let mut v = Vec::with_capacity(store.len());
        for (name, value) in store.iter() {
            for (out, key) in [(&mut m, format!("{prefix}m/{name}")), (&mut v, format!("{prefix}v/{name}"))] {
                let t = self
                    .tensors
                    .get(&key)
                    .ok_or_else(|| Error::Data(format!("checkpoint lacks optimizer state {key}")))?;
                if t.dim() != value.dim() {
                    return Err(Error::Data(format!("optimizer state {key} has the wrong shape")));
                }
                out.push(t.clone());
            }
        }
        opt.restore(step, m, v);
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<&Matrix> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Data(format!("checkpoint lacks tensor {name}")))
    }

    pub fn meta_as<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Data(format!("checkpoint metadata lacks {key:?}")))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::Data(format!("checkpoint metadata {key:?}: {e}")))
    }

    /// Write atomically through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, m)| TensorEntry {
                    name: name.clone(),
                    rows: m.nrows(),
                    cols: m.ncols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let data_len: usize = self.tensors.values().map(|m| m.len() * 8).sum();
        let mut bytes = Vec::with_capacity(20 + json.len() + data_len);
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&json);
        for m in self.tensors.values() {
            for v in m.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[20..header_end]).map_err(|e| bad(&format!("bad header: {e}")))?;
        let mut offset = header_end;
        let mut tensors = BTreeMap::new();
        for entry in header.tensors {
            let n = entry.rows * entry.cols;
            let end = offset + n * 8;
            if end > bytes.len() {
                return Err(bad(&format!("truncated data for {}", entry.name)));
            }
            let values: Vec<f64> = bytes[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            offset = end;
            let m = Matrix::from_shape_vec((entry.rows, entry.cols), values).expect("shape matches");
            tensors.insert(entry.name, m);
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn roundtrip_preserves_tensors_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let mut store = ParamStore::new();
        store.add("a", array![[1.0, 2.0], [3.0, f64::MIN_POSITIVE]]);
        store.add("b", array![[-0.1]]);
        let mut ck = Checkpoint::new("test", serde_json::json!({"step": 3}));
        ck.insert_store("p/", &store);
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.meta_as::<u64>("step").unwrap(), 3);

        let mut other = ParamStore::new();
        other.add("a", array![[0.0, 0.0], [0.0, 0.0]]);
        other.add("b", array![[0.0]]);
        back.restore_store("p/", &mut other).unwrap();
        assert_eq!(other.iter().map(|(_, m)| m.clone()).collect::<Vec<_>>(), store.iter().map(|(_, m)| m.clone()).collect::<Vec<_>>());
    }

    #[test]
    fn shape_mismatch_and_corruption_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let mut store = ParamStore::new();
        store.add("a", array![[1.0, 2.0]]);
        let mut ck = Checkpoint::new("test", serde_json::Value::Null);
        ck.insert_store("", &store);
        ck.save(&path).unwrap();
        let mut wrong = ParamStore::new();
        wrong.add("a", array![[1.0], [2.0]]);
        assert!(Checkpoint::load(&path).unwrap().restore_store("", &mut wrong).is_err());

        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format { .. })));
        fs::write(&path, b"garbage").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
