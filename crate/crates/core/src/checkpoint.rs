//! Binary checkpoint container: a JSON metadata record followed by named
//! f32 weight arrays. All model kinds (VAE, denoiser, stubs, the assembled
//! restorer) share this format.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"IBFR";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Named weight arrays plus a free-form metadata record.
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    tensors: BTreeMap<String, Tensor>,
}

impl Container {
    pub fn new(kind: impl Into<String>) -> Self {
        Container {
            kind: kind.into(),
            meta: serde_json::Value::Null,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn meta_str(&self, key: &str) -> Result<String> {
        self.meta
            .get(key)
            .and_then(|v| v.as_str())
            .map(|s| s.to_string())
            .ok_or_else(|| Error::Checkpoint(format!("missing meta key {key:?}")))
    }

    pub fn meta_u64(&self, key: &str) -> Result<u64> {
        self.meta
            .get(key)
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Checkpoint(format!("missing meta key {key:?}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut entries = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: payload.len(),
                len: t.numel(),
            });
            payload.extend_from_slice(&t.to_le_bytes());
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(MAGIC).map_err(|e| Error::io(path, e))?;
        f.write_all(&FORMAT_VERSION.to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
        f.write_all(&(header_bytes.len() as u64).to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
        f.write_all(&header_bytes).map_err(|e| Error::io(path, e))?;
        f.write_all(&payload).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut v4 = [0u8; 4];
        f.read_exact(&mut v4).map_err(|e| Error::io(path, e))?;
        let version = u32::from_le_bytes(v4);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let mut l8 = [0u8; 8];
        f.read_exact(&mut l8).map_err(|e| Error::io(path, e))?;
        let hlen = u64::from_le_bytes(l8) as usize;
        let mut hbytes = vec![0u8; hlen];
        f.read_exact(&mut hbytes).map_err(|e| Error::io(path, e))?;
        let header: Header = serde_json::from_slice(&hbytes)
            .map_err(|e| Error::Checkpoint(format!("header decode: {e}")))?;
        let mut payload = Vec::new();
        f.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let start = e.offset; // byte offset into the payload
            let nbytes = e.len * 4;
            let slice = payload
                .get(start..start + nbytes)
                .ok_or_else(|| Error::Checkpoint(format!("truncated payload for {}", e.name)))?;
            let data: Vec<f32> = slice
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                .collect();
            let expect: usize = e.shape.iter().product();
            if expect != data.len() {
                return Err(Error::Checkpoint(format!("shape mismatch for {}", e.name)));
            }
            tensors.insert(e.name, Tensor::new(e.shape, data));
        }
        Ok(Container {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    /// Hash over sorted tensor names, shapes, and raw payload bytes.
    pub fn weights_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(t.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Hash over a named, ordered set of in-memory weight tensors.
pub fn hash_weights<'a>(named: impl Iterator<Item = (&'a str, &'a Tensor)>) -> String {
    let mut h = Sha256::new();
    for (name, t) in named {
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        h.update(t.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// SHA-256 of a file's bytes, hex-encoded.
pub fn file_hash(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut c = Container::new("test");
        c.meta = serde_json::json!({"factor": 4, "note": "x"});
        c.insert("enc.w", Tensor::randn(vec![3, 2, 3, 3], 1.0, &mut rng));
        c.insert("enc.b", Tensor::randn(vec![3], 1.0, &mut rng));
        c.save(&p).unwrap();
        let back = Container::load(&p).unwrap();
        assert_eq!(back.kind, "test");
        assert_eq!(back.meta_u64("factor").unwrap(), 4);
        assert_eq!(back.get("enc.w").unwrap(), c.get("enc.w").unwrap());
        assert_eq!(back.weights_hash(), c.weights_hash());
    }

    #[test]
    fn hash_changes_with_weights() {
        let mut a = Container::new("t");
        a.insert("w", Tensor::scalar(1.0));
        let mut b = Container::new("t");
        b.insert("w", Tensor::scalar(2.0));
        assert_ne!(a.weights_hash(), b.weights_hash());
    }
}
