//! Named-tensor checkpoint container backed by the safetensors format.
//!
//! Free-form string metadata (config hash, step count, ...) rides in the
//! safetensors `__metadata__` header.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::{NnError, Result};

pub type CheckpointMeta = BTreeMap<String, String>;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn insert_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, t) in store.iter() {
            self.tensors.insert(format!("{prefix}{name}"), t.clone());
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn load_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        store.load_named(|name| self.tensors.get(&format!("{prefix}{name}")))
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let raw = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                (name.clone(), t.shape().to_vec(), raw)
            })
            .collect();
        let views = bytes
            .iter()
            .map(|(name, shape, raw)| {
                TensorView::new(Dtype::F32, shape.clone(), raw)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| NnError::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta: HashMap<String, String> = self.meta.clone().into_iter().collect();
        let buf = safetensors::serialize(views, &Some(meta)).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        canonical_header(&buf)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(buf).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        let st = SafeTensors::deserialize(buf).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(NnError::Checkpoint(format!("tensor `{name}` has dtype {:?}, expected F32", view.dtype())));
            }
            let dims = view.shape();
            if dims.len() > 4 {
                return Err(NnError::Checkpoint(format!("tensor `{name}` has rank {}", dims.len())));
            }
            let mut shape = [1usize; 4];
            shape[4 - dims.len()..].copy_from_slice(dims);
            let data = view.data().chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            tensors.insert(name, Tensor::from_vec(shape, data));
        }
        let meta = header.metadata().clone().unwrap_or_default().into_iter().collect();
        Ok(Self { tensors, meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Rewrites the JSON header with sorted keys so equal checkpoints give equal bytes.
fn canonical_header(buf: &[u8]) -> Result<Vec<u8>> {
    let bad = |e: String| NnError::Checkpoint(e);
    let n = u64::from_le_bytes(buf[..8].try_into().expect("8-byte prefix")) as usize;
    let header: serde_json::Value = serde_json::from_slice(&buf[8..8 + n]).map_err(|e| bad(e.to_string()))?;
    let mut json = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
    while json.len() % 8 != 0 {
        json.push(b' ');
    }
    let mut out = Vec::with_capacity(buf.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&buf[8 + n..]);
    Ok(out)
}
