use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Array, AutodiffError};

/// Index of a parameter inside its [`ParameterStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    value: Array,
    grad: Array,
}

/// Named parameters, each paired with a gradient accumulator of the same shape.
///
/// No internal synchronization: share it read-only across threads, mutate
/// from one writer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, ParamId>,
}

/// One line of the on-disk manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Array) -> Result<ParamId, AutodiffError> {
        if self.by_name.contains_key(name) {
            return Err(AutodiffError::DuplicateParam(name.to_string()));
        }
        let id = ParamId(self.entries.len());
        let grad = Array::zeros(value.shape());
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            grad,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Array {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Array {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.entries[id.0].grad
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// A store with identical names and shapes, all values zero.
    pub fn zeros_like(&self) -> Self {
        let mut out = Self::new();
        for e in &self.entries {
            out.insert(&e.name, Array::zeros(e.value.shape()))
                .expect("names are unique");
        }
        out
    }

    /// SHA-256 over names, shapes and value bits.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            for &d in e.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in e.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn manifest(&self) -> Manifest {
        let mut offset = 0;
        let entries = self
            .entries
            .iter()
            .map(|e| {
                let m = ManifestEntry {
                    name: e.name.clone(),
                    shape: e.value.shape().to_vec(),
                    offset,
                };
                offset += e.value.len() * 8;
                m
            })
            .collect();
        Manifest { entries }
    }

    /// Flat little-endian `f64` blob in manifest order.
    pub fn blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_scalars() * 8);
        for e in &self.entries {
            for &v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_parts(manifest: &Manifest, blob: &[u8]) -> Result<Self, AutodiffError> {
        let mut store = Self::new();
        for m in &manifest.entries {
            let n: usize = m.shape.iter().product();
            let end = m.offset + n * 8;
            if end > blob.len() {
                return Err(AutodiffError::Serialization(format!(
                    "entry {} needs bytes {}..{} but blob has {}",
                    m.name,
                    m.offset,
                    end,
                    blob.len()
                )));
            }
            let data = blob[m.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            store.insert(&m.name, Array::new(m.shape.clone(), data)?)?;
        }
        Ok(store)
    }

    /// Writes `<stem>.json` (manifest) and `<stem>.bin` (blob) under `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(), AutodiffError> {
        let io = |e: std::io::Error| AutodiffError::Serialization(e.to_string());
        fs::create_dir_all(dir).map_err(io)?;
        let manifest = serde_json::to_string_pretty(&self.manifest())
            .map_err(|e| AutodiffError::Serialization(e.to_string()))?;
        fs::write(dir.join(format!("{stem}.json")), manifest).map_err(io)?;
        fs::write(dir.join(format!("{stem}.bin")), self.blob()).map_err(io)?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self, AutodiffError> {
        let io = |e: std::io::Error| AutodiffError::Serialization(e.to_string());
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(format!("{stem}.json"))).map_err(io)?)
            .map_err(|e| AutodiffError::Serialization(e.to_string()))?;
        let blob = fs::read(dir.join(format!("{stem}.bin"))).map_err(io)?;
        Self::from_parts(&manifest, &blob)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("w", Array::matrix(2, 2, vec![1.0, -2.5, 3.25, 0.0]).unwrap())
            .unwrap();
        s.insert("b", Array::vector(vec![f64::MIN_POSITIVE, -0.0, 7.0]))
            .unwrap();
        s
    }

    #[test]
    fn manifest_offsets_are_bytes() {
        let m = sample().manifest();
        assert_eq!(m.entries[0].offset, 0);
        assert_eq!(m.entries[1].offset, 32);
        assert_eq!(sample().blob().len(), 56);
    }

    #[test]
    fn blob_round_trip_is_bit_exact() {
        let s = sample();
        let back = ParameterStore::from_parts(&s.manifest(), &s.blob()).unwrap();
        assert_eq!(s.digest(), back.digest());
        let dir = tempfile::tempdir().unwrap();
        s.save(dir.path(), "params").unwrap();
        let loaded = ParameterStore::load(dir.path(), "params").unwrap();
        for id in s.ids() {
            let a: Vec<u64> = s.value(id).data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = loaded.value(id).data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_grads_and_shapes() {
        let mut s = sample();
        let w = s.id("w").unwrap();
        s.grad_mut(w).data_mut()[0] = 4.0;
        s.zero_grads();
        for id in s.ids() {
            assert_eq!(s.grad(id).shape(), s.value(id).shape());
            assert!(s.grad(id).data().iter().all(|&g| g == 0.0));
        }
        assert!(s.insert("w", Array::scalar(0.0)).is_err());
    }
}
