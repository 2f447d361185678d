//! Named, grouped model parameters with trainability flags, SHA-256 group
//! digests, and a binary checkpoint format.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! magic "UVLW0001"
//! u32 param count
//! per param: u32 name len, name bytes, u32 group len, group bytes,
//!            u8 ndim, u32 dims..., f64 data
//! ```
//!
//! Values serialize as f64 which round-trips f32 exactly, so digests and
//! save/load are bit-stable.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, thiserror::Error)]
pub enum ParamError {
    #[error("duplicate parameter name: {0}")]
    DuplicateName(String),
    #[error("unknown parameter group: {0}")]
    UnknownGroup(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    Format(String),
    #[error("checkpoint parameter mismatch: {0}")]
    Mismatch(String),
}

struct Entry<T: Scalar> {
    name: String,
    group: String,
    value: ArrayD<T>,
    grad: ArrayD<T>,
    trainable: bool,
}

pub struct ParamStore<T: Scalar> {
    entries: Vec<Entry<T>>,
    by_name: BTreeMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, group: &str, value: ArrayD<T>) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let grad = ArrayD::zeros(value.raw_dim());
        self.entries.push(Entry {
            name: name.to_string(),
            group: group.to_string(),
            value,
            grad,
            trainable: true,
        });
        let id = self.entries.len() - 1;
        self.by_name.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group_of(&self, id: ParamId) -> &str {
        &self.entries[id.0].group
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &ArrayD<T> {
        &self.entries[id.0].grad
    }

    pub fn accumulate_grad(&mut self, id: ParamId, delta: &ArrayD<T>) {
        self.entries[id.0].grad += delta;
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(T::zero());
        }
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].trainable)
            .map(ParamId)
            .collect()
    }

    /// All group names, sorted.
    pub fn groups(&self) -> Vec<String> {
        let mut set: Vec<String> = self
            .entries
            .iter()
            .map(|e| e.group.clone())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        set.sort();
        set
    }

    /// Mark exactly the listed groups trainable; everything else freezes.
    /// Unknown group names are an error (named in the message).
    pub fn set_trainable_groups(&mut self, trainable: &[String]) -> Result<(), ParamError> {
        let known = self.groups();
        for g in trainable {
            if !known.contains(g) {
                return Err(ParamError::UnknownGroup(g.clone()));
            }
        }
        for e in &mut self.entries {
            e.trainable = trainable.iter().any(|g| g == &e.group);
        }
        Ok(())
    }

    pub fn set_all_trainable(&mut self) {
        for e in &mut self.entries {
            e.trainable = true;
        }
    }

    fn digest_entries(&self, idxs: &[usize]) -> String {
        let mut hasher = Sha256::new();
        for &i in idxs {
            let e = &self.entries[i];
            hasher.update(e.name.as_bytes());
            hasher.update([0u8]);
            for d in e.value.shape() {
                hasher.update((*d as u32).to_le_bytes());
            }
            for v in e.value.iter() {
                hasher.update(v.to_f().to_le_bytes());
            }
        }
        hex(&hasher.finalize())
    }

    /// SHA-256 over a group's parameters in name order.
    pub fn group_digest(&self, group: &str) -> String {
        let mut idxs: Vec<usize> = (0..self.entries.len())
            .filter(|&i| self.entries[i].group == group)
            .collect();
        idxs.sort_by(|&a, &b| self.entries[a].name.cmp(&self.entries[b].name));
        self.digest_entries(&idxs)
    }

    pub fn digests_by_group(&self) -> BTreeMap<String, String> {
        self.groups()
            .into_iter()
            .map(|g| {
                let d = self.group_digest(&g);
                (g, d)
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), ParamError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(b"UVLW0001")?;
        f.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            f.write_all(&(e.name.len() as u32).to_le_bytes())?;
            f.write_all(e.name.as_bytes())?;
            f.write_all(&(e.group.len() as u32).to_le_bytes())?;
            f.write_all(e.group.as_bytes())?;
            f.write_all(&[e.value.ndim() as u8])?;
            for d in e.value.shape() {
                f.write_all(&(*d as u32).to_le_bytes())?;
            }
            for v in e.value.iter() {
                f.write_all(&v.to_f().to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Load values into an already-registered store; the set of parameter
    /// names and shapes must match exactly.
    pub fn load(&mut self, path: &Path) -> Result<(), ParamError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != b"UVLW0001" {
            return Err(ParamError::Format("bad magic".into()));
        }
        let count = read_u32(&mut f)? as usize;
        if count != self.entries.len() {
            return Err(ParamError::Mismatch(format!(
                "checkpoint has {count} params, model has {}",
                self.entries.len()
            )));
        }
        let mut seen = 0usize;
        for _ in 0..count {
            let name = read_string(&mut f)?;
            let _group = read_string(&mut f)?;
            let mut nd = [0u8; 1];
            f.read_exact(&mut nd)?;
            let ndim = nd[0] as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(read_u32(&mut f)? as usize);
            }
            let n: usize = dims.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                f.read_exact(&mut buf)?;
                data.push(T::from_f(f64::from_le_bytes(buf)));
            }
            let idx = *self
                .by_name
                .get(&name)
                .ok_or_else(|| ParamError::Mismatch(format!("unexpected parameter {name}")))?;
            if self.entries[idx].value.shape() != dims.as_slice() {
                return Err(ParamError::Mismatch(format!(
                    "shape mismatch for {name}: {:?} vs {:?}",
                    self.entries[idx].value.shape(),
                    dims
                )));
            }
            self.entries[idx].value = ArrayD::from_shape_vec(IxDyn(&dims), data)
                .map_err(|e| ParamError::Format(e.to_string()))?;
            seen += 1;
        }
        debug_assert_eq!(seen, count);
        Ok(())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, std::io::Error> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R) -> Result<String, ParamError> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| ParamError::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn digest_changes_with_values() {
        let mut ps = ParamStore::<f32>::new();
        let id = ps.register("a.w", "grp", arr1(&[1.0f32, 2.0]).into_dyn());
        let d1 = ps.group_digest("grp");
        ps.value_mut(id)[[0]] = 1.5;
        let d2 = ps.group_digest("grp");
        assert_ne!(d1, d2);
    }

    #[test]
    fn save_load_roundtrip_is_exact() {
        let dir = std::env::temp_dir().join("uvl_params_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ckpt.bin");
        let mut ps = ParamStore::<f32>::new();
        ps.register("x", "g1", arr1(&[0.1f32, -0.2, 0.33333]).into_dyn());
        ps.register("y", "g2", arr1(&[5.0f32]).into_dyn());
        let before = ps.digests_by_group();
        ps.save(&path).unwrap();
        let mut ps2 = ParamStore::<f32>::new();
        ps2.register("x", "g1", arr1(&[0.0f32, 0.0, 0.0]).into_dyn());
        ps2.register("y", "g2", arr1(&[0.0f32]).into_dyn());
        ps2.load(&path).unwrap();
        assert_eq!(before, ps2.digests_by_group());
    }

    #[test]
    fn unknown_group_is_named_in_error() {
        let mut ps = ParamStore::<f32>::new();
        ps.register("x", "g1", arr1(&[1.0f32]).into_dyn());
        let err = ps
            .set_trainable_groups(&["nope".to_string()])
            .unwrap_err();
        assert!(err.to_string().contains("nope"));
    }
}
