use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Globally unique reference to a parameter: owning store plus index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamKey {
    pub store: u64,
    pub id: ParamId,
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub values: Arc<Tensor>,
    pub gradient: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn numel(&self) -> usize {
        self.values.numel()
    }
}

/// Owns every value of one network: trainable weights and non-trainable
/// buffers such as batch-norm running statistics.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
            by_name: self.by_name.clone(),
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn key(&self, id: ParamId) -> ParamKey {
        ParamKey { store: self.uid, id }
    }

    pub fn add(&mut self, name: impl Into<String>, values: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        let gradient = Tensor::zeros(values.shape());
        self.params.push(Parameter {
            name,
            values: Arc::new(values),
            gradient,
            trainable,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    /// Number of trainable scalar values.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(Parameter::numel).sum()
    }

    pub fn values(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].values
    }

    /// Replaces a parameter's values; the shape must not change.
    pub fn set_values(&mut self, id: ParamId, values: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.values.shape() != values.shape() {
            return Err(shape_err!(
                "parameter {} has shape {:?}, got {:?}",
                p.name,
                p.values.shape(),
                values.shape()
            ));
        }
        p.values = Arc::new(values);
        Ok(())
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.params[id.0].values)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.gradient.data_mut().fill(0.0);
        }
    }

    /// Adds the gradients belonging to this store into each parameter.
    pub fn accumulate(&mut self, grads: &super::graph::Gradients) {
        for (key, g) in grads.params() {
            if key.store == self.uid {
                let p = &mut self.params[key.id.0];
                if p.trainable {
                    p.gradient.add_assign(g);
                }
            }
        }
    }

    pub fn apply_state_updates(&mut self, updates: Vec<(ParamKey, Tensor)>) {
        for (key, value) in updates {
            if key.store == self.uid {
                self.params[key.id.0].values = Arc::new(value);
            }
        }
    }

    /// Deterministic digest over every name and value bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for p in &self.params {
            p.name.hash(&mut h);
            for v in p.values.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Copies every value from `other`, matching by name.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let id = other
                .find(&p.name)
                .ok_or_else(|| Error::Load(format!("missing tensor {}", p.name)))?;
            let src = &other.params[id.0].values;
            if src.shape() != p.values.shape() {
                return Err(shape_err!("shape mismatch for {}", p.name));
            }
            p.values = Arc::clone(src);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_tracks_values() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::zeros(&[2]), true);
        let before = s.fingerprint();
        s.values_mut(id).data_mut()[0] = 1.0;
        assert_ne!(before, s.fingerprint());
    }

    #[test]
    fn trainable_count_skips_buffers() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(&[3, 4]), true);
        s.add("running_mean", Tensor::zeros(&[4]), false);
        assert_eq!(s.trainable_count(), 12);
    }

    #[test]
    fn clones_get_fresh_ids() {
        let s = ParamStore::new();
        assert_ne!(s.uid(), s.clone().uid());
    }
}
