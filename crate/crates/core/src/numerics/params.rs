//! Named parameter storage and per-parameter gradient buffers.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{Error, Result};

static NEXT_STORE_UID: AtomicU64 = AtomicU64::new(1);

fn fresh_uid() -> u64 {
    NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed)
}

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Frozen entries never receive gradients and are never updated.
    pub frozen: bool,
}

/// Ordered collection of named tensors.
///
/// Every store carries a process-unique id so that a [`super::Graph`] can
/// bind two stores (actor and reference) at once without mixing their leaves.
/// Cloning yields a new id.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            uid: fresh_uid(),
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), value: e.value.clone(), frozen: e.frozen })
                .collect(),
            index: self.index.clone(),
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self { uid: fresh_uid(), entries: Vec::new(), index: HashMap::new() }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, frozen: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value, frozen });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    /// Total number of scalar values.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Replace every tensor with the one of the same name in `other`.
    /// Layouts must match exactly.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Shape(format!(
                "parameter count {} vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Shape(format!("parameter {} does not match {}", dst.name, src.name)));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and the exact bit patterns of the values of
    /// the selected parameters.
    pub fn digest_where(&self, keep: impl Fn(&ParamEntry) -> bool) -> String {
        let mut h = Sha256::new();
        for e in self.entries.iter().filter(|e| keep(e)) {
            h.update(e.name.as_bytes());
            h.update((e.value.rows() as u64).to_le_bytes());
            h.update((e.value.cols() as u64).to_le_bytes());
            for v in e.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        crate::numerics::hex_digest(&h.finalize())
    }

    pub fn digest(&self) -> String {
        self.digest_where(|_| true)
    }
}

/// Gradient buffers aligned with a [`ParamStore`]'s layout. `None` means the
/// parameter was not reached (its gradient is identically zero).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn empty(n_params: usize) -> Self {
        Self { grads: vec![None; n_params] }
    }

    pub(crate) fn from_vec(grads: Vec<Option<Tensor>>) -> Self {
        Self { grads }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, Option<&Tensor>)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g.as_ref()))
    }

    /// Accumulate `scale * other` into `self`.
    pub fn add_scaled(&mut self, other: &ParamGrads, scale: f64) {
        debug_assert_eq!(self.grads.len(), other.grads.len());
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            let Some(src) = src else { continue };
            match dst {
                Some(d) => {
                    for (a, b) in d.data_mut().iter_mut().zip(src.data()) {
                        *a += scale * b;
                    }
                }
                None => {
                    let mut t = src.clone();
                    t.scale_assign(scale);
                    *dst = Some(t);
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }

    /// Drop the gradients of the parameters matching `pred`.
    pub fn clear_where(&mut self, store: &ParamStore, pred: impl Fn(&ParamEntry) -> bool) {
        for (i, g) in self.grads.iter_mut().enumerate() {
            if pred(store.entry(ParamId(i))) {
                *g = None;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().map(|g| g.sq_norm()).sum::<f64>().sqrt()
    }

    /// Squared norm over the parameters whose name starts with `prefix`.
    pub fn norm_with_prefix(&self, store: &ParamStore, prefix: &str) -> f64 {
        self.grads
            .iter()
            .enumerate()
            .filter(|(i, _)| store.entry(ParamId(*i)).name.starts_with(prefix))
            .filter_map(|(_, g)| g.as_ref())
            .map(|g| g.sq_norm())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale so the global norm does not exceed `max_norm`; returns the
    /// norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.is_finite())
    }
}
