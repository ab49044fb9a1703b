use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

/// Identity of a [`ParameterStore`] within the process. Clones receive a
/// fresh id so a target copy never aliases its online source on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StoreId(u64);

impl StoreId {
    fn fresh() -> Self {
        StoreId(NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// Running batch statistics produced by a batch-mode normalization.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub store: StoreId,
    pub name: String,
    pub mean: Vec<f64>,
    /// Unbiased batch variance.
    pub var: Vec<f64>,
}

/// Momentum used for running normalization statistics.
pub const BN_RUNNING_MOMENTUM: f64 = 0.9;

/// Named trainable tensors plus non-trainable buffers (running statistics)
/// and optimizer momentum.
#[derive(Debug)]
pub struct ParameterStore {
    id: StoreId,
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
    momentum: BTreeMap<String, Vec<f64>>,
    step: u64,
}

impl Default for ParameterStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParameterStore {
    fn clone(&self) -> Self {
        ParameterStore {
            id: StoreId::fresh(),
            params: self.params.clone(),
            buffers: self.buffers.clone(),
            momentum: self.momentum.clone(),
            step: self.step,
        }
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        ParameterStore {
            id: StoreId::fresh(),
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            momentum: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn id(&self) -> StoreId {
        self.id
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn bump_step(&mut self) {
        self.step += 1;
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        self.momentum.remove(&name);
        self.params.insert(name, value);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor) {
        self.buffers.insert(name.into(), value);
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn has_grads(&self) -> bool {
        self.params.values().any(|t| t.grad().is_some())
    }

    pub fn zero_grads(&mut self) {
        for t in self.params.values_mut() {
            let n = t.numel();
            t.set_grad(vec![0.0; n]).expect("matching length");
        }
    }

    pub fn clear_grads(&mut self) {
        for t in self.params.values_mut() {
            t.clear_grad();
        }
    }

    pub(crate) fn momentum_entry(&mut self, name: &str, len: usize) -> &mut Vec<f64> {
        self.momentum
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; len])
    }

    pub fn momentum(&self, name: &str) -> Option<&[f64]> {
        self.momentum.get(name).map(Vec::as_slice)
    }

    /// Folds batch statistics into the running buffers `{name}.mean` / `{name}.var`.
    pub fn commit_bn(&mut self, updates: &[BnUpdate]) -> Result<()> {
        let id = self.id;
        for u in updates.iter().filter(|u| u.store == id) {
            let mean = self.buffer_mut(&format!("{}.mean", u.name))?;
            for (r, b) in mean.data_mut().iter_mut().zip(&u.mean) {
                *r = BN_RUNNING_MOMENTUM * *r + (1.0 - BN_RUNNING_MOMENTUM) * b;
            }
            let var = self.buffer_mut(&format!("{}.var", u.name))?;
            for (r, b) in var.data_mut().iter_mut().zip(&u.var) {
                *r = BN_RUNNING_MOMENTUM * *r + (1.0 - BN_RUNNING_MOMENTUM) * b;
            }
        }
        Ok(())
    }

    /// True when both stores hold the same parameter ids with the same shapes.
    pub fn aligned_with(&self, other: &ParameterStore) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape())
    }
}
